//! Central finite-difference gradient oracle.
//!
//! Independent of the tape's backward rules by construction: the numeric
//! side only ever evaluates the loss forward at perturbed parameters. At
//! most `max_coords` randomly chosen coordinates are probed per parameter
//! to keep runtime linear in parameter count.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{NodeId, Tape};

/// Relative error convention used throughout: |a - n| / max(1, |a|, |n|).
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub coords_checked: usize,
}

/// Check analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn` must be deterministic: it is re-evaluated many times at
/// perturbed parameter values and any internal randomness has to replay
/// identically (seed it inside the closure).
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    loss_fn: F,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    // Analytic pass.
    store.zero_grad();
    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, store)?;
    let loss0 = tape.value(root).item();
    if !loss0.is_finite() {
        return Err(Error::Numeric(format!("grad_check: non-finite loss {loss0}")));
    }
    tape.backward(root, store)?;
    let analytic: Vec<Vec<f64>> =
        params.iter().map(|&p| store.get(p).grad.data().to_vec()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let root = loss_fn(&mut tape, store)?;
        Ok(tape.value(root).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coords_checked: 0,
    };

    for (slot, &pid) in params.iter().enumerate() {
        let n = store.get(pid).value.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, max_coords).into_vec()
        };
        for &i in &coords {
            let orig = store.get(pid).value.data()[i];
            store.get_mut(pid).value.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(pid).value.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(pid).value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite loss while perturbing {}",
                    store.get(pid).name
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let e = rel_err(analytic[slot][i], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = format!("{}[{}]", store.get(pid).name, i);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn quadratic_loss_is_exact_up_to_roundoff() {
        // loss = mean(p^2): central differences are exact for quadratics.
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::from_vec(vec![0.3, -1.7, 2.2]));
        let report = grad_check(
            &mut store,
            &[p],
            |tape, store| {
                let x = tape.param(store, p);
                let sq = tape.square(x);
                Ok(tape.mean(sq))
            },
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
    }

    #[test]
    fn coordinate_sampling_caps_work() {
        let mut store = ParamStore::new();
        let p = store.add("big", Tensor::zeros(&[200]));
        let report = grad_check(
            &mut store,
            &[p],
            |tape, store| {
                let x = tape.param(store, p);
                let sq = tape.square(x);
                Ok(tape.sum(sq))
            },
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert_eq!(report.coords_checked, 16);
    }

    #[test]
    fn every_primitive_passes_grad_check_on_random_shapes() {
        // Randomized-shape sweep over each registered primitive at 1e-4.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut rand_tensor = |shape: &[usize], rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };

        // Each case: (name, builder) where the builder maps param nodes to a scalar.
        for trial in 0..3 {
            let n = 1 + (trial % 2);
            let c = 2 + trial;
            let h = 3 + trial;
            let shape4 = [n, c, h, h];
            let cases: Vec<(&str, Box<dyn Fn(&mut Tape, &ParamStore, ParamId, ParamId) -> Result<NodeId>>)> = vec![
                ("add", Box::new(|t, s, p, q| {
                    let a = t.param(s, p);
                    let b = t.param(s, q);
                    let y = t.add(a, b)?;
                    let y = t.square(y);
                    Ok(t.mean(y))
                })),
                ("mul", Box::new(|t, s, p, q| {
                    let a = t.param(s, p);
                    let b = t.param(s, q);
                    let y = t.mul(a, b)?;
                    Ok(t.sum(y))
                })),
                ("relu", Box::new(|t, s, p, _| {
                    let a = t.param(s, p);
                    let y = t.relu(a);
                    let y = t.square(y);
                    Ok(t.mean(y))
                })),
                ("leaky_relu", Box::new(|t, s, p, _| {
                    let a = t.param(s, p);
                    let y = t.leaky_relu(a, 0.2);
                    let y = t.square(y);
                    Ok(t.mean(y))
                })),
                ("sigmoid", Box::new(|t, s, p, _| {
                    let a = t.param(s, p);
                    let y = t.sigmoid(a);
                    let y = t.square(y);
                    Ok(t.mean(y))
                })),
                ("concat_slice_pad", Box::new(|t, s, p, q| {
                    let a = t.param(s, p);
                    let b = t.param(s, q);
                    let cc = t.concat_channel(&[a, b])?;
                    let sl = t.slice_channel(cc, 1, 2)?;
                    let pd = t.pad2d(sl, 1)?;
                    let y = t.square(pd);
                    Ok(t.mean(y))
                })),
                ("pool_mean", Box::new(|t, s, p, _| {
                    let a = t.param(s, p);
                    let mx = t.max_pool2d(a, 2, 1)?;
                    let av = t.avg_pool2d(a, 2, 1)?;
                    let both = t.add(mx, av)?;
                    let g = t.global_avg_pool(both)?;
                    let g = t.square(g);
                    Ok(t.mean(g))
                })),
                ("scale_addconst_square", Box::new(|t, s, p, _| {
                    let a = t.param(s, p);
                    let y = t.scale(a, -1.0);
                    let y = t.add_const(y, 1.0);
                    let y = t.square(y);
                    Ok(t.mean(y))
                })),
            ];
            for (name, build) in &cases {
                let mut store = ParamStore::new();
                let p = store.add("p", rand_tensor(&shape4, &mut rng));
                let q = store.add("q", rand_tensor(&shape4, &mut rng));
                let report =
                    grad_check(&mut store, &[p, q], |t, s| build(t, s, p, q), 1e-5, 64, trial as u64)
                        .unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{name} (trial {trial}): rel err {} at {}",
                    report.max_rel_err,
                    report.worst_param
                );
            }

            // matmul / log_softmax / nll on 2-D shapes
            let rows = 3 + trial;
            let inner = 4 + trial;
            let cols = 5;
            let mut store = ParamStore::new();
            let p = store.add("a", rand_tensor(&[rows, inner], &mut rng));
            let q = store.add("b", rand_tensor(&[inner, cols], &mut rng));
            let labels: Vec<usize> = (0..rows).map(|i| i % cols).collect();
            let report = grad_check(
                &mut store,
                &[p, q],
                |t, s| {
                    let a = t.param(s, p);
                    let b = t.param(s, q);
                    let z = t.matmul(a, b)?;
                    let lp = t.log_softmax(z)?;
                    t.nll_pick(lp, &labels)
                },
                1e-5,
                64,
                7 + trial as u64,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "matmul+ce: {}", report.max_rel_err);

            // conv2d with stride/pad
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&[2, 3, 6, 6], &mut rng));
            let w = store.add("w", rand_tensor(&[4, 3, 3, 3], &mut rng));
            let bias = store.add("bias", rand_tensor(&[4], &mut rng));
            let report = grad_check(
                &mut store,
                &[x, w, bias],
                |t, s| {
                    let xn = t.param(s, x);
                    let wn = t.param(s, w);
                    let bn = t.param(s, bias);
                    let y = t.conv2d(xn, wn, 2, 1)?;
                    let y = t.add_bias(y, bn)?;
                    let y = t.square(y);
                    Ok(t.mean(y))
                },
                1e-5,
                64,
                11 + trial as u64,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "conv2d: {}", report.max_rel_err);

            // batch norm (train) over 4-D input
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&[3, 2, 4, 4], &mut rng));
            let gamma = store.add("gamma", rand_tensor(&[2], &mut rng));
            let beta = store.add("beta", rand_tensor(&[2], &mut rng));
            let report = grad_check(
                &mut store,
                &[x, gamma, beta],
                |t, s| {
                    let xn = t.param(s, x);
                    let gn = t.param(s, gamma);
                    let bn = t.param(s, beta);
                    let (y, _, _) = t.batch_norm_train(xn, gn, bn, 1e-5)?;
                    let y = t.square(y);
                    Ok(t.mean(y))
                },
                1e-5,
                64,
                13 + trial as u64,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "batch_norm: {}", report.max_rel_err);

            // dropout with a fixed mask
            let mut store = ParamStore::new();
            let x = store.add("x", rand_tensor(&[2, 3, 4, 4], &mut rng));
            let mask: Vec<f64> =
                (0..2 * 3 * 4 * 4).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let report = grad_check(
                &mut store,
                &[x],
                move |t, s| {
                    let xn = t.param(s, x);
                    let y = t.dropout(xn, mask.clone(), 0.5)?;
                    let y = t.square(y);
                    Ok(t.mean(y))
                },
                1e-5,
                64,
                17 + trial as u64,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "dropout: {}", report.max_rel_err);
        }
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a*f + b*g) == a*grad(f) + b*grad(g) element-wise, 64-bit exact to 1e-12.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (0.7, -1.3);

        let grad_of = |combine: &dyn Fn(&mut Tape, NodeId, NodeId) -> Result<NodeId>,
                       data: &[f64]|
         -> Vec<f64> {
            let mut store = ParamStore::new();
            let p = store.add("p", Tensor::from_vec(data.to_vec()));
            let mut tape = Tape::new();
            let x = tape.param(&store, p);
            let sq = tape.square(x);
            let f = tape.mean(sq);
            let sg = tape.sigmoid(x);
            let g = tape.sum(sg);
            let root = combine(&mut tape, f, g).unwrap();
            tape.backward(root, &mut store).unwrap();
            store.get(p).grad.data().to_vec()
        };

        let combined = grad_of(
            &|t, f, g| {
                let fa = t.scale(f, a);
                let gb = t.scale(g, b);
                t.add(fa, gb)
            },
            &data,
        );
        let f_only = grad_of(&|t, f, _| Ok(t.scale(f, 1.0)), &data);
        let g_only = grad_of(&|t, _, g| Ok(t.scale(g, 1.0)), &data);
        for i in 0..data.len() {
            let lincomb = a * f_only[i] + b * g_only[i];
            assert!((combined[i] - lincomb).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_determinism_bit_identical() {
        let run = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p = store.add("p", Tensor::new(vec![2, 3, 2, 2], data).unwrap());
            let w = store.add("w", Tensor::full(&[2, 3, 1, 1], 0.5));
            let mut tape = Tape::new();
            let x = tape.param(&store, p);
            let wn = tape.param(&store, w);
            let y = tape.conv2d(x, wn, 1, 0).unwrap();
            let y = tape.sigmoid(y);
            let m = tape.mean(y);
            let out = tape.value(m).item();
            tape.backward(m, &mut store).unwrap();
            (out, store.get(p).grad.data().to_vec())
        };
        let (o1, g1) = run();
        let (o2, g2) = run();
        assert_eq!(o1.to_bits(), o2.to_bits());
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
