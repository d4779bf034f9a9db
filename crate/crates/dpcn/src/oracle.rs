//! The gradient-oracle suite: every layer kind, every discriminator loss,
//! and the full Step-1/Step-2 composite losses checked against the
//! central-difference oracle. Backs the `gradcheck` subcommand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::synth_shapes;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::layers::{softmax_cross_entropy, ActKind, InitScheme, LayerSpec, Mode, PoolKind, Sequential};
use crate::model::{build_preset, Discriminator, ModelConfig, PresetName, TapPoint};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::train::{loss_d1, loss_d2, loss_d3, subnet_disc_loss};

pub const SUITE_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const MAX_COORDS: usize = 64;

#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < SUITE_TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.2..1.2)).collect()).unwrap()
}

fn record(cases: &mut Vec<SuiteCase>, name: &str, report: GradCheckReport) {
    cases.push(SuiteCase {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        coords_checked: report.coords_checked,
    });
}

/// A compact trainable discriminator over (C, hw, hw) features.
fn tiny_disc(store: &mut ParamStore, c: usize, hw: usize, sigmoid: bool, seed: u64) -> Discriminator {
    let mut rng = substream(seed, "init.tiny-disc");
    let trunk = Sequential::build(
        "tiny-disc",
        vec![
            LayerSpec::conv(c, 6, 3, 2, 1),
            LayerSpec::bn(6),
            LayerSpec::Activation(ActKind::LeakyRelu(0.2)),
            LayerSpec::GlobalAvgPool,
            LayerSpec::linear(6, 1),
        ],
        &[c, hw, hw],
        store,
        InitScheme::KaimingNormal,
        &mut rng,
    )
    .unwrap();
    Discriminator { taps: vec![TapPoint { stage: 0, adapter: None }], trunk, final_sigmoid: sigmoid }
}

/// Run the whole suite; each case reports its worst relative error.
pub fn run_suite() -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    let mut rng = substream(2024, "oracle");

    // -- layer kit, mixed stacks covering every layer kind --
    {
        let mut store = ParamStore::new();
        let mut irng = substream(1, "init.a");
        let net = Sequential::build(
            "stack-a",
            vec![
                LayerSpec::conv(2, 4, 3, 1, 1),
                LayerSpec::bn(4),
                LayerSpec::Activation(ActKind::Relu),
                LayerSpec::Pool { kind: PoolKind::Max, kernel: 2, stride: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::linear(4, 3),
            ],
            &[2, 8, 8],
            &mut store,
            InitScheme::KaimingNormal,
            &mut irng,
        )?;
        let x = rand_tensor(&[3, 2, 8, 8], &mut rng);
        let labels = vec![0usize, 2, 1];
        let ids = net.param_ids();
        let report = grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let mut frng = substream(7, "mask");
                let xn = tape.leaf(x.clone());
                let y = net.forward_frozen(tape, store, xn, &mut frng)?;
                softmax_cross_entropy(tape, y, &labels)
            },
            EPS,
            MAX_COORDS,
            11,
        )?;
        record(&mut cases, "layers.conv-bn-relu-maxpool-gap-linear", report);
    }
    {
        let mut store = ParamStore::new();
        let mut irng = substream(2, "init.b");
        let net = Sequential::build(
            "stack-b",
            vec![
                LayerSpec::conv(3, 4, 3, 2, 1),
                LayerSpec::Activation(ActKind::LeakyRelu(0.2)),
                LayerSpec::Pool { kind: PoolKind::Avg, kernel: 2, stride: 1 },
                LayerSpec::Dropout { rate: 0.3 },
                LayerSpec::bn(4),
                LayerSpec::Activation(ActKind::Sigmoid),
                LayerSpec::GlobalAvgPool,
                LayerSpec::linear(4, 2),
            ],
            &[3, 9, 9],
            &mut store,
            InitScheme::XavierUniform,
            &mut irng,
        )?;
        let x = rand_tensor(&[2, 3, 9, 9], &mut rng);
        let labels = vec![1usize, 0];
        let ids = net.param_ids();
        let report = grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let mut frng = substream(9, "mask");
                let xn = tape.leaf(x.clone());
                let y = net.forward_frozen(tape, store, xn, &mut frng)?;
                softmax_cross_entropy(tape, y, &labels)
            },
            EPS,
            MAX_COORDS,
            12,
        )?;
        record(&mut cases, "layers.conv-lrelu-avgpool-dropout-bn-sigmoid", report);
    }

    // -- residual wiring with a projection shortcut --
    {
        let mut store = ParamStore::new();
        let mut irng = substream(3, "init.res");
        let main = Sequential::build(
            "res.main",
            vec![
                LayerSpec::conv(3, 4, 3, 2, 1),
                LayerSpec::bn(4),
                LayerSpec::Activation(ActKind::Relu),
                LayerSpec::conv(4, 4, 3, 1, 1),
                LayerSpec::bn(4),
            ],
            &[3, 8, 8],
            &mut store,
            InitScheme::KaimingNormal,
            &mut irng,
        )?;
        let shortcut = Sequential::build(
            "res.shortcut",
            vec![LayerSpec::conv(3, 4, 1, 2, 0), LayerSpec::bn(4)],
            &[3, 8, 8],
            &mut store,
            InitScheme::KaimingNormal,
            &mut irng,
        )?;
        let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
        let mut ids = main.param_ids();
        ids.extend(shortcut.param_ids());
        let report = grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let mut frng = substream(5, "mask");
                let xn = tape.leaf(x.clone());
                let m = main.forward_frozen(tape, store, xn, &mut frng)?;
                let s = shortcut.forward_frozen(tape, store, xn, &mut frng)?;
                let sum = tape.add(m, s)?;
                let y = tape.relu(sum);
                let sq = tape.square(y);
                Ok(tape.mean(sq))
            },
            EPS,
            MAX_COORDS,
            13,
        )?;
        record(&mut cases, "layers.residual-projection-add", report);
    }

    // -- discriminator losses through a trainable head --
    for (name, which, sigmoid) in [
        ("loss.d1", 0usize, false),
        ("loss.d2", 1, false),
        ("loss.d3", 2, false),
        ("loss.d1-sigmoid-head", 0, true),
    ] {
        let mut store = ParamStore::new();
        let disc = tiny_disc(&mut store, 3, 6, sigmoid, 101 + which as u64);
        let feats = rand_tensor(&[4, 3, 6, 6], &mut rng);
        let ids = disc.param_ids();
        let report = grad_check(
            &mut store,
            &ids,
            |tape, store| {
                let mut frng = substream(3, "mask");
                let f = tape.leaf(feats.clone());
                let s = disc.score_ro(tape, store, &[f], Mode::Frozen, &mut frng)?;
                match which {
                    0 => loss_d1(tape, s),
                    1 => loss_d2(tape, s),
                    _ => loss_d3(tape, s),
                }
            },
            EPS,
            MAX_COORDS,
            14 + which as u64,
        )?;
        record(&mut cases, name, report);
    }

    // -- composite protocol losses on the toy preset --
    let mut cfg = ModelConfig::new(PresetName::SmallCnnToy, 2);
    cfg.seed = 31;
    cfg.input_hw = 8;
    let model = build_preset(&cfg)?;
    let (ds, _) = synth_shapes(2, 10, 8, 0.05, 17)?;
    let mut brng = substream(0, "batch");
    let (x_t, labels) = ds.batch(&[0, 5], crate::data::Augment::None, &mut brng);

    // step 1, subnet 2: L_cls2 + lambda L_D2 with the discriminator frozen
    // step 2, subnet 1 and 2: same shape with their own loss terms
    for (name, i) in [
        ("composite.step1-subnet2", 1usize),
        ("composite.step2-subnet1", 0),
        ("composite.step2-subnet2", 1),
    ] {
        let mut store = model.store.clone();
        let subnet = &model.subnets[i];
        let disc = &model.discriminator;
        let mut ids = subnet.param_ids();
        ids.extend(disc.param_ids());
        let x_in = x_t.clone();
        let labels_in = labels.clone();
        let report = grad_check(
            &mut store,
            &ids,
            move |tape, store| {
                let mut frng = substream(23, "mask");
                let x = tape.leaf(x_in.clone());
                let stages = subnet.forward_extractor_ro(tape, store, x, Mode::Frozen, &mut frng)?;
                let f = *stages.last().expect("stages");
                let logits = subnet.classifier.forward_frozen(tape, store, f, &mut frng)?;
                let cls = softmax_cross_entropy(tape, logits, &labels_in)?;
                let s = disc.score_ro(tape, store, &stages, Mode::Frozen, &mut frng)?;
                let ld = subnet_disc_loss(tape, i, s)?;
                let scaled = tape.scale(ld, 1.0);
                tape.add(cls, scaled)
            },
            EPS,
            24,
            21 + i as u64,
        )?;
        record(&mut cases, name, report);
    }

    // step 2, discriminator update: L_D over detached features
    {
        let mut store = model.store.clone();
        let disc = &model.discriminator;
        let ids = disc.param_ids();
        let x_in = x_t.clone();
        let subnets = &model.subnets;
        let report = grad_check(
            &mut store,
            &ids,
            move |tape, store| {
                let mut frng = substream(29, "mask");
                let x = tape.leaf(x_in.clone());
                let mut total = None;
                for (i, subnet) in subnets.iter().enumerate() {
                    let stages =
                        subnet.forward_extractor_ro(tape, store, x, Mode::Frozen, &mut frng)?;
                    let detached: Vec<_> = stages.iter().map(|&s| tape.detach(s)).collect();
                    let sc = disc.score_ro(tape, store, &detached, Mode::Frozen, &mut frng)?;
                    let ld = subnet_disc_loss(tape, i, sc)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, ld)?,
                        None => ld,
                    });
                }
                Ok(total.expect("subnets"))
            },
            EPS,
            MAX_COORDS,
            27,
        )?;
        record(&mut cases, "composite.step2-discriminator", report);
    }

    // three-subnet variant: subnet 3's loss and the widened joint loss
    {
        let mut cfg3 = ModelConfig::new(PresetName::SmallCnnToy, 2);
        cfg3.seed = 37;
        cfg3.input_hw = 8;
        cfg3.subnet_count = 3;
        let model3 = build_preset(&cfg3)?;
        let mut store = model3.store.clone();
        let subnet = &model3.subnets[2];
        let disc = &model3.discriminator;
        let mut ids = subnet.param_ids();
        ids.extend(disc.param_ids());
        let x_in = x_t.clone();
        let labels_in = labels.clone();
        let report = grad_check(
            &mut store,
            &ids,
            move |tape, store| {
                let mut frng = substream(31, "mask");
                let x = tape.leaf(x_in.clone());
                let stages = subnet.forward_extractor_ro(tape, store, x, Mode::Frozen, &mut frng)?;
                let f = *stages.last().expect("stages");
                let logits = subnet.classifier.forward_frozen(tape, store, f, &mut frng)?;
                let cls = softmax_cross_entropy(tape, logits, &labels_in)?;
                let s = disc.score_ro(tape, store, &stages, Mode::Frozen, &mut frng)?;
                let ld = loss_d3(tape, s)?;
                tape.add(cls, ld)
            },
            EPS,
            24,
            33,
        )?;
        record(&mut cases, "composite.step1-subnet3", report);

        let mut store = model3.store.clone();
        let disc = &model3.discriminator;
        let ids = disc.param_ids();
        let x_in = x_t.clone();
        let subnets = &model3.subnets;
        let report = grad_check(
            &mut store,
            &ids,
            move |tape, store| {
                let mut frng = substream(37, "mask");
                let x = tape.leaf(x_in.clone());
                let mut total = None;
                for (i, subnet) in subnets.iter().enumerate() {
                    let stages =
                        subnet.forward_extractor_ro(tape, store, x, Mode::Frozen, &mut frng)?;
                    let detached: Vec<_> = stages.iter().map(|&s| tape.detach(s)).collect();
                    let sc = disc.score_ro(tape, store, &detached, Mode::Frozen, &mut frng)?;
                    let ld = subnet_disc_loss(tape, i, sc)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, ld)?,
                        None => ld,
                    });
                }
                Ok(total.expect("subnets"))
            },
            EPS,
            MAX_COORDS,
            39,
        )?;
        record(&mut cases, "composite.step2-discriminator-3subnets", report);
    }

    // multi-stage feed through the adapter conv
    {
        let mut cfgm = ModelConfig::new(PresetName::SmallCnnToy, 2);
        cfgm.seed = 41;
        cfgm.input_hw = 8;
        cfgm.feed_stages = vec![0, 1];
        let modelm = build_preset(&cfgm)?;
        let mut store = modelm.store.clone();
        let subnet = &modelm.subnets[0];
        let disc = &modelm.discriminator;
        let mut ids = subnet.extractor_param_ids();
        ids.extend(disc.param_ids());
        let x_in = x_t.clone();
        let report = grad_check(
            &mut store,
            &ids,
            move |tape, store| {
                let mut frng = substream(43, "mask");
                let x = tape.leaf(x_in.clone());
                let stages = subnet.forward_extractor_ro(tape, store, x, Mode::Frozen, &mut frng)?;
                let s = disc.score_ro(tape, store, &stages, Mode::Frozen, &mut frng)?;
                loss_d1(tape, s)
            },
            EPS,
            24,
            47,
        )?;
        record(&mut cases, "composite.two-stage-adapter-feed", report);
    }

    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_suite_passes_at_tolerance() {
        let cases = run_suite().unwrap();
        assert!(cases.len() >= 12);
        for c in &cases {
            assert!(c.passed(), "{}: rel err {}", c.name, c.max_rel_err);
            assert!(c.coords_checked > 0);
        }
    }
}
