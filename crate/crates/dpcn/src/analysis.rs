//! Verification instruments: Grad-CAM heatmaps, discriminator-based
//! divergence reports, and feature-similarity diagnostics. Everything here
//! treats the model as frozen.

use crate::data::{Augment, Dataset};
use rand::seq::SliceRandom;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{DpcnModel, Subnet};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceTag {
    Subnet1,
    Subnet2,
    Subnet3,
    Baseline,
}

impl SourceTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::Subnet1 => "subnet1",
            SourceTag::Subnet2 => "subnet2",
            SourceTag::Subnet3 => "subnet3",
            SourceTag::Baseline => "baseline",
        }
    }

    pub fn for_subnet(i: usize) -> SourceTag {
        match i {
            0 => SourceTag::Subnet1,
            1 => SourceTag::Subnet2,
            _ => SourceTag::Subnet3,
        }
    }
}

/// Class-discriminative relevance map at target-layer resolution, with a
/// bilinear upsampling to input resolution.
#[derive(Debug, Clone)]
pub struct Heatmap {
    /// Normalized to [0,1] by the max when `raw_max > 0`.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub upsampled: Vec<f64>,
    pub up_height: usize,
    pub up_width: usize,
    pub class_index: usize,
    pub source_tag: SourceTag,
    /// Peak of the unnormalized map; 0 marks an all-zero (flagged) map.
    pub raw_max: f64,
}

impl Heatmap {
    pub fn is_all_zero(&self) -> bool {
        self.raw_max == 0.0
    }

    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0usize, 0usize);
        let mut bv = f64::NEG_INFINITY;
        for i in 0..self.height {
            for j in 0..self.width {
                let v = self.values[i * self.width + j];
                if v > bv {
                    bv = v;
                    best = (i, j);
                }
            }
        }
        best
    }
}

/// Gradient-weighted class activation map of one network path
/// (extractor stages + classifier) for a single input.
///
/// alpha_k = spatial mean of d(logit[class]) / d(activation map k);
/// map = ReLU(sum_k alpha_k A_k), normalized by its max when positive.
pub fn grad_cam(
    subnet: &Subnet,
    store: &ParamStore,
    image: &Tensor,
    class_idx: usize,
    target_stage: usize,
    tag: SourceTag,
) -> Result<Heatmap> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("grad_cam wants a single (C,H,W) image, got {shape:?}")));
    }
    if target_stage >= subnet.stages.len() {
        return Err(Error::Config(format!(
            "target stage {target_stage} out of range ({} stages)",
            subnet.stages.len()
        )));
    }
    let (in_h, in_w) = (shape[1], shape[2]);
    let mut batch_shape = vec![1];
    batch_shape.extend_from_slice(shape);
    let x_t = image.reshape(&batch_shape)?;

    // gradients accumulate into a scratch copy so callers keep theirs
    let mut scratch = store.clone();
    scratch.zero_grad();
    let mut rng = substream(0, "cam-unused");
    let mut tape = Tape::new();
    let x = tape.leaf(x_t);
    let stages = subnet.forward_extractor_ro(&mut tape, &scratch, x, Mode::Eval, &mut rng)?;
    let target = stages[target_stage];
    let feats = *stages.last().expect("stages");
    let logits = subnet.classifier.forward_eval(&mut tape, &scratch, feats)?;
    let k = tape.value(logits).shape()[1];
    if class_idx >= k {
        return Err(Error::Config(format!("class index {class_idx} out of range [0,{k})")));
    }
    let picked = tape.slice_channel(logits, class_idx, 1)?;
    let root = tape.sum(picked);
    let grads = tape.backward_watched(root, &mut scratch, &[target])?;
    let grad_a = &grads[0];

    let a = tape.value(target);
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let plane = h * w;
    let mut cam = vec![0.0f64; plane];
    for ch in 0..c {
        let alpha: f64 =
            grad_a.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for (slot, v) in cam.iter_mut().zip(&a.data()[ch * plane..(ch + 1) * plane]) {
            *slot += alpha * v;
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let raw_max = cam.iter().cloned().fold(0.0f64, f64::max);
    if raw_max > 0.0 {
        for v in &mut cam {
            *v /= raw_max;
        }
    }
    let upsampled = bilinear_upsample(&cam, h, w, in_h, in_w);
    Ok(Heatmap {
        values: cam,
        height: h,
        width: w,
        upsampled,
        up_height: in_h,
        up_width: in_w,
        class_index: class_idx,
        source_tag: tag,
        raw_max,
    })
}

/// Align-corners bilinear interpolation onto an (oh, ow) grid.
fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    let fy = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let fx = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for i in 0..oh {
        let y = i as f64 * fy;
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = y - y0 as f64;
        for j in 0..ow {
            let x = j as f64 * fx;
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = x - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - dx) + src[y0 * w + x1] * dx;
            let bot = src[y1 * w + x0] * (1.0 - dx) + src[y1 * w + x1] * dx;
            out[i * ow + j] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Soft Jaccard overlap of two equally sized maps: sum min / sum max.
/// Both all-zero is defined as full overlap; the flag reports that case.
pub fn heatmap_overlap(h1: &Heatmap, h2: &Heatmap) -> Result<(f64, bool)> {
    if h1.height != h2.height || h1.width != h2.width {
        return Err(Error::Shape(format!(
            "heatmap_overlap: {}x{} vs {}x{}",
            h1.height, h1.width, h2.height, h2.width
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in h1.values.iter().zip(&h2.values) {
        num += a.min(*b);
        den += a.max(*b);
    }
    if den == 0.0 {
        return Ok((1.0, true));
    }
    Ok((num / den, false))
}

pub const JSD_BINS: usize = 64;
const JSD_SMOOTHING: f64 = 1e-9;

/// Jensen-Shannon divergence (nats) between 64-bin histograms of two score
/// populations over their combined range. Bounded by ln 2.
pub fn score_jsd(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0; // all scores identical: indistinguishable populations
    }
    let hist = |xs: &[f64]| -> Vec<f64> {
        let mut h = vec![JSD_SMOOTHING; JSD_BINS];
        for &x in xs {
            let t = ((x - lo) / (hi - lo) * JSD_BINS as f64) as usize;
            h[t.min(JSD_BINS - 1)] += 1.0;
        }
        let total: f64 = h.iter().sum();
        h.iter().map(|v| v / total).collect()
    };
    let p = hist(a);
    let q = hist(b);
    let mut jsd = 0.0;
    for (pi, qi) in p.iter().zip(&q) {
        let m = 0.5 * (pi + qi);
        jsd += 0.5 * pi * (pi / m).ln() + 0.5 * qi * (qi / m).ln();
    }
    jsd
}

#[derive(Debug, Clone)]
pub struct DivergenceReport {
    /// Fraction of samples with D(E1(x)) > D(E2(x)); ties count half.
    pub separation_accuracy: f64,
    pub score_histogram_jsd: f64,
    pub mean_score_subnet1: f64,
    pub mean_score_subnet2: f64,
    /// Cosine similarity between the two subnets' feature maps, per channel.
    pub per_channel_cosine: Vec<f64>,
}

/// Discriminator-based divergence diagnostics over a data sample.
///
/// Scores are taken in the training regime (batch statistics over shuffled
/// class-mixed batches), the score space in which the discriminator was
/// asked to tell the populations apart.
pub fn divergence_report(model: &DpcnModel, ds: &Dataset) -> Result<DivergenceReport> {
    if ds.len() < 16 {
        return Err(Error::Data(format!(
            "divergence report needs at least 16 inputs, got {}",
            ds.len()
        )));
    }
    let mut rng = substream(0, "div-unused");
    let mut s1 = Vec::with_capacity(ds.len());
    let mut s2 = Vec::with_capacity(ds.len());
    let mut dot: Vec<f64> = Vec::new();
    let mut n1: Vec<f64> = Vec::new();
    let mut n2: Vec<f64> = Vec::new();

    // datasets are stored class-ordered; mix the batches like training does
    let mut idxs: Vec<usize> = (0..ds.len()).collect();
    idxs.shuffle(&mut substream(0, "div-shuffle"));
    for chunk in idxs.chunks(32) {
        let (x_t, _) = ds.batch(chunk, Augment::None, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut feats = Vec::new();
        for (i, subnet) in model.subnets.iter().take(2).enumerate() {
            let stages =
                subnet.forward_extractor_ro(&mut tape, &model.store, x, Mode::Frozen, &mut rng)?;
            let scores = model
                .discriminator
                .score_ro(&mut tape, &model.store, &stages, Mode::Frozen, &mut rng)?;
            let sv = tape.value(scores).data().to_vec();
            if i == 0 {
                s1.extend(sv);
            } else {
                s2.extend(sv);
            }
            feats.push(tape.value(*stages.last().expect("stages")).clone());
        }
        let (f1, f2) = (&feats[0], &feats[1]);
        let c = f1.shape()[1];
        let plane: usize = f1.shape()[2..].iter().product();
        if dot.is_empty() {
            dot = vec![0.0; c];
            n1 = vec![0.0; c];
            n2 = vec![0.0; c];
        }
        for n in 0..f1.shape()[0] {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for p in 0..plane {
                    let a = f1.data()[base + p];
                    let b = f2.data()[base + p];
                    dot[ch] += a * b;
                    n1[ch] += a * a;
                    n2[ch] += b * b;
                }
            }
        }
    }

    let mut hits = 0.0;
    for (a, b) in s1.iter().zip(&s2) {
        hits += match a.partial_cmp(b) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        };
    }
    let per_channel_cosine = dot
        .iter()
        .zip(n1.iter().zip(&n2))
        .map(|(&d, (&a, &b))| {
            let denom = (a.sqrt()) * (b.sqrt());
            if denom > 0.0 {
                d / denom
            } else {
                0.0
            }
        })
        .collect();
    let n = s1.len() as f64;
    Ok(DivergenceReport {
        separation_accuracy: hits / n,
        score_histogram_jsd: score_jsd(&s1, &s2),
        mean_score_subnet1: s1.iter().sum::<f64>() / n,
        mean_score_subnet2: s2.iter().sum::<f64>() / n,
        per_channel_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_shapes;
    use crate::layers::{InitScheme, LayerSpec, Sequential};
    use crate::model::{build_preset, ExtractorStage, ModelConfig, PresetName, Segment};
    use rand::Rng;

    /// 1x1 identity conv + gap + linear head: the analytic CAM case.
    fn analytic_net(head_w: &[f64], classes: usize) -> (Subnet, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = substream(0, "an");
        let conv = Sequential::build(
            "net.stage0.seg0",
            vec![LayerSpec::conv(2, 2, 1, 1, 0)],
            &[2, 2, 2],
            &mut store,
            InitScheme::Normal(0.0),
            &mut rng,
        )
        .unwrap();
        let w = store.by_name("net.stage0.seg0.layer0.weight").unwrap();
        store.get_mut(w).value.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let classifier = Sequential::build(
            "net.classifier",
            vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(2, classes)],
            &[2, 2, 2],
            &mut store,
            InitScheme::Normal(0.0),
            &mut rng,
        )
        .unwrap();
        let hw = store.by_name("net.classifier.layer1.weight").unwrap();
        store.get_mut(hw).value.data_mut().copy_from_slice(head_w);
        let subnet = Subnet {
            stages: vec![ExtractorStage { name: "stage0".into(), segments: vec![Segment::Plain(conv)] }],
            classifier,
        };
        (subnet, store)
    }

    #[test]
    fn analytic_cam_matches_hand_computation() {
        // head weight layout (in=2, out=2); class 0 weights w = [0.5, -1.0]
        let (subnet, store) = analytic_net(&[0.5, 0.0, -1.0, 0.0], 2);
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 2.0, 0.0]).unwrap();
        let cam = grad_cam(&subnet, &store, &x, 0, 0, SourceTag::Baseline).unwrap();
        // unnormalized = ReLU(0.5*A0 - 1.0*A1)/4 = [0.125, 0.5, 0, 0.5]
        assert!((cam.raw_max - 0.5).abs() < 1e-9);
        let expect = [0.25, 1.0, 0.0, 1.0];
        for (v, e) in cam.values.iter().zip(&expect) {
            assert!((v - e).abs() < 1e-9, "{:?}", cam.values);
        }
        assert!(!cam.is_all_zero());
    }

    #[test]
    fn zero_weight_head_row_gives_flagged_zero_map() {
        let (subnet, store) = analytic_net(&[0.5, 0.0, -1.0, 0.0], 2);
        let x = Tensor::new(vec![2, 2, 2], vec![1.0; 8]).unwrap();
        // class 1 column is all zeros
        let cam = grad_cam(&subnet, &store, &x, 1, 0, SourceTag::Baseline).unwrap();
        assert!(cam.is_all_zero());
        assert!(cam.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_values_stay_in_unit_interval() {
        let mut cfg = ModelConfig::new(PresetName::SmallCnnToy, 4);
        cfg.seed = 5;
        let model = build_preset(&cfg).unwrap();
        let (train, _) = synth_shapes(4, 40, 16, 0.05, 3).unwrap();
        let img = Tensor::new(vec![3, 16, 16], train.images[0].clone()).unwrap();
        let cam = grad_cam(&model.subnets[0], &model.store, &img, 0, 1, SourceTag::Subnet1).unwrap();
        assert!(cam.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(cam.upsampled.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        assert_eq!((cam.up_height, cam.up_width), (16, 16));
    }

    #[test]
    fn positive_scaling_leaves_normalized_map_and_argmax_unchanged() {
        let (subnet, store) = analytic_net(&[0.5, 0.0, -1.0, 0.0], 2);
        let data = vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 2.0, 0.0];
        let x = Tensor::new(vec![2, 2, 2], data.clone()).unwrap();
        let scaled = Tensor::new(vec![2, 2, 2], data.iter().map(|v| v * 3.5).collect()).unwrap();
        let a = grad_cam(&subnet, &store, &x, 0, 0, SourceTag::Baseline).unwrap();
        let b = grad_cam(&subnet, &store, &scaled, 0, 0, SourceTag::Baseline).unwrap();
        // unnormalized map scales by c, normalized map is invariant
        assert!((b.raw_max - 3.5 * a.raw_max).abs() < 1e-9);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn upsampling_preserves_max_within_one_cell() {
        let (subnet, store) = analytic_net(&[0.5, 0.0, -1.0, 0.0], 2);
        let x = Tensor::new(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 2.0, 0.0]).unwrap();
        let cam = grad_cam(&subnet, &store, &x, 0, 0, SourceTag::Baseline).unwrap();
        // argmax of the upsampled grid maps back into the max cell
        let (mi, mj) = cam.argmax();
        let mut best = (0usize, 0usize);
        let mut bv = f64::NEG_INFINITY;
        for i in 0..cam.up_height {
            for j in 0..cam.up_width {
                let v = cam.upsampled[i * cam.up_width + j];
                if v > bv {
                    bv = v;
                    best = (i, j);
                }
            }
        }
        let cell_h = cam.up_height as f64 / cam.height as f64;
        let cell_w = cam.up_width as f64 / cam.width as f64;
        assert!((best.0 as f64 / cell_h - mi as f64).abs() <= 1.0);
        assert!((best.1 as f64 / cell_w - mj as f64).abs() <= 1.0);
    }

    fn hm(vals: &[f64], h: usize, w: usize) -> Heatmap {
        Heatmap {
            values: vals.to_vec(),
            height: h,
            width: w,
            upsampled: vals.to_vec(),
            up_height: h,
            up_width: w,
            class_index: 0,
            source_tag: SourceTag::Baseline,
            raw_max: vals.iter().cloned().fold(0.0, f64::max),
        }
    }

    #[test]
    fn overlap_identical_disjoint_and_symmetry() {
        let a = hm(&[1.0, 0.5, 0.0, 0.25], 2, 2);
        let b = hm(&[0.0, 0.0, 1.0, 0.0], 2, 2);
        assert_eq!(heatmap_overlap(&a, &a).unwrap(), (1.0, false));
        let (ab, _) = heatmap_overlap(&a, &b).unwrap();
        let (ba, _) = heatmap_overlap(&b, &a).unwrap();
        assert_eq!(ab, ba);
        let disjoint = hm(&[0.0, 1.0, 0.0, 0.0], 2, 2);
        assert_eq!(heatmap_overlap(&b, &disjoint).unwrap().0, 0.0);
        // both all-zero: defined as 1.0 with the flag set
        let z = hm(&[0.0; 4], 2, 2);
        assert_eq!(heatmap_overlap(&z, &z).unwrap(), (1.0, true));
        // mismatched grids rejected
        assert!(heatmap_overlap(&a, &hm(&[0.0; 6], 2, 3)).is_err());
    }

    #[test]
    fn proportional_maps_have_full_overlap() {
        // normalization makes proportional raw maps identical
        let (subnet, store) = analytic_net(&[0.5, 0.0, -1.0, 0.0], 2);
        let data = vec![1.0, 2.0, 3.0, 4.0, 0.0, -1.0, 2.0, 0.0];
        let x = Tensor::new(vec![2, 2, 2], data.clone()).unwrap();
        let scaled = Tensor::new(vec![2, 2, 2], data.iter().map(|v| v * 2.0).collect()).unwrap();
        let a = grad_cam(&subnet, &store, &x, 0, 0, SourceTag::Baseline).unwrap();
        let b = grad_cam(&subnet, &store, &scaled, 0, 0, SourceTag::Baseline).unwrap();
        let (o, _) = heatmap_overlap(&a, &b).unwrap();
        assert!((o - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jsd_estimator_properties() {
        // disjoint point masses reach ln 2
        let ones = vec![1.0; 100];
        let zeros = vec![0.0; 100];
        let j = score_jsd(&ones, &zeros);
        assert!((j - 2.0f64.ln()).abs() < 1e-6, "jsd {j}");
        // identical populations give exactly zero
        assert_eq!(score_jsd(&ones, &ones), 0.0);
        // symmetric and bounded on random data
        let mut rng = substream(7, "jsd");
        let a: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..200).map(|_| rng.gen_range(-0.5..1.5)).collect();
        let ab = score_jsd(&a, &b);
        let ba = score_jsd(&b, &a);
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0 && ab <= 2.0f64.ln() + 1e-12);
    }

    #[test]
    fn identical_extractors_are_indistinguishable() {
        let mut cfg = ModelConfig::new(PresetName::SmallCnnToy, 4);
        cfg.seed = 13;
        let mut model = build_preset(&cfg).unwrap();
        for (&a, &b) in model.subnets[0].param_ids().iter().zip(&model.subnets[1].param_ids()) {
            let v = model.store.get(a).value.clone();
            model.store.get_mut(b).value = v;
        }
        let (train, _) = synth_shapes(4, 64, 16, 0.05, 2).unwrap();
        let report = divergence_report(&model, &train).unwrap();
        assert_eq!(report.separation_accuracy, 0.5);
        assert!(report.score_histogram_jsd < 0.01);
        assert_eq!(report.mean_score_subnet1, report.mean_score_subnet2);
        // identical features: cosine 1 on every channel with signal
        assert!(report.per_channel_cosine.iter().all(|&c| (c - 1.0).abs() < 1e-9 || c == 0.0));
    }

    #[test]
    fn small_samples_rejected() {
        let cfg = ModelConfig::new(PresetName::SmallCnnToy, 4);
        let model = build_preset(&cfg).unwrap();
        let (train, _) = synth_shapes(4, 12, 16, 0.0, 2).unwrap();
        assert!(train.len() < 16);
        assert!(divergence_report(&model, &train).is_err());
    }
}
