//! Dataset ingestion: the CIFAR-100 binary format and a deterministic
//! synthetic-shapes generator that stands in for it at desk scale.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_BYTES: usize = 3074; // coarse + fine label, 3 x 1024 pixel planes
pub const CIFAR_TRAIN_RECORDS: usize = 50_000;
pub const CIFAR_TEST_RECORDS: usize = 10_000;
pub const CIFAR_CLASSES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn expected_records(&self) -> usize {
        match self {
            Split::Train => CIFAR_TRAIN_RECORDS,
            Split::Test => CIFAR_TEST_RECORDS,
        }
    }

    pub fn expected_len(&self) -> usize {
        self.expected_records() * CIFAR_RECORD_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Preprocess {
    /// Per-channel (x - mean) / std with statistics from the training split.
    Normalize,
    /// Shift to [0,1] then subtract the per-channel training mean.
    ZeroCenter,
    /// Pixels in [0,1] as decoded.
    UnitRange,
}

impl Preprocess {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalize" => Ok(Preprocess::Normalize),
            "zero-center" => Ok(Preprocess::ZeroCenter),
            "unit-range" => Ok(Preprocess::UnitRange),
            _ => Err(Error::Config(format!(
                "unknown preprocessing '{s}' (normalize|zero-center|unit-range)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    None,
    /// Zero-pad by `pad` pixels, then crop back to the original size at a
    /// random offset.
    RandomCrop { pad: usize },
}

impl Augment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augment::None),
            "random-crop" => Ok(Augment::RandomCrop { pad: 4 }),
            _ => Err(Error::Config(format!("unknown augmentation '{s}' (none|random-crop)"))),
        }
    }
}

/// In-memory image classification dataset; images are (3,H,W) row-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub hw: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.hw, self.hw]
    }

    /// Assemble a batch tensor (B,3,H,W) and its labels, applying
    /// augmentation per sample from `rng`.
    pub fn batch(&self, idxs: &[usize], augment: Augment, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        let hw = self.hw;
        let img_len = 3 * hw * hw;
        let mut data = Vec::with_capacity(idxs.len() * img_len);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            match augment {
                Augment::None => data.extend_from_slice(&self.images[i]),
                Augment::RandomCrop { pad } => {
                    let dy = rng.gen_range(0..=2 * pad);
                    let dx = rng.gen_range(0..=2 * pad);
                    crop_padded(&self.images[i], hw, pad, dy, dx, &mut data);
                }
            }
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(vec![idxs.len(), 3, hw, hw], data).expect("batch shape");
        (t, labels)
    }

    /// Per-channel mean and standard deviation over all images.
    pub fn channel_stats(&self) -> ([f64; 3], [f64; 3]) {
        let plane = self.hw * self.hw;
        let count = (self.images.len() * plane) as f64;
        let mut mean = [0.0; 3];
        for img in &self.images {
            for c in 0..3 {
                mean[c] += img[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = [0.0; 3];
        for img in &self.images {
            for c in 0..3 {
                var[c] += img[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let std = [
            (var[0] / count).sqrt(),
            (var[1] / count).sqrt(),
            (var[2] / count).sqrt(),
        ];
        (mean, std)
    }
}

fn crop_padded(img: &[f64], hw: usize, pad: usize, dy: usize, dx: usize, out: &mut Vec<f64>) {
    // reading the (dy,dx)-offset hw x hw window of the zero-padded image
    let padded = hw + 2 * pad;
    for c in 0..3 {
        for i in 0..hw {
            let src_i = (i + dy) as isize - pad as isize;
            for j in 0..hw {
                let src_j = (j + dx) as isize - pad as isize;
                let v = if src_i < 0 || src_i >= hw as isize || src_j < 0 || src_j >= hw as isize {
                    0.0
                } else {
                    img[c * hw * hw + src_i as usize * hw + src_j as usize]
                };
                out.push(v);
            }
        }
    }
    debug_assert!(padded >= hw);
}

/// Apply preprocessing with statistics taken from the training split.
pub fn preprocess_pair(train: &mut Dataset, test: &mut Dataset, mode: Preprocess) {
    match mode {
        Preprocess::UnitRange => {}
        Preprocess::ZeroCenter => {
            let (mean, _) = train.channel_stats();
            for ds in [train, test] {
                shift_channels(ds, &mean, &[1.0, 1.0, 1.0]);
            }
        }
        Preprocess::Normalize => {
            let (mean, std) = train.channel_stats();
            let inv = [1.0 / std[0].max(1e-12), 1.0 / std[1].max(1e-12), 1.0 / std[2].max(1e-12)];
            for ds in [train, test] {
                shift_channels(ds, &mean, &inv);
            }
        }
    }
}

fn shift_channels(ds: &mut Dataset, mean: &[f64; 3], scale: &[f64; 3]) {
    let plane = ds.hw * ds.hw;
    for img in &mut ds.images {
        for c in 0..3 {
            for v in &mut img[c * plane..(c + 1) * plane] {
                *v = (*v - mean[c]) * scale[c];
            }
        }
    }
}

// ---- synthetic shapes ----

const SHAPE_VOCABULARY: usize = 8;

/// Deterministic shape dataset: `n` images over `K` classes, stratified
/// 80/20 into train/test, with positional jitter and Gaussian pixel noise.
pub fn synth_shapes(
    classes: usize,
    n: usize,
    size: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(2..=SHAPE_VOCABULARY).contains(&classes) {
        return Err(Error::Config(format!(
            "synthetic shapes supports 2..={SHAPE_VOCABULARY} classes, got {classes}"
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("image size must be >= 8, got {size}")));
    }
    let mut rng = substream(seed, "synth");
    let noise = if sigma > 0.0 { Some(Normal::new(0.0, sigma).unwrap()) } else { None };

    let mut train = Dataset { images: Vec::new(), labels: Vec::new(), classes, hw: size };
    let mut test = Dataset { images: Vec::new(), labels: Vec::new(), classes, hw: size };

    for k in 0..classes {
        let count = n / classes + usize::from(k < n % classes);
        let train_count = count * 4 / 5;
        for i in 0..count {
            let img = draw_shape(k, size, &mut rng, &noise);
            let (ds, label) = if i < train_count { (&mut train, k) } else { (&mut test, k) };
            ds.images.push(img);
            ds.labels.push(label);
        }
    }
    Ok((train, test))
}

fn draw_shape(class: usize, size: usize, rng: &mut ChaCha8Rng, noise: &Option<Normal<f64>>) -> Vec<f64> {
    let s = size as f64;
    let jitter = s / 8.0;
    let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let r = rng.gen_range(0.25 * s..0.38 * s);
    let fg: [f64; 3] = [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.55..0.95),
    ];
    let bg = 0.08;

    let plane = size * size;
    let mut img = vec![bg; 3 * plane];
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let inside = match class {
                0 => dy.abs() <= r && dx.abs() <= r,
                1 => dy * dy + dx * dx <= r * r,
                2 => (dy.abs() <= r / 3.0 && dx.abs() <= r) || (dx.abs() <= r / 3.0 && dy.abs() <= r),
                3 => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
                4 => {
                    let d2 = dy * dy + dx * dx;
                    d2 <= r * r && d2 >= (r / 2.0) * (r / 2.0)
                }
                5 => (dy.abs() - dx.abs()).abs() <= r / 3.0 && dy.abs().max(dx.abs()) <= r,
                6 => dy.abs() <= r && dx.abs() <= r && ((dy + r) as usize) % 4 < 2,
                7 => dy.abs() + dx.abs() <= r,
                _ => unreachable!("class bounded by vocabulary"),
            };
            if inside {
                for c in 0..3 {
                    img[c * plane + i * size + j] = fg[c];
                }
            }
        }
    }
    if let Some(dist) = noise {
        for v in &mut img {
            *v = (*v + dist.sample(rng)).clamp(0.0, 1.0);
        }
    }
    img
}

// ---- CIFAR-100 binary ----

/// Record-count validation: the file must hold exactly the split's records.
pub fn validate_cifar_len(len: usize, split: Split) -> Result<usize> {
    let expected = split.expected_len();
    if len != expected {
        return Err(Error::Data(format!(
            "cifar file is {len} bytes; {split:?} split wants exactly {expected} \
             ({} records of {CIFAR_RECORD_BYTES} bytes)",
            split.expected_records()
        )));
    }
    Ok(split.expected_records())
}

/// Decode one 3074-byte record into (fine label, [0,1] pixels, channel-major).
pub fn decode_cifar_record(record: &[u8]) -> Result<(usize, Vec<f64>)> {
    debug_assert_eq!(record.len(), CIFAR_RECORD_BYTES);
    let fine = record[1] as usize;
    if fine >= CIFAR_CLASSES {
        return Err(Error::Data(format!("fine label byte {fine} out of range [0,100)")));
    }
    let pixels = record[2..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((fine, pixels))
}

/// Load one split of CIFAR-100 from its binary file, optionally keeping a
/// class subset with labels densely remapped to [0, subset len).
pub fn load_cifar100(path: &Path, split: Split, subset: Option<&[usize]>) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let records = validate_cifar_len(bytes.len(), split)?;

    let remap: Option<Vec<Option<usize>>> = subset.map(|sub| {
        let mut m = vec![None; CIFAR_CLASSES];
        for (new, &orig) in sub.iter().enumerate() {
            if orig < CIFAR_CLASSES {
                m[orig] = Some(new);
            }
        }
        m
    });
    if let Some(sub) = subset {
        if let Some(&bad) = sub.iter().find(|&&c| c >= CIFAR_CLASSES) {
            return Err(Error::Config(format!("class subset entry {bad} out of range [0,100)")));
        }
    }
    let classes = subset.map(|s| s.len()).unwrap_or(CIFAR_CLASSES);

    let mut ds = Dataset { images: Vec::new(), labels: Vec::new(), classes, hw: 32 };
    for rec in 0..records {
        let rec_bytes = &bytes[rec * CIFAR_RECORD_BYTES..(rec + 1) * CIFAR_RECORD_BYTES];
        let (fine, pixels) = decode_cifar_record(rec_bytes)?;
        let label = match &remap {
            Some(m) => match m[fine] {
                Some(l) => l,
                None => continue,
            },
            None => fine,
        };
        ds.images.push(pixels);
        ds.labels.push(label);
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_length_arithmetic() {
        assert_eq!(Split::Train.expected_len(), 153_700_000);
        assert_eq!(validate_cifar_len(153_700_000, Split::Train).unwrap(), 50_000);
        assert_eq!(validate_cifar_len(30_740_000, Split::Test).unwrap(), 10_000);
        assert!(validate_cifar_len(153_700_000 - 1, Split::Train).is_err());
        assert!(validate_cifar_len(3074, Split::Test).is_err());
    }

    #[test]
    fn cifar_record_decoding() {
        let mut record = vec![0u8; CIFAR_RECORD_BYTES];
        record[0] = 5; // coarse label, ignored
        record[1] = 42;
        record[2] = 255; // first red pixel
        let (label, pixels) = decode_cifar_record(&record).unwrap();
        assert_eq!(label, 42);
        assert_eq!(pixels[0], 1.0);
        assert_eq!(pixels[1], 0.0);
        assert_eq!(pixels.len(), 3072);

        record[1] = 100;
        assert!(decode_cifar_record(&record).is_err());
    }

    #[test]
    fn synth_is_deterministic_given_seed() {
        let (a_train, a_test) = synth_shapes(2, 40, 12, 0.0, 9).unwrap();
        let (b_train, b_test) = synth_shapes(2, 40, 12, 0.0, 9).unwrap();
        assert_eq!(a_train.images, b_train.images);
        assert_eq!(a_test.labels, b_test.labels);
        let (c_train, _) = synth_shapes(2, 40, 12, 0.0, 10).unwrap();
        assert_ne!(a_train.images, c_train.images);
    }

    #[test]
    fn synth_split_is_stratified() {
        let (train, test) = synth_shapes(4, 2500, 16, 0.05, 0).unwrap();
        assert_eq!(train.len(), 2000);
        assert_eq!(test.len(), 500);
        for k in 0..4 {
            let tr = train.labels.iter().filter(|&&l| l == k).count();
            let te = test.labels.iter().filter(|&&l| l == k).count();
            assert!((tr as i64 - 500).abs() <= 1, "class {k}: {tr} train");
            assert!((te as i64 - 125).abs() <= 1, "class {k}: {te} test");
        }
    }

    #[test]
    fn synth_rejects_out_of_vocabulary_class_count() {
        assert!(synth_shapes(9, 90, 16, 0.0, 0).is_err());
        assert!(synth_shapes(1, 10, 16, 0.0, 0).is_err());
    }

    #[test]
    fn normalize_gives_zero_mean_unit_std() {
        let (mut train, mut test) = synth_shapes(3, 300, 12, 0.1, 4).unwrap();
        preprocess_pair(&mut train, &mut test, Preprocess::Normalize);
        let (mean, std) = train.channel_stats();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-9, "mean {:?}", mean);
            assert!((std[c] - 1.0).abs() < 1e-9, "std {:?}", std);
        }
    }

    #[test]
    fn batch_assembles_shape_and_labels() {
        let (train, _) = synth_shapes(2, 20, 12, 0.0, 1).unwrap();
        let mut rng = substream(0, "aug");
        let (t, labels) = train.batch(&[0, 5, 9], Augment::None, &mut rng);
        assert_eq!(t.shape(), &[3, 3, 12, 12]);
        assert_eq!(labels.len(), 3);
    }

    #[test]
    fn random_crop_preserves_shape_and_is_seeded() {
        let (train, _) = synth_shapes(2, 20, 12, 0.0, 1).unwrap();
        let run = |seed: u64| {
            let mut rng = substream(seed, "aug");
            train.batch(&[0, 1], Augment::RandomCrop { pad: 2 }, &mut rng).0
        };
        let a = run(3);
        assert_eq!(a.shape(), &[2, 3, 12, 12]);
        assert_eq!(a.data(), run(3).data());
    }
}
