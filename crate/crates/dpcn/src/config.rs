//! Run configuration: flat `key = value` text with `#` comments, every key
//! defaulted, unknown keys rejected. CLI flags (`--key value`) override
//! file values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{Augment, Preprocess};
use crate::error::{Error, Result};
use crate::layers::InitScheme;
use crate::model::{Fusion, ModelConfig, PresetName};
use crate::train::{BaselineKind, TrainingSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar100Binary,
    SyntheticShapes,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar100-binary" => Ok(DatasetKind::Cifar100Binary),
            "synthetic-shapes" => Ok(DatasetKind::SyntheticShapes),
            _ => Err(Error::Config(format!(
                "unknown dataset '{s}' (cifar100-binary|synthetic-shapes)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub preset: PresetName,
    pub dataset: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub class_subset: Option<Vec<usize>>,
    pub preprocess: Preprocess,
    pub augment: Augment,
    pub subnets: usize,
    pub fusion: Fusion,
    pub feed: Vec<usize>,
    pub width: usize,
    pub init: InitScheme,
    pub schedule: TrainingSchedule,
    pub baselines: Vec<BaselineKind>,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.preset, self.classes);
        cfg.subnet_count = self.subnets;
        cfg.fusion = self.fusion;
        cfg.feed_stages = self.feed.clone();
        cfg.width = self.width;
        cfg.init = self.init;
        cfg.seed = self.schedule.seed;
        if self.dataset == DatasetKind::SyntheticShapes {
            cfg.input_hw = self.image_size;
        }
        cfg
    }

    /// Dataset directory: config value, then the DPCN_DATA_DIR fallback.
    pub fn resolve_data_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.data_dir {
            return Ok(d.clone());
        }
        if let Ok(d) = std::env::var("DPCN_DATA_DIR") {
            return Ok(PathBuf::from(d));
        }
        Err(Error::Config("no data_dir configured and DPCN_DATA_DIR unset".into()))
    }
}

const KNOWN_KEYS: &[&str] = &[
    "preset",
    "dataset",
    "data_dir",
    "classes",
    "images_per_class",
    "image_size",
    "noise_sigma",
    "class_subset",
    "preprocess",
    "augment",
    "subnets",
    "fusion",
    "feed",
    "width",
    "init",
    "step1_epochs",
    "step2_epochs",
    "step3_epochs",
    "total_epochs",
    "lambda",
    "momentum",
    "weight_decay",
    "lr",
    "batch_size",
    "seed",
    "baselines",
    "out_dir",
];

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_usize(k: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| Error::Config(format!("{k}: bad integer '{v}'")))
}

fn parse_f64(k: &str, v: &str) -> Result<f64> {
    v.parse().map_err(|_| Error::Config(format!("{k}: bad float '{v}'")))
}

/// `0:0.05,24:0.01` -> [(0, 0.05), (24, 0.01)]
fn parse_lr_policy(v: &str) -> Result<Vec<(usize, f64)>> {
    let mut policy = Vec::new();
    for part in v.split(',') {
        let (e, lr) = part
            .trim()
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("lr: expected epoch:value in '{part}'")))?;
        policy.push((parse_usize("lr", e.trim())?, parse_f64("lr", lr.trim())?));
    }
    Ok(policy)
}

/// `last` -> default (deepest stage); `1` or `0+2` -> explicit stage indices.
fn parse_feed(v: &str) -> Result<Vec<usize>> {
    if v == "last" {
        return Ok(Vec::new());
    }
    v.split('+').map(|p| parse_usize("feed", p.trim())).collect()
}

fn parse_list(k: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(k, p.trim())).collect()
}

/// Build a `RunConfig` from file text plus `--key value` overrides.
pub fn load_config(file_text: Option<&str>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut map = match file_text {
        Some(t) => parse_kv(t)?,
        None => BTreeMap::new(),
    };
    for (k, v) in overrides {
        map.insert(k.clone(), v.clone());
    }
    for key in map.keys() {
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }

    let preset = PresetName::parse(
        map.get("preset").ok_or_else(|| Error::Config("missing required key 'preset'".into()))?,
    )?;
    let dataset = DatasetKind::parse(
        map.get("dataset").ok_or_else(|| Error::Config("missing required key 'dataset'".into()))?,
    )?;

    let class_subset = match map.get("class_subset") {
        Some(v) if !v.is_empty() => Some(parse_list("class_subset", v)?),
        _ => None,
    };
    let classes = match map.get("classes") {
        Some(v) => parse_usize("classes", v)?,
        None => match (dataset, &class_subset) {
            (_, Some(sub)) => sub.len(),
            (DatasetKind::Cifar100Binary, None) => 100,
            (DatasetKind::SyntheticShapes, None) => 4,
        },
    };

    // schedule: explicit step budgets override the total split
    let total = map.get("total_epochs").map(|v| parse_usize("total_epochs", v)).transpose()?;
    let mut schedule = TrainingSchedule::for_total_epochs(total.unwrap_or(30));
    if let Some(v) = map.get("step1_epochs") {
        schedule.step1_epochs = parse_usize("step1_epochs", v)?;
    }
    if let Some(v) = map.get("step2_epochs") {
        schedule.step2_epochs = parse_usize("step2_epochs", v)?;
    }
    if let Some(v) = map.get("step3_epochs") {
        schedule.step3_epochs = parse_usize("step3_epochs", v)?;
    }
    if let Some(v) = map.get("lambda") {
        schedule.lambda = parse_f64("lambda", v)?;
    }
    if let Some(v) = map.get("momentum") {
        schedule.momentum = parse_f64("momentum", v)?;
    }
    if let Some(v) = map.get("weight_decay") {
        schedule.weight_decay = parse_f64("weight_decay", v)?;
    }
    if let Some(v) = map.get("lr") {
        schedule.lr_policy = parse_lr_policy(v)?;
    } else if total.is_none()
        && (map.contains_key("step1_epochs")
            || map.contains_key("step2_epochs")
            || map.contains_key("step3_epochs"))
    {
        // keep the default drop point consistent with the actual budget
        let t = schedule.total_epochs().max(1);
        schedule.lr_policy = vec![(0, 0.05), (t * 4 / 5, 0.01)];
    }
    if let Some(v) = map.get("batch_size") {
        schedule.batch_size = parse_usize("batch_size", v)?;
    }
    if let Some(v) = map.get("seed") {
        schedule.seed =
            v.parse().map_err(|_| Error::Config(format!("seed: bad integer '{v}'")))?;
    }
    schedule.validate()?;

    let baselines = match map.get("baselines").map(String::as_str) {
        None | Some("none") | Some("") => Vec::new(),
        Some(v) => v.split(',').map(|p| BaselineKind::parse(p.trim())).collect::<Result<_>>()?,
    };

    let cfg = RunConfig {
        preset,
        dataset,
        data_dir: map.get("data_dir").map(PathBuf::from),
        classes,
        images_per_class: map
            .get("images_per_class")
            .map(|v| parse_usize("images_per_class", v))
            .transpose()?
            .unwrap_or(625),
        image_size: map
            .get("image_size")
            .map(|v| parse_usize("image_size", v))
            .transpose()?
            .unwrap_or(match preset {
                PresetName::SmallCnnToy => 16,
                _ => 32,
            }),
        noise_sigma: map
            .get("noise_sigma")
            .map(|v| parse_f64("noise_sigma", v))
            .transpose()?
            .unwrap_or(0.05),
        class_subset,
        preprocess: map
            .get("preprocess")
            .map(|v| Preprocess::parse(v))
            .transpose()?
            .unwrap_or(Preprocess::Normalize),
        augment: map
            .get("augment")
            .map(|v| Augment::parse(v))
            .transpose()?
            .unwrap_or(Augment::None),
        subnets: map.get("subnets").map(|v| parse_usize("subnets", v)).transpose()?.unwrap_or(2),
        fusion: map.get("fusion").map(|v| Fusion::parse(v)).transpose()?.unwrap_or(Fusion::Concat),
        feed: map.get("feed").map(|v| parse_feed(v)).transpose()?.unwrap_or_default(),
        width: map.get("width").map(|v| parse_usize("width", v)).transpose()?.unwrap_or(1),
        init: map
            .get("init")
            .map(|v| InitScheme::parse(v))
            .transpose()?
            .unwrap_or(InitScheme::KaimingNormal),
        schedule,
        baselines,
        out_dir: map.get("out_dir").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs/out")),
    };
    Ok(cfg)
}

pub fn load_config_file(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    load_config(Some(&text), overrides)
}
