//! The D-PCN assembly: N identical subnetworks split into extractor and
//! classifier, a discriminator over extractor features, a fusion operator,
//! and a width-scaled extra classifier.
//!
//! Inference touches only extractors, fusion and the extra classifier; the
//! subnet classifiers and the discriminator exist for training alone.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{ActKind, InitScheme, LayerSpec, Mode, PoolKind, Sequential};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream;
use crate::tape::{NodeId, Tape};

fn seq_forward(
    seq: &mut Sequential,
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    match mode {
        Mode::Train => seq.forward_train(tape, store, x, rng),
        Mode::Frozen => seq.forward_frozen(tape, store, x, rng),
        Mode::Eval => seq.forward_eval(tape, store, x),
    }
}

fn seq_forward_ro(
    seq: &Sequential,
    tape: &mut Tape,
    store: &ParamStore,
    x: NodeId,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId> {
    match mode {
        Mode::Train => Err(Error::Config("train-mode forward on a shared network".into())),
        Mode::Frozen => seq.forward_frozen(tape, store, x, rng),
        Mode::Eval => seq.forward_eval(tape, store, x),
    }
}

/// One stretch of a backbone: a plain stack, or a residual unit whose
/// branches are added and passed through ReLU.
#[derive(Debug, Clone)]
pub enum Segment {
    Plain(Sequential),
    Residual { main: Sequential, shortcut: Option<Sequential> },
}

impl Segment {
    fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        match self {
            Segment::Plain(seq) => seq_forward(seq, tape, store, x, mode, rng),
            Segment::Residual { main, shortcut } => {
                let m = seq_forward(main, tape, store, x, mode, rng)?;
                let s = match shortcut {
                    Some(sc) => seq_forward(sc, tape, store, x, mode, rng)?,
                    None => x,
                };
                let sum = tape.add(m, s)?;
                Ok(tape.relu(sum))
            }
        }
    }

    fn forward_ro(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        match self {
            Segment::Plain(seq) => seq_forward_ro(seq, tape, store, x, mode, rng),
            Segment::Residual { main, shortcut } => {
                let m = seq_forward_ro(main, tape, store, x, mode, rng)?;
                let s = match shortcut {
                    Some(sc) => seq_forward_ro(sc, tape, store, x, mode, rng)?,
                    None => x,
                };
                let sum = tape.add(m, s)?;
                Ok(tape.relu(sum))
            }
        }
    }

    fn param_ids(&self) -> Vec<ParamId> {
        match self {
            Segment::Plain(seq) => seq.param_ids(),
            Segment::Residual { main, shortcut } => {
                let mut ids = main.param_ids();
                if let Some(sc) = shortcut {
                    ids.extend(sc.param_ids());
                }
                ids
            }
        }
    }

    fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        match self {
            Segment::Plain(seq) => seq.buffers(),
            Segment::Residual { main, shortcut } => {
                let mut b = main.buffers();
                if let Some(sc) = shortcut {
                    b.extend(sc.buffers());
                }
                b
            }
        }
    }

    fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        match self {
            Segment::Plain(seq) => seq.set_buffer(name, data),
            Segment::Residual { main, shortcut } => main.set_buffer(name, data).or_else(|_| {
                shortcut
                    .as_mut()
                    .map(|sc| sc.set_buffer(name, data))
                    .unwrap_or_else(|| Err(Error::Config(format!("unknown buffer {name}"))))
            }),
        }
    }

    fn signature(&self, out: &mut String) {
        match self {
            Segment::Plain(seq) => out.push_str(&format!("plain{:?};", seq.layers())),
            Segment::Residual { main, shortcut } => {
                out.push_str(&format!("res-main{:?}", main.layers()));
                match shortcut {
                    Some(sc) => out.push_str(&format!("res-proj{:?};", sc.layers())),
                    None => out.push_str("res-id;"),
                }
            }
        }
    }
}

/// A named tap point of the extractor; its output can feed the discriminator.
#[derive(Debug, Clone)]
pub struct ExtractorStage {
    pub name: String,
    pub segments: Vec<Segment>,
}

/// One parallel subnetwork: extractor stages below, classifier on top.
#[derive(Debug, Clone)]
pub struct Subnet {
    pub stages: Vec<ExtractorStage>,
    pub classifier: Sequential,
}

impl Subnet {
    /// Run the extractor, returning each stage's output (last is the
    /// extractor output the classifier and fusion consume).
    pub fn forward_extractor(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &mut self.stages {
            for seg in &mut stage.segments {
                cur = seg.forward(tape, store, cur, mode, rng)?;
            }
            outs.push(cur);
        }
        Ok(outs)
    }

    pub fn forward_extractor_ro(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<NodeId>> {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            for seg in &stage.segments {
                cur = seg.forward_ro(tape, store, cur, mode, rng)?;
            }
            outs.push(cur);
        }
        Ok(outs)
    }

    /// (features, logits) e.g. for training the subnet's own classifier.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        let stages = self.forward_extractor(tape, store, x, mode, rng)?;
        let features = *stages.last().expect("extractor has stages");
        let logits = seq_forward(&mut self.classifier, tape, store, features, mode, rng)?;
        Ok((features, logits))
    }

    pub fn forward_ro(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        let stages = self.forward_extractor_ro(tape, store, x, mode, rng)?;
        let features = *stages.last().expect("extractor has stages");
        let logits = seq_forward_ro(&self.classifier, tape, store, features, mode, rng)?;
        Ok((features, logits))
    }

    pub fn extractor_param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.segments.iter().flat_map(|g| g.param_ids())).collect()
    }

    pub fn classifier_param_ids(&self) -> Vec<ParamId> {
        self.classifier.param_ids()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.extractor_param_ids();
        ids.extend(self.classifier_param_ids());
        ids
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut b: Vec<_> =
            self.stages.iter().flat_map(|s| s.segments.iter().flat_map(|g| g.buffers())).collect();
        b.extend(self.classifier.buffers());
        b
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        for stage in &mut self.stages {
            for seg in &mut stage.segments {
                if seg.set_buffer(name, data).is_ok() {
                    return Ok(());
                }
            }
        }
        self.classifier.set_buffer(name, data)
    }

    /// Structure-only signature: layer specs, no parameter identities.
    pub fn arch_signature(&self) -> String {
        let mut out = String::new();
        for stage in &self.stages {
            out.push_str(&format!("[{}]", stage.name));
            for seg in &stage.segments {
                seg.signature(&mut out);
            }
        }
        out.push_str(&format!("[classifier]plain{:?};", self.classifier.layers()));
        out
    }
}

/// A feed tap: which extractor stage, and the adapter (owned by the
/// discriminator) that maps it onto the deepest tap's geometry.
#[derive(Debug, Clone)]
pub struct TapPoint {
    pub stage: usize,
    pub adapter: Option<Sequential>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub taps: Vec<TapPoint>,
    pub trunk: Sequential,
    pub final_sigmoid: bool,
}

impl Discriminator {
    /// Score a batch of extractor features: one scalar per sample, shape (N,1).
    /// `stage_feats` are the per-stage outputs of one subnet's extractor.
    pub fn score(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        stage_feats: &[NodeId],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut fed = Vec::with_capacity(self.taps.len());
        for tap in &mut self.taps {
            let f = *stage_feats.get(tap.stage).ok_or_else(|| {
                Error::Config(format!("discriminator tap at stage {} out of range", tap.stage))
            })?;
            fed.push(match tap.adapter.as_mut() {
                Some(a) => seq_forward(a, tape, store, f, mode, rng)?,
                None => f,
            });
        }
        let x = if fed.len() == 1 { fed[0] } else { tape.concat_channel(&fed)? };
        let raw = seq_forward(&mut self.trunk, tape, store, x, mode, rng)?;
        let out = if self.final_sigmoid { tape.sigmoid(raw) } else { raw };
        let shape = tape.value(out).shape();
        debug_assert_eq!(shape[1..], [1], "discriminator output per sample must be scalar");
        Ok(out)
    }

    pub fn score_ro(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        stage_feats: &[NodeId],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        let mut fed = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let f = *stage_feats.get(tap.stage).ok_or_else(|| {
                Error::Config(format!("discriminator tap at stage {} out of range", tap.stage))
            })?;
            fed.push(match tap.adapter.as_ref() {
                Some(a) => seq_forward_ro(a, tape, store, f, mode, rng)?,
                None => f,
            });
        }
        let x = if fed.len() == 1 { fed[0] } else { tape.concat_channel(&fed)? };
        let raw = seq_forward_ro(&self.trunk, tape, store, x, mode, rng)?;
        Ok(if self.final_sigmoid { tape.sigmoid(raw) } else { raw })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> =
            self.taps.iter().flat_map(|t| t.adapter.iter().flat_map(|a| a.param_ids())).collect();
        ids.extend(self.trunk.param_ids());
        ids
    }

    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut b: Vec<_> =
            self.taps.iter().flat_map(|t| t.adapter.iter().flat_map(|a| a.buffers())).collect();
        b.extend(self.trunk.buffers());
        b
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        for tap in &mut self.taps {
            if let Some(a) = tap.adapter.as_mut() {
                if a.set_buffer(name, data).is_ok() {
                    return Ok(());
                }
            }
        }
        self.trunk.set_buffer(name, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Concat,
    Sum,
}

impl Fusion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            _ => Err(Error::Config(format!("unknown fusion '{s}' (concat|sum)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    SmallCnnToy,
    Resnet20Cifar,
    NinCifar,
}

impl PresetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small-cnn-toy" => Ok(PresetName::SmallCnnToy),
            "resnet20-cifar" => Ok(PresetName::Resnet20Cifar),
            "nin-cifar" => Ok(PresetName::NinCifar),
            _ => Err(Error::Config(format!(
                "unknown preset '{s}' (small-cnn-toy|resnet20-cifar|nin-cifar)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PresetName::SmallCnnToy => "small-cnn-toy",
            PresetName::Resnet20Cifar => "resnet20-cifar",
            PresetName::NinCifar => "nin-cifar",
        }
    }
}

/// Everything needed to instantiate a D-PCN.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub preset: PresetName,
    pub classes: usize,
    pub subnet_count: usize,
    pub fusion: Fusion,
    /// Extractor stages feeding the discriminator; default is the deepest.
    pub feed_stages: Vec<usize>,
    /// Channel width multiplier (2 realizes the doubled-width baseline).
    pub width: usize,
    pub input_hw: usize,
    pub init: InitScheme,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(preset: PresetName, classes: usize) -> Self {
        let input_hw = match preset {
            PresetName::SmallCnnToy => 16,
            _ => 32,
        };
        ModelConfig {
            preset,
            classes,
            subnet_count: 2,
            fusion: Fusion::Concat,
            feed_stages: Vec::new(), // empty = deepest stage
            width: 1,
            input_hw,
            init: InitScheme::KaimingNormal,
            seed: 0,
        }
    }
}

pub struct DpcnModel {
    pub subnets: Vec<Subnet>,
    pub discriminator: Discriminator,
    pub fusion: Fusion,
    pub extra_classifier: Sequential,
    pub store: ParamStore,
    pub config: ModelConfig,
    input_shape: Vec<usize>,
}

impl DpcnModel {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// (features, logits) of subnet `i`.
    pub fn forward_subnet(
        &mut self,
        tape: &mut Tape,
        i: usize,
        x: NodeId,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, NodeId)> {
        if i >= self.subnets.len() {
            return Err(Error::Config(format!(
                "subnet index {i} out of range ({} subnets)",
                self.subnets.len()
            )));
        }
        let DpcnModel { subnets, store, .. } = self;
        subnets[i].forward(tape, store, x, mode, rng)
    }

    /// Combine per-subnet extractor outputs.
    pub fn fuse(&self, tape: &mut Tape, features: &[NodeId]) -> Result<NodeId> {
        match self.fusion {
            Fusion::Concat => tape.concat_channel(features),
            Fusion::Sum => {
                let mut acc = features[0];
                for &f in &features[1..] {
                    acc = tape.add(acc, f)?;
                }
                Ok(acc)
            }
        }
    }

    /// Inference path: extractors -> fuse -> extra classifier, all in eval
    /// mode. Subnet classifiers and the discriminator are never evaluated.
    pub fn predict(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut rng = substream(0, "predict-unused");
        let mut feats = Vec::with_capacity(self.subnets.len());
        for subnet in &self.subnets {
            let stages =
                subnet.forward_extractor_ro(tape, &self.store, x, Mode::Eval, &mut rng)?;
            feats.push(*stages.last().expect("stages"));
        }
        let fused = self.fuse(tape, &feats)?;
        seq_forward_ro(&self.extra_classifier, tape, &self.store, fused, Mode::Eval, &mut rng)
    }

    pub fn subnet_param_ids(&self, i: usize) -> Vec<ParamId> {
        self.subnets[i].param_ids()
    }

    pub fn discriminator_param_ids(&self) -> Vec<ParamId> {
        self.discriminator.param_ids()
    }

    pub fn extra_param_ids(&self) -> Vec<ParamId> {
        self.extra_classifier.param_ids()
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// All named buffers (BatchNorm running stats) in a stable order.
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut b = Vec::new();
        for s in &self.subnets {
            b.extend(s.buffers());
        }
        b.extend(self.discriminator.buffers());
        b.extend(self.extra_classifier.buffers());
        b
    }

    pub fn set_buffer(&mut self, name: &str, data: &[f64]) -> Result<()> {
        for s in &mut self.subnets {
            if s.set_buffer(name, data).is_ok() {
                return Ok(());
            }
        }
        if self.discriminator.set_buffer(name, data).is_ok() {
            return Ok(());
        }
        self.extra_classifier.set_buffer(name, data)
    }
}

// ---- preset construction ----

struct BackboneSpec {
    /// Extractor stages: (name, segment builders).
    stages: Vec<(String, Vec<SegmentSpec>)>,
    classifier: Vec<LayerSpec>,
    /// Input channels of the extra classifier per fused-feature channel count.
    extra_classifier: fn(fused_channels: usize, classes: usize) -> Vec<LayerSpec>,
}

enum SegmentSpec {
    Plain(Vec<LayerSpec>),
    Residual { main: Vec<LayerSpec>, shortcut: Option<Vec<LayerSpec>> },
}

fn toy_backbone(width: usize, classes: usize) -> BackboneSpec {
    let c1 = 8 * width;
    let c2 = 16 * width;
    BackboneSpec {
        stages: vec![
            (
                "block1".into(),
                vec![SegmentSpec::Plain(vec![
                    LayerSpec::conv(3, c1, 3, 1, 1),
                    LayerSpec::bn(c1),
                    LayerSpec::Activation(ActKind::Relu),
                    LayerSpec::Pool { kind: PoolKind::Max, kernel: 2, stride: 2 },
                ])],
            ),
            (
                "block2".into(),
                vec![SegmentSpec::Plain(vec![
                    LayerSpec::conv(c1, c2, 3, 1, 1),
                    LayerSpec::bn(c2),
                    LayerSpec::Activation(ActKind::Relu),
                    LayerSpec::Pool { kind: PoolKind::Max, kernel: 2, stride: 2 },
                ])],
            ),
        ],
        classifier: vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(c2, classes)],
        extra_classifier: |fused, classes| {
            vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(fused, classes)]
        },
    }
}

fn resnet_unit(in_ch: usize, out_ch: usize, stride: usize) -> SegmentSpec {
    let main = vec![
        LayerSpec::conv(in_ch, out_ch, 3, stride, 1),
        LayerSpec::bn(out_ch),
        LayerSpec::Activation(ActKind::Relu),
        LayerSpec::conv(out_ch, out_ch, 3, 1, 1),
        LayerSpec::bn(out_ch),
    ];
    let shortcut = if stride != 1 || in_ch != out_ch {
        Some(vec![LayerSpec::conv(in_ch, out_ch, 1, stride, 0), LayerSpec::bn(out_ch)])
    } else {
        None
    };
    SegmentSpec::Residual { main, shortcut }
}

fn resnet20_backbone(width: usize, classes: usize) -> BackboneSpec {
    let c = [16 * width, 32 * width, 64 * width];
    let mut block1 = vec![SegmentSpec::Plain(vec![
        LayerSpec::conv(3, c[0], 3, 1, 1),
        LayerSpec::bn(c[0]),
        LayerSpec::Activation(ActKind::Relu),
    ])];
    for _ in 0..3 {
        block1.push(resnet_unit(c[0], c[0], 1));
    }
    let mut block2 = vec![resnet_unit(c[0], c[1], 2)];
    for _ in 0..2 {
        block2.push(resnet_unit(c[1], c[1], 1));
    }
    let mut block3 = vec![resnet_unit(c[1], c[2], 2)];
    for _ in 0..2 {
        block3.push(resnet_unit(c[2], c[2], 1));
    }
    BackboneSpec {
        stages: vec![
            ("block1".into(), block1),
            ("block2".into(), block2),
            ("block3".into(), block3),
        ],
        classifier: vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(c[2], classes)],
        extra_classifier: |fused, classes| {
            vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(fused, classes)]
        },
    }
}

fn nin_backbone(width: usize, classes: usize) -> BackboneSpec {
    let w = |c: usize| c * width;
    let relu = || LayerSpec::Activation(ActKind::Relu);
    BackboneSpec {
        stages: vec![
            (
                "block1".into(),
                vec![SegmentSpec::Plain(vec![
                    LayerSpec::conv(3, w(192), 5, 1, 2),
                    relu(),
                    LayerSpec::conv(w(192), w(160), 1, 1, 0),
                    relu(),
                    LayerSpec::conv(w(160), w(96), 1, 1, 0),
                    relu(),
                    LayerSpec::Pool { kind: PoolKind::Max, kernel: 3, stride: 2 },
                    LayerSpec::Dropout { rate: 0.5 },
                ])],
            ),
            (
                "block2".into(),
                vec![SegmentSpec::Plain(vec![
                    LayerSpec::conv(w(96), w(192), 5, 1, 2),
                    relu(),
                    LayerSpec::conv(w(192), w(192), 1, 1, 0),
                    relu(),
                    LayerSpec::conv(w(192), w(192), 1, 1, 0),
                    relu(),
                    LayerSpec::Pool { kind: PoolKind::Avg, kernel: 3, stride: 2 },
                    LayerSpec::Dropout { rate: 0.5 },
                ])],
            ),
            (
                "block3".into(),
                vec![SegmentSpec::Plain(vec![
                    LayerSpec::conv(w(192), w(192), 3, 1, 1),
                    relu(),
                    LayerSpec::conv(w(192), w(192), 1, 1, 0),
                    relu(),
                    // class-count channels: NIN predicts by pooling alone
                    LayerSpec::conv(w(192), classes, 1, 1, 0),
                    relu(),
                ])],
            ),
        ],
        classifier: vec![LayerSpec::GlobalAvgPool],
        // pooling alone cannot mix the concatenated halves; the added fc does
        extra_classifier: |fused, classes| {
            vec![LayerSpec::GlobalAvgPool, LayerSpec::linear(fused, classes)]
        },
    }
}

fn backbone_for(preset: PresetName, width: usize, classes: usize) -> BackboneSpec {
    match preset {
        PresetName::SmallCnnToy => toy_backbone(width, classes),
        PresetName::Resnet20Cifar => resnet20_backbone(width, classes),
        PresetName::NinCifar => nin_backbone(width, classes),
    }
}

fn build_stages(
    prefix: &str,
    spec: &BackboneSpec,
    input_shape: &[usize],
    store: &mut ParamStore,
    init: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ExtractorStage>, Vec<Vec<usize>>)> {
    let mut stages = Vec::new();
    let mut stage_shapes = Vec::new();
    let mut cur = input_shape.to_vec();
    for (sname, segs) in &spec.stages {
        let mut segments = Vec::new();
        for (j, seg) in segs.iter().enumerate() {
            let seg_name = format!("{prefix}.{sname}.seg{j}");
            match seg {
                SegmentSpec::Plain(layers) => {
                    let seq =
                        Sequential::build(&seg_name, layers.clone(), &cur, store, init, rng)?;
                    cur = seq.output_shape().to_vec();
                    segments.push(Segment::Plain(seq));
                }
                SegmentSpec::Residual { main, shortcut } => {
                    let main_seq = Sequential::build(
                        format!("{seg_name}.main"),
                        main.clone(),
                        &cur,
                        store,
                        init,
                        rng,
                    )?;
                    let out = main_seq.output_shape().to_vec();
                    let shortcut_seq = match shortcut {
                        Some(layers) => {
                            let sc = Sequential::build(
                                format!("{seg_name}.shortcut"),
                                layers.clone(),
                                &cur,
                                store,
                                init,
                                rng,
                            )?;
                            if sc.output_shape() != out {
                                return Err(Error::Shape(format!(
                                    "{seg_name}: shortcut {:?} vs main {:?}",
                                    sc.output_shape(),
                                    out
                                )));
                            }
                            Some(sc)
                        }
                        None => {
                            if out != cur {
                                return Err(Error::Shape(format!(
                                    "{seg_name}: identity shortcut needs {:?} == {:?}",
                                    cur, out
                                )));
                            }
                            None
                        }
                    };
                    cur = out;
                    segments.push(Segment::Residual { main: main_seq, shortcut: shortcut_seq });
                }
            }
        }
        stages.push(ExtractorStage { name: sname.clone(), segments });
        stage_shapes.push(cur.clone());
    }
    Ok((stages, stage_shapes))
}

/// Default discriminator trunk: stride-2 convs with BN and LeakyReLU(0.2),
/// global average pool, linear to one score per sample.
fn discriminator_trunk_layers(in_ch: usize, in_hw: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut c = in_ch;
    let mut hw = in_hw;
    for out_c in [64usize, 128, 256] {
        if hw < 2 {
            break;
        }
        layers.push(LayerSpec::conv(c, out_c, 3, 2, 1));
        layers.push(LayerSpec::bn(out_c));
        layers.push(LayerSpec::Activation(ActKind::LeakyRelu(0.2)));
        c = out_c;
        hw = hw.div_ceil(2);
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers.push(LayerSpec::linear(c, 1));
    layers
}

/// Instantiate a shape-validated D-PCN from a preset configuration.
pub fn build_preset(cfg: &ModelConfig) -> Result<DpcnModel> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if !(2..=3).contains(&cfg.subnet_count) {
        return Err(Error::Config(format!("subnet count must be 2 or 3, got {}", cfg.subnet_count)));
    }
    if cfg.width == 0 {
        return Err(Error::Config("width multiplier must be positive".into()));
    }
    let spec = backbone_for(cfg.preset, cfg.width, cfg.classes);
    let input_shape = vec![3, cfg.input_hw, cfg.input_hw];
    let mut store = ParamStore::new();

    let mut subnets = Vec::with_capacity(cfg.subnet_count);
    let mut stage_shapes = Vec::new();
    for i in 0..cfg.subnet_count {
        let prefix = format!("subnet{}", i + 1);
        let mut rng = substream(cfg.seed, &format!("init.{prefix}"));
        let (stages, shapes) =
            build_stages(&prefix, &spec, &input_shape, &mut store, cfg.init, &mut rng)?;
        let classifier = Sequential::build(
            format!("{prefix}.classifier"),
            spec.classifier.clone(),
            shapes.last().expect("stages"),
            &mut store,
            cfg.init,
            &mut rng,
        )?;
        stage_shapes = shapes;
        subnets.push(Subnet { stages, classifier });
    }

    // Discriminator: taps default to the deepest stage; every non-deepest
    // tap goes through a conv adapter onto the deepest tap's geometry.
    let feed: Vec<usize> = if cfg.feed_stages.is_empty() {
        vec![stage_shapes.len() - 1]
    } else {
        cfg.feed_stages.clone()
    };
    for &s in &feed {
        if s >= stage_shapes.len() {
            return Err(Error::Config(format!(
                "feed stage {s} out of range ({} stages)",
                stage_shapes.len()
            )));
        }
    }
    let deepest = *feed.iter().max().expect("nonempty feed");
    let target = &stage_shapes[deepest];
    let mut disc_rng = substream(cfg.seed, "init.discriminator");
    let mut taps = Vec::new();
    let mut disc_in_ch = 0;
    for (t, &s) in feed.iter().enumerate() {
        if s == deepest {
            taps.push(TapPoint { stage: s, adapter: None });
            disc_in_ch += target[0];
        } else {
            let src = &stage_shapes[s];
            if src[1] % target[1] != 0 {
                return Err(Error::Shape(format!(
                    "feed stage {s} spatial {} not a multiple of target {}",
                    src[1], target[1]
                )));
            }
            let stride = src[1] / target[1];
            let adapter = Sequential::build(
                format!("discriminator.adapter{t}"),
                vec![LayerSpec::conv(src[0], target[0], 3, stride, 1)],
                src,
                &mut store,
                cfg.init,
                &mut disc_rng,
            )?;
            if adapter.output_shape() != target.as_slice() {
                return Err(Error::Shape(format!(
                    "adapter output {:?} does not match target {:?}",
                    adapter.output_shape(),
                    target
                )));
            }
            disc_in_ch += target[0];
            taps.push(TapPoint { stage: s, adapter: Some(adapter) });
        }
    }
    let disc_input = vec![disc_in_ch, target[1], target[2]];
    let trunk = Sequential::build(
        "discriminator.trunk",
        discriminator_trunk_layers(disc_in_ch, target[1]),
        &disc_input,
        &mut store,
        cfg.init,
        &mut disc_rng,
    )?;
    let discriminator = Discriminator {
        taps,
        trunk,
        final_sigmoid: cfg.preset == PresetName::NinCifar,
    };

    // Extra classifier over fused features; concat scales channels by the
    // subnet count, sum keeps them.
    let feat_shape = stage_shapes.last().expect("stages");
    let fused_channels = match cfg.fusion {
        Fusion::Concat => feat_shape[0] * cfg.subnet_count,
        Fusion::Sum => feat_shape[0],
    };
    let mut fused_shape = feat_shape.clone();
    fused_shape[0] = fused_channels;
    let mut extra_rng = substream(cfg.seed, "init.extra");
    let extra_classifier = Sequential::build(
        "extra",
        (spec.extra_classifier)(fused_channels, cfg.classes),
        &fused_shape,
        &mut store,
        cfg.init,
        &mut extra_rng,
    )?;

    Ok(DpcnModel {
        subnets,
        discriminator,
        fusion: cfg.fusion,
        extra_classifier,
        store,
        config: cfg.clone(),
        input_shape,
    })
}

/// A plain single network (extractor + classifier) built from the same
/// backbone menu; the unit the baselines train.
pub struct SingleNet {
    pub subnet: Subnet,
    pub store: ParamStore,
    pub classes: usize,
    input_shape: Vec<usize>,
}

impl SingleNet {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.subnet.param_ids()
    }
}

/// Build a lone backbone. `label` selects the init substream so ensemble
/// members differ.
pub fn build_single(cfg: &ModelConfig, label: &str) -> Result<SingleNet> {
    let spec = backbone_for(cfg.preset, cfg.width, cfg.classes);
    let input_shape = vec![3, cfg.input_hw, cfg.input_hw];
    let mut store = ParamStore::new();
    let mut rng = substream(cfg.seed, &format!("init.{label}"));
    let (stages, shapes) = build_stages(label, &spec, &input_shape, &mut store, cfg.init, &mut rng)?;
    let classifier = Sequential::build(
        format!("{label}.classifier"),
        spec.classifier.clone(),
        shapes.last().expect("stages"),
        &mut store,
        cfg.init,
        &mut rng,
    )?;
    Ok(SingleNet { subnet: Subnet { stages, classifier }, store, classes: cfg.classes, input_shape })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig::new(PresetName::SmallCnnToy, 4)
    }

    fn rand_input(n: usize, shape: &[usize], seed: u64) -> Tensor {
        let mut rng = substream(seed, "input");
        let mut full = vec![n];
        full.extend_from_slice(shape);
        let count: usize = full.iter().product();
        Tensor::new(full, (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn toy_preset_total_parameters_under_1e5() {
        let model = build_preset(&toy_cfg()).unwrap();
        assert!(model.store.total_elements() < 100_000, "{}", model.store.total_elements());
    }

    #[test]
    fn resnet20_shape_trace() {
        let mut cfg = ModelConfig::new(PresetName::Resnet20Cifar, 100);
        cfg.seed = 1;
        let mut model = build_preset(&cfg).unwrap();
        let x_t = rand_input(4, &[3, 32, 32], 2);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut rng = substream(0, "x");
        let (f, z) = model.forward_subnet(&mut tape, 0, x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(f).shape(), &[4, 64, 8, 8]);
        assert_eq!(tape.value(z).shape(), &[4, 100]);
        // concat of 2 x 64 channels
        let first = model.extra_classifier.layers().iter().find_map(|l| match l {
            LayerSpec::Linear { in_features, .. } => Some(*in_features),
            _ => None,
        });
        assert_eq!(first, Some(128));
    }

    #[test]
    fn nin_preset_has_final_sigmoid_and_fc_extra() {
        let cfg = ModelConfig::new(PresetName::NinCifar, 10);
        let model = build_preset(&cfg).unwrap();
        assert!(model.discriminator.final_sigmoid);
        // classifier is pooling alone; extra classifier adds the fc layer
        assert_eq!(model.subnets[0].classifier.layers().len(), 1);
        assert!(model
            .extra_classifier
            .layers()
            .iter()
            .any(|l| matches!(l, LayerSpec::Linear { in_features: 20, out_features: 10 })));
    }

    #[test]
    fn other_presets_have_no_sigmoid() {
        assert!(!build_preset(&toy_cfg()).unwrap().discriminator.final_sigmoid);
    }

    #[test]
    fn subnets_share_architecture_but_not_weights() {
        let model = build_preset(&toy_cfg()).unwrap();
        assert_eq!(model.subnets[0].arch_signature(), model.subnets[1].arch_signature());
        let w1 = model.subnets[0].param_ids();
        let w2 = model.subnets[1].param_ids();
        let differ = w1.iter().zip(&w2).any(|(&a, &b)| {
            model.store.get(a).value.data() != model.store.get(b).value.data()
        });
        assert!(differ, "independent init streams must give different weights");
    }

    #[test]
    fn identical_parameters_give_identical_outputs() {
        let mut model = build_preset(&toy_cfg()).unwrap();
        let src: Vec<ParamId> = model.subnets[0].param_ids();
        let dst: Vec<ParamId> = model.subnets[1].param_ids();
        for (&a, &b) in src.iter().zip(&dst) {
            let v = model.store.get(a).value.clone();
            model.store.get_mut(b).value = v;
        }
        let x_t = rand_input(3, &[3, 16, 16], 5);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut rng = substream(0, "x");
        let (f1, z1) = model.forward_subnet(&mut tape, 0, x, Mode::Eval, &mut rng).unwrap();
        let (f2, z2) = model.forward_subnet(&mut tape, 1, x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(f1).data(), tape.value(f2).data());
        assert_eq!(tape.value(z1).data(), tape.value(z2).data());
    }

    #[test]
    fn discriminator_zero_head_scores() {
        // zero init: raw score 0 per sample; sigmoid maps to 0.5
        let mut cfg = toy_cfg();
        cfg.init = InitScheme::Normal(0.0);
        let mut model = build_preset(&cfg).unwrap();
        let x_t = rand_input(8, &[3, 16, 16], 6);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut rng = substream(0, "x");
        let DpcnModel { subnets, store, discriminator, .. } = &mut model;
        let stages = subnets[0].forward_extractor(&mut tape, store, x, Mode::Eval, &mut rng).unwrap();
        let s = discriminator.score(&mut tape, store, &stages, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(s).shape(), &[8, 1]);
        assert!(tape.value(s).data().iter().all(|&v| v == 0.0));

        discriminator.final_sigmoid = true;
        let s2 = discriminator.score(&mut tape, store, &stages, Mode::Eval, &mut rng).unwrap();
        assert!(tape.value(s2).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn fusion_concat_and_sum() {
        let model = build_preset(&toy_cfg()).unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[4, 64, 8, 8], 1.0));
        let b = tape.leaf(Tensor::full(&[4, 64, 8, 8], 2.0));
        let fused = model.fuse(&mut tape, &[a, b]).unwrap();
        assert_eq!(tape.value(fused).shape(), &[4, 128, 8, 8]);

        let mut sum_cfg = toy_cfg();
        sum_cfg.fusion = Fusion::Sum;
        let sum_model = build_preset(&sum_cfg).unwrap();
        let f = tape.leaf(Tensor::full(&[2, 16, 4, 4], 3.0));
        let negf = tape.leaf(Tensor::full(&[2, 16, 4, 4], -3.0));
        let zero = sum_model.fuse(&mut tape, &[f, negf]).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));

        // three-subnet concat triples channels
        let mut cfg3 = toy_cfg();
        cfg3.subnet_count = 3;
        let m3 = build_preset(&cfg3).unwrap();
        let xs: Vec<NodeId> = (0..3).map(|_| tape.leaf(Tensor::zeros(&[2, 16, 4, 4]))).collect();
        let f3 = m3.fuse(&mut tape, &xs).unwrap();
        assert_eq!(tape.value(f3).shape(), &[2, 48, 4, 4]);
    }

    #[test]
    fn concat_permutation_permutes_channel_blocks() {
        let model = build_preset(&toy_cfg()).unwrap();
        let mut rng = substream(9, "t");
        let data_a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data_b: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3, 2, 2], data_a).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 3, 2, 2], data_b).unwrap());
        let ab = model.fuse(&mut tape, &[a, b]).unwrap();
        let ba = model.fuse(&mut tape, &[b, a]).unwrap();
        // per sample: first half of ab equals second half of ba and vice versa
        let (vab, vba) = (tape.value(ab).data(), tape.value(ba).data());
        let inner = 3 * 4;
        for n in 0..2 {
            let o = n * 2 * inner;
            assert_eq!(&vab[o..o + inner], &vba[o + inner..o + 2 * inner]);
            assert_eq!(&vab[o + inner..o + 2 * inner], &vba[o..o + inner]);
        }
    }

    #[test]
    fn predict_shape_and_determinism() {
        let mut cfg = ModelConfig::new(PresetName::SmallCnnToy, 100);
        cfg.seed = 3;
        let model = build_preset(&cfg).unwrap();
        let x_t = rand_input(4, &[3, 16, 16], 7);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let z = model.predict(&mut tape, x).unwrap();
            tape.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        let z1 = run();
        assert_eq!(z1.len(), 4 * 100);
        assert_eq!(z1, run());
    }

    #[test]
    fn inference_ignores_discriminator_and_subnet_classifiers() {
        let mut model = build_preset(&toy_cfg()).unwrap();
        let x_t = rand_input(2, &[3, 16, 16], 8);
        let before = {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let z = model.predict(&mut tape, x).unwrap();
            tape.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        // wreck everything inference must not depend on
        let mut wrecked = model.discriminator_param_ids();
        for i in 0..model.subnets.len() {
            wrecked.extend(model.subnets[i].classifier_param_ids());
        }
        for id in wrecked {
            model.store.get_mut(id).value.fill(1234.5);
        }
        let after = {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t);
            let z = model.predict(&mut tape, x).unwrap();
            tape.value(z).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(before, after);
    }

    #[test]
    fn sum_fusion_with_cloned_classifier_matches_doubled_features() {
        // identical extractors + sum fusion: fused = 2f. With the extra
        // classifier holding a copy of subnet 1's classifier weights, predict
        // equals that classifier applied to doubled features, bit for bit.
        let mut cfg = toy_cfg();
        cfg.fusion = Fusion::Sum;
        let mut model = build_preset(&cfg).unwrap();
        for (&a, &b) in model.subnets[0]
            .param_ids()
            .iter()
            .zip(&model.subnets[1].param_ids().to_vec())
        {
            let v = model.store.get(a).value.clone();
            model.store.get_mut(b).value = v;
        }
        for (&src, &dst) in model.subnets[0]
            .classifier_param_ids()
            .iter()
            .zip(&model.extra_classifier.param_ids())
        {
            let v = model.store.get(src).value.clone();
            model.store.get_mut(dst).value = v;
        }
        let x_t = rand_input(3, &[3, 16, 16], 11);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let z = model.predict(&mut tape, x).unwrap();

        let mut rng = substream(0, "x");
        let stages = model.subnets[0]
            .forward_extractor_ro(&mut tape, &model.store, x, Mode::Eval, &mut rng)
            .unwrap();
        let f = *stages.last().unwrap();
        let doubled = tape.add(f, f).unwrap();
        let direct = model.subnets[0]
            .classifier
            .forward_eval(&mut tape, &model.store, doubled)
            .unwrap();
        assert_eq!(tape.value(z).data(), tape.value(direct).data());
    }

    #[test]
    fn multi_stage_feed_concatenates_through_adapter() {
        let mut cfg = toy_cfg();
        cfg.feed_stages = vec![0, 1]; // block1 through adapter + block2 direct
        let mut model = build_preset(&cfg).unwrap();
        assert_eq!(model.discriminator.taps.len(), 2);
        assert!(model.discriminator.taps[0].adapter.is_some());
        assert!(model.discriminator.taps[1].adapter.is_none());
        let x_t = rand_input(2, &[3, 16, 16], 13);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut rng = substream(0, "x");
        let DpcnModel { subnets, store, discriminator, .. } = &mut model;
        let stages = subnets[0].forward_extractor(&mut tape, store, x, Mode::Eval, &mut rng).unwrap();
        let s = discriminator.score(&mut tape, store, &stages, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 1]);
    }

    #[test]
    fn unknown_preset_and_bad_args_rejected() {
        assert!(PresetName::parse("vgg16").is_err());
        let mut cfg = toy_cfg();
        cfg.classes = 1;
        assert!(build_preset(&cfg).is_err());
        let mut cfg = toy_cfg();
        cfg.subnet_count = 4;
        assert!(build_preset(&cfg).is_err());
        let mut cfg = toy_cfg();
        cfg.feed_stages = vec![5];
        assert!(build_preset(&cfg).is_err());
    }

    #[test]
    fn double_width_quadruples_conv_parameters() {
        let single = build_single(&toy_cfg(), "base").unwrap();
        let mut wide_cfg = toy_cfg();
        wide_cfg.width = 2;
        let wide = build_single(&wide_cfg, "base").unwrap();
        // conv weights dominate; count only rank-4 tensors
        let conv_count = |net: &SingleNet| -> usize {
            net.param_ids()
                .iter()
                .map(|&id| {
                    let p = net.store.get(id);
                    if p.value.shape().len() == 4 {
                        p.value.numel()
                    } else {
                        0
                    }
                })
                .sum()
        };
        let (c1, c2) = (conv_count(&single), conv_count(&wide));
        // first conv only doubles (3 input channels fixed); allow 3.4x..4x
        assert!(c2 as f64 >= 3.4 * c1 as f64 && c2 as f64 <= 4.0 * c1 as f64, "{c1} -> {c2}");
    }
}
