//! The three-step training protocol and its losses.
//!
//! Step 1 bootstraps asymmetry: subnet 1 trains on plain classification,
//! the others additionally please a fixed discriminator. Step 2 trains
//! subnets and discriminator jointly, all pushing the score populations
//! apart. Step 3 freezes the extractors and trains the extra classifier
//! over fused features. Baselines (single / ensemble / doubled width)
//! share the backbone and epoch budget for like-for-like comparison.

use rand::seq::SliceRandom;

use crate::data::{Augment, Dataset};
use crate::error::{Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::metrics::MetricsRecord;
use crate::model::{DpcnModel, ModelConfig, SingleNet};
use crate::params::{ParamId, ParamStore};
use crate::rng::substream_epoch;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ---- discriminator losses ----

fn check_scores(tape: &Tape, scores: NodeId) -> Result<()> {
    let s = tape.value(scores).shape();
    if s.len() != 2 || s[1] != 1 {
        return Err(Error::Shape(format!("discriminator scores must be (N,1), got {s:?}")));
    }
    Ok(())
}

/// mean over the batch of (1 - s)^2: subnet 1 wants scores at 1.
pub fn loss_d1(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    check_scores(tape, scores)?;
    let neg = tape.scale(scores, -1.0);
    let shifted = tape.add_const(neg, 1.0);
    let sq = tape.square(shifted);
    Ok(tape.mean(sq))
}

/// mean of s^2: subnet 2 wants scores at 0.
pub fn loss_d2(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    check_scores(tape, scores)?;
    let sq = tape.square(scores);
    Ok(tape.mean(sq))
}

/// mean of (0.5 - s)^2: the third subnet targets the midpoint.
pub fn loss_d3(tape: &mut Tape, scores: NodeId) -> Result<NodeId> {
    check_scores(tape, scores)?;
    let neg = tape.scale(scores, -1.0);
    let shifted = tape.add_const(neg, 0.5);
    let sq = tape.square(shifted);
    Ok(tape.mean(sq))
}

/// The subnet-k discriminator loss: k=0 -> (1-s)^2, k=1 -> s^2, k=2 -> (0.5-s)^2.
pub fn subnet_disc_loss(tape: &mut Tape, subnet: usize, scores: NodeId) -> Result<NodeId> {
    match subnet {
        0 => loss_d1(tape, scores),
        1 => loss_d2(tape, scores),
        2 => loss_d3(tape, scores),
        _ => Err(Error::Config(format!("no discriminator loss for subnet index {subnet}"))),
    }
}

// ---- optimizer ----

/// SGD with momentum: v <- mu v + g; w <- w - lr (v + wd w).
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        for &id in ids {
            let p = store.get_mut(id);
            let v = self.velocity[id.0]
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, g), vel) in
                p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut().iter_mut())
            {
                *vel = self.momentum * *vel + g;
                *w -= lr * (*vel + self.weight_decay * *w);
            }
        }
    }
}

// ---- schedule ----

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    pub step1_epochs: usize,
    pub step2_epochs: usize,
    pub step3_epochs: usize,
    pub lambda: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Piecewise-constant (epoch, lr); first entry must cover epoch 0.
    pub lr_policy: Vec<(usize, f64)>,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainingSchedule {
    /// Conventional split of a total epoch budget: Step 1 takes 10%
    /// (minimum 2), Step 3 a third, Step 2 the rest.
    pub fn for_total_epochs(total: usize) -> Self {
        let step1 = (total / 10).max(2).min(total);
        let step3 = (total / 3).min(total - step1);
        let step2 = total - step1 - step3;
        TrainingSchedule {
            step1_epochs: step1,
            step2_epochs: step2,
            step3_epochs: step3,
            lambda: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_policy: vec![(0, 0.05), (total * 4 / 5, 0.01)],
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.step1_epochs + self.step2_epochs + self.step3_epochs
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.lr_policy[0].1;
        for &(e, l) in &self.lr_policy {
            if epoch >= e {
                lr = l;
            }
        }
        lr
    }

    /// Step (1..=3) for a global epoch index.
    pub fn step_of(&self, epoch: usize) -> u8 {
        if epoch < self.step1_epochs {
            1
        } else if epoch < self.step1_epochs + self.step2_epochs {
            2
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr_policy.is_empty() || self.lr_policy[0].0 != 0 {
            return Err(Error::Config("lr policy must start at epoch 0".into()));
        }
        if self.lr_policy.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::Config("lr policy epochs must be non-decreasing".into()));
        }
        Ok(())
    }
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule::for_total_epochs(30)
    }
}

// ---- shared epoch machinery ----

fn batches_for_epoch(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = substream_epoch(seed, "shuffle", epoch);
    idx.shuffle(&mut rng);
    idx.chunks(batch).map(|c| c.to_vec()).collect()
}

fn ensure_finite(value: f64, term: &str, epoch: usize) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite {term} = {value} at epoch {epoch}")));
    }
    Ok(())
}

#[derive(Default, Clone, Copy)]
struct Accum {
    sum: f64,
    count: usize,
}

impl Accum {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Everything an epoch needs besides the model and optimizer.
pub struct EpochCtx<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub sched: &'a TrainingSchedule,
    pub augment: Augment,
    pub epoch: usize,
}

// ---- evaluation ----

fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

const EVAL_CHUNK: usize = 250;

#[derive(Debug, Clone)]
pub struct EvalStats {
    pub subnet_acc: Vec<f64>,
    pub extra_acc: f64,
    /// Paired separation accuracy: fraction of inputs with
    /// D(E1(x)) > D(E2(x)), ties counting half.
    pub sep_acc: f64,
    pub mean_score_subnet1: f64,
    pub mean_score_subnet2: f64,
}

/// Eval-mode accuracies of every classifier plus discriminator separation
/// statistics over `ds`.
pub fn evaluate(model: &DpcnModel, ds: &Dataset) -> Result<EvalStats> {
    let nsub = model.subnets.len();
    let mut correct = vec![0usize; nsub];
    let mut extra_correct = 0usize;
    let mut sep_hits = 0.0;
    let mut score_sum = [0.0f64; 2];
    let mut rng = crate::rng::substream(0, "eval-unused");

    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(EVAL_CHUNK) {
        let (x_t, labels) = ds.batch(chunk, Augment::None, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut feats = Vec::with_capacity(nsub);
        let mut chunk_scores: Vec<Vec<f64>> = Vec::new();
        for (i, subnet) in model.subnets.iter().enumerate() {
            let stages =
                subnet.forward_extractor_ro(&mut tape, &model.store, x, Mode::Eval, &mut rng)?;
            let f = *stages.last().expect("stages");
            let logits = subnet.classifier.forward_eval(&mut tape, &model.store, f)?;
            let pred = argmax_rows(tape.value(logits).data(), ds.classes);
            correct[i] += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            if i < 2 {
                let s = model.discriminator.score_ro(
                    &mut tape,
                    &model.store,
                    &stages,
                    Mode::Eval,
                    &mut rng,
                )?;
                let sv = tape.value(s).data().to_vec();
                score_sum[i] += sv.iter().sum::<f64>();
                chunk_scores.push(sv);
            }
            feats.push(f);
        }
        for (a, b) in chunk_scores[0].iter().zip(&chunk_scores[1]) {
            sep_hits += match a.partial_cmp(b) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
        let fused = model.fuse(&mut tape, &feats)?;
        let logits =
            model.extra_classifier.forward_eval(&mut tape, &model.store, fused)?;
        let pred = argmax_rows(tape.value(logits).data(), ds.classes);
        extra_correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }

    let n = ds.len() as f64;
    Ok(EvalStats {
        subnet_acc: correct.iter().map(|&c| c as f64 / n).collect(),
        extra_acc: extra_correct as f64 / n,
        sep_acc: sep_hits / n,
        mean_score_subnet1: score_sum[0] / n,
        mean_score_subnet2: score_sum[1] / n,
    })
}

/// Threshold-0.5 separation accuracy measured in the training regime:
/// batch statistics everywhere, one subnet population per forward, exactly
/// as the discriminator sees features during its own updates.
pub fn training_regime_separation(model: &DpcnModel, ds: &Dataset, batch: usize) -> Result<f64> {
    let mut rng = crate::rng::substream(0, "sep-unused");
    // class-mixed batches, as in training; the dataset is stored class-ordered
    let mut idxs: Vec<usize> = (0..ds.len()).collect();
    idxs.shuffle(&mut crate::rng::substream(0, "sep-shuffle"));
    let mut hits = 0usize;
    for chunk in idxs.chunks(batch.max(2)) {
        let (x_t, _) = ds.batch(chunk, Augment::None, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        for (i, subnet) in model.subnets.iter().take(2).enumerate() {
            let stages =
                subnet.forward_extractor_ro(&mut tape, &model.store, x, Mode::Frozen, &mut rng)?;
            let s = model
                .discriminator
                .score_ro(&mut tape, &model.store, &stages, Mode::Frozen, &mut rng)?;
            let sv = tape.value(s).data();
            hits += if i == 0 {
                sv.iter().filter(|&&v| v > 0.5).count()
            } else {
                sv.iter().filter(|&&v| v <= 0.5).count()
            };
        }
    }
    Ok(hits as f64 / (2.0 * ds.len() as f64))
}

fn fill_accuracy(record: &mut MetricsRecord, model: &DpcnModel, ctx: &EpochCtx) -> Result<()> {
    let train_stats = evaluate(model, ctx.train)?;
    let test_stats = evaluate(model, ctx.test)?;
    for i in 0..model.subnets.len() {
        record.train_acc[i] = Some(train_stats.subnet_acc[i]);
        record.test_acc[i] = Some(test_stats.subnet_acc[i]);
    }
    record.train_acc[3] = Some(train_stats.extra_acc);
    record.test_acc[3] = Some(test_stats.extra_acc);
    record.disc_sep_acc = train_stats.sep_acc;
    Ok(())
}

// ---- the three steps ----

/// Step 1: asymmetric initialization with a fixed discriminator. Subnet 1
/// minimizes its classification loss alone; the others add the scaled
/// discriminator term. Discriminator parameters receive no updates.
pub fn step1_epoch(model: &mut DpcnModel, opt: &mut Sgd, ctx: &EpochCtx) -> Result<MetricsRecord> {
    let lr = ctx.sched.lr_at(ctx.epoch);
    let lambda = ctx.sched.lambda;
    let nsub = model.subnets.len();
    let sub_ids: Vec<Vec<ParamId>> = (0..nsub).map(|i| model.subnet_param_ids(i)).collect();
    let mut drop_rng = substream_epoch(ctx.sched.seed, "dropout", ctx.epoch);
    let mut aug_rng = substream_epoch(ctx.sched.seed, "augment", ctx.epoch);

    let mut l_total = [Accum::default(); 3];
    let mut l_cls = [Accum::default(); 3];
    let mut l_disc = [Accum::default(); 3];

    for idxs in batches_for_epoch(ctx.train.len(), ctx.sched.batch_size, ctx.sched.seed, ctx.epoch)
    {
        let (x_t, labels) = ctx.train.batch(&idxs, ctx.augment, &mut aug_rng);

        // subnet 1: L1 = L_cls1
        {
            let DpcnModel { subnets, store, .. } = &mut *model;
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let (_, logits) = subnets[0].forward(&mut tape, store, x, Mode::Train, &mut drop_rng)?;
            let cls = softmax_cross_entropy(&mut tape, logits, &labels)?;
            let v = tape.value(cls).item();
            ensure_finite(v, "L_cls1", ctx.epoch)?;
            l_cls[0].add(v);
            l_total[0].add(v);
            tape.backward(cls, store)?;
            opt.step(store, &sub_ids[0], lr);
        }

        // subnets 2..n: L_k = L_clsk + lambda * L_Dk, discriminator frozen
        for i in 1..nsub {
            let DpcnModel { subnets, discriminator, store, .. } = &mut *model;
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let stages =
                subnets[i].forward_extractor(&mut tape, store, x, Mode::Train, &mut drop_rng)?;
            let feats = *stages.last().expect("stages");
            let logits = subnets[i].classifier.forward_train(&mut tape, store, feats, &mut drop_rng)?;
            let cls = softmax_cross_entropy(&mut tape, logits, &labels)?;
            let scores =
                discriminator.score_ro(&mut tape, store, &stages, Mode::Frozen, &mut drop_rng)?;
            let ld = subnet_disc_loss(&mut tape, i, scores)?;
            let cls_v = tape.value(cls).item();
            let ld_v = tape.value(ld).item();
            ensure_finite(cls_v, &format!("L_cls{}", i + 1), ctx.epoch)?;
            ensure_finite(ld_v, &format!("L_D{}", i + 1), ctx.epoch)?;
            let scaled = tape.scale(ld, lambda);
            let total = tape.add(cls, scaled)?;
            l_cls[i].add(cls_v);
            l_disc[i].add(ld_v);
            l_total[i].add(tape.value(total).item());
            tape.backward(total, store)?;
            opt.step(store, &sub_ids[i], lr);
        }
    }

    let mut record = MetricsRecord::blank(ctx.epoch, 1);
    record.l1 = l_total[0].mean();
    record.l2 = l_total[1].mean();
    record.l3 = l_total[2].mean();
    record.l_cls = [l_cls[0].mean(), l_cls[1].mean(), l_cls[2].mean()];
    record.l_d2 = l_disc[1].mean();
    record.l_d3 = l_disc[2].mean();
    fill_accuracy(&mut record, model, ctx)?;
    Ok(record)
}

/// Step 2: joint training. Per batch, each subnet takes one update with
/// the discriminator frozen, then the discriminator takes one update on
/// detached extractor features.
pub fn step2_epoch(model: &mut DpcnModel, opt: &mut Sgd, ctx: &EpochCtx) -> Result<MetricsRecord> {
    let lr = ctx.sched.lr_at(ctx.epoch);
    let lambda = ctx.sched.lambda;
    let nsub = model.subnets.len();
    let sub_ids: Vec<Vec<ParamId>> = (0..nsub).map(|i| model.subnet_param_ids(i)).collect();
    let disc_ids = model.discriminator_param_ids();
    let mut drop_rng = substream_epoch(ctx.sched.seed, "dropout", ctx.epoch);
    let mut aug_rng = substream_epoch(ctx.sched.seed, "augment", ctx.epoch);

    let mut l_total = [Accum::default(); 3];
    let mut l_cls = [Accum::default(); 3];
    let mut l_disc = [Accum::default(); 3];
    let mut l_d_joint = Accum::default();

    for idxs in batches_for_epoch(ctx.train.len(), ctx.sched.batch_size, ctx.sched.seed, ctx.epoch)
    {
        let (x_t, labels) = ctx.train.batch(&idxs, ctx.augment, &mut aug_rng);

        // (a)..(c) one update per subnet, discriminator frozen
        for i in 0..nsub {
            let DpcnModel { subnets, discriminator, store, .. } = &mut *model;
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let stages =
                subnets[i].forward_extractor(&mut tape, store, x, Mode::Train, &mut drop_rng)?;
            let feats = *stages.last().expect("stages");
            let logits = subnets[i].classifier.forward_train(&mut tape, store, feats, &mut drop_rng)?;
            let cls = softmax_cross_entropy(&mut tape, logits, &labels)?;
            let scores =
                discriminator.score_ro(&mut tape, store, &stages, Mode::Frozen, &mut drop_rng)?;
            let ld = subnet_disc_loss(&mut tape, i, scores)?;
            let cls_v = tape.value(cls).item();
            let ld_v = tape.value(ld).item();
            ensure_finite(cls_v, &format!("L_cls{}", i + 1), ctx.epoch)?;
            ensure_finite(ld_v, &format!("L_D{}", i + 1), ctx.epoch)?;
            let scaled = tape.scale(ld, lambda);
            let total = tape.add(cls, scaled)?;
            l_cls[i].add(cls_v);
            l_disc[i].add(ld_v);
            l_total[i].add(tape.value(total).item());
            tape.backward(total, store)?;
            opt.step(store, &sub_ids[i], lr);
        }

        // (d) discriminator update on detached features: L_D = sum of terms
        {
            let DpcnModel { subnets, discriminator, store, .. } = &mut *model;
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let mut total: Option<NodeId> = None;
            for i in 0..nsub {
                let stages = subnets[i]
                    .forward_extractor(&mut tape, store, x, Mode::Frozen, &mut drop_rng)?;
                let detached: Vec<NodeId> = stages.iter().map(|&s| tape.detach(s)).collect();
                let scores =
                    discriminator.score(&mut tape, store, &detached, Mode::Train, &mut drop_rng)?;
                let ld = subnet_disc_loss(&mut tape, i, scores)?;
                ensure_finite(tape.value(ld).item(), &format!("L_D{} (joint)", i + 1), ctx.epoch)?;
                total = Some(match total {
                    Some(t) => tape.add(t, ld)?,
                    None => ld,
                });
            }
            let total = total.expect("at least two subnets");
            l_d_joint.add(tape.value(total).item());
            tape.backward(total, store)?;
            opt.step(store, &disc_ids, lr);
        }
    }

    let mut record = MetricsRecord::blank(ctx.epoch, 2);
    record.l1 = l_total[0].mean();
    record.l2 = l_total[1].mean();
    record.l3 = l_total[2].mean();
    record.l_cls = [l_cls[0].mean(), l_cls[1].mean(), l_cls[2].mean()];
    record.l_d1 = l_disc[0].mean();
    record.l_d2 = l_disc[1].mean();
    record.l_d3 = l_disc[2].mean();
    record.l_d = l_d_joint.mean();
    fill_accuracy(&mut record, model, ctx)?;
    Ok(record)
}

/// Step 3: extractors fixed in eval mode, only the extra classifier trains
/// on fused features. Discriminator and subnet classifiers are out of the
/// graph entirely.
pub fn step3_epoch(model: &mut DpcnModel, opt: &mut Sgd, ctx: &EpochCtx) -> Result<MetricsRecord> {
    let lr = ctx.sched.lr_at(ctx.epoch);
    let extra_ids = model.extra_param_ids();
    let mut drop_rng = substream_epoch(ctx.sched.seed, "dropout", ctx.epoch);
    let mut aug_rng = substream_epoch(ctx.sched.seed, "augment", ctx.epoch);
    let mut l_extra = Accum::default();

    for idxs in batches_for_epoch(ctx.train.len(), ctx.sched.batch_size, ctx.sched.seed, ctx.epoch)
    {
        let (x_t, labels) = ctx.train.batch(&idxs, ctx.augment, &mut aug_rng);
        let DpcnModel { subnets, extra_classifier, store, fusion, .. } = &mut *model;
        store.zero_grad();
        let mut tape = Tape::new();
        let x = tape.leaf(x_t);
        let mut feats = Vec::with_capacity(subnets.len());
        for subnet in subnets.iter() {
            let stages =
                subnet.forward_extractor_ro(&mut tape, store, x, Mode::Eval, &mut drop_rng)?;
            let f = *stages.last().expect("stages");
            feats.push(tape.detach(f));
        }
        let fused = match fusion {
            crate::model::Fusion::Concat => tape.concat_channel(&feats)?,
            crate::model::Fusion::Sum => {
                let mut acc = feats[0];
                for &f in &feats[1..] {
                    acc = tape.add(acc, f)?;
                }
                acc
            }
        };
        let logits = extra_classifier.forward_train(&mut tape, store, fused, &mut drop_rng)?;
        let cls = softmax_cross_entropy(&mut tape, logits, &labels)?;
        let v = tape.value(cls).item();
        ensure_finite(v, "L_extra", ctx.epoch)?;
        l_extra.add(v);
        tape.backward(cls, store)?;
        opt.step(store, &extra_ids, lr);
    }

    let mut record = MetricsRecord::blank(ctx.epoch, 3);
    record.l_extra = l_extra.mean();
    fill_accuracy(&mut record, model, ctx)?;
    Ok(record)
}

/// Run Steps 1 -> 2 -> 3 over the schedule, evaluating every classifier
/// each epoch.
pub fn train(
    model: &mut DpcnModel,
    train_ds: &Dataset,
    test_ds: &Dataset,
    sched: &TrainingSchedule,
    augment: Augment,
) -> Result<Vec<MetricsRecord>> {
    sched.validate()?;
    if train_ds.is_empty() || test_ds.is_empty() {
        return Err(Error::Data("training and test sets must be non-empty".into()));
    }
    if train_ds.classes != model.classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train_ds.classes,
            model.classes()
        )));
    }
    let mut opt = Sgd::new(sched.momentum, sched.weight_decay);
    let mut records = Vec::with_capacity(sched.total_epochs());
    for epoch in 0..sched.total_epochs() {
        let ctx = EpochCtx { train: train_ds, test: test_ds, sched, augment, epoch };
        let record = match sched.step_of(epoch) {
            1 => step1_epoch(model, &mut opt, &ctx)?,
            2 => step2_epoch(model, &mut opt, &ctx)?,
            _ => step3_epoch(model, &mut opt, &ctx)?,
        };
        records.push(record);
    }
    Ok(records)
}

// ---- baselines ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    Single,
    Ensemble2,
    DoubleWidth,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(BaselineKind::Single),
            "ensemble2" => Ok(BaselineKind::Ensemble2),
            "double-width" => Ok(BaselineKind::DoubleWidth),
            _ => Err(Error::Config(format!(
                "unknown baseline '{s}' (single|ensemble2|double-width)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::Single => "single",
            BaselineKind::Ensemble2 => "ensemble2",
            BaselineKind::DoubleWidth => "double-width",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub kind: BaselineKind,
    /// (epoch, train accuracy, test accuracy); empty for ensembles.
    pub history: Vec<(usize, f64, f64)>,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
}

/// Train one backbone on plain cross entropy for the full epoch budget.
pub fn train_single_net(
    cfg: &ModelConfig,
    label: &str,
    train_ds: &Dataset,
    test_ds: &Dataset,
    sched: &TrainingSchedule,
    augment: Augment,
) -> Result<(SingleNet, Vec<(usize, f64, f64)>)> {
    sched.validate()?;
    let mut net = crate::model::build_single(cfg, label)?;
    let ids = net.param_ids();
    let mut opt = Sgd::new(sched.momentum, sched.weight_decay);
    let mut history = Vec::new();
    for epoch in 0..sched.total_epochs() {
        let lr = sched.lr_at(epoch);
        let mut drop_rng = substream_epoch(sched.seed, &format!("dropout.{label}"), epoch);
        let mut aug_rng = substream_epoch(sched.seed, "augment", epoch);
        for idxs in batches_for_epoch(train_ds.len(), sched.batch_size, sched.seed, epoch) {
            let (x_t, labels) = train_ds.batch(&idxs, augment, &mut aug_rng);
            let SingleNet { subnet, store, .. } = &mut net;
            store.zero_grad();
            let mut tape = Tape::new();
            let x = tape.leaf(x_t);
            let (_, logits) = subnet.forward(&mut tape, store, x, Mode::Train, &mut drop_rng)?;
            let cls = softmax_cross_entropy(&mut tape, logits, &labels)?;
            ensure_finite(tape.value(cls).item(), "L_cls (baseline)", epoch)?;
            tape.backward(cls, store)?;
            opt.step(store, &ids, lr);
        }
        history.push((
            epoch,
            single_net_accuracy(&net, train_ds)?,
            single_net_accuracy(&net, test_ds)?,
        ));
    }
    Ok((net, history))
}

pub fn single_net_accuracy(net: &SingleNet, ds: &Dataset) -> Result<f64> {
    ensemble_accuracy(&[net], ds)
}

/// Accuracy of averaged softmax predictions over ensemble members.
pub fn ensemble_accuracy(nets: &[&SingleNet], ds: &Dataset) -> Result<f64> {
    let mut rng = crate::rng::substream(0, "eval-unused");
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut correct = 0usize;
    for chunk in idxs.chunks(EVAL_CHUNK) {
        let (x_t, labels) = ds.batch(chunk, Augment::None, &mut rng);
        let mut probs = vec![0.0f64; chunk.len() * ds.classes];
        for net in nets {
            let mut tape = Tape::new();
            let x = tape.leaf(x_t.clone());
            let (_, logits) = net.subnet.forward_ro(&mut tape, &net.store, x, Mode::Eval, &mut rng)?;
            for (row, out) in
                tape.value(logits).data().chunks(ds.classes).zip(probs.chunks_mut(ds.classes))
            {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for (o, e) in out.iter_mut().zip(&exps) {
                    *o += e / denom;
                }
            }
        }
        let pred = argmax_rows(&probs, ds.classes);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Train and evaluate one comparison baseline with the same backbone and
/// epoch budget as the D-PCN run.
pub fn baseline(
    kind: BaselineKind,
    cfg: &ModelConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    sched: &TrainingSchedule,
    augment: Augment,
) -> Result<BaselineRun> {
    match kind {
        BaselineKind::Single => {
            let (net, history) = train_single_net(cfg, "base", train_ds, test_ds, sched, augment)?;
            let final_train_acc = single_net_accuracy(&net, train_ds)?;
            let final_test_acc = single_net_accuracy(&net, test_ds)?;
            Ok(BaselineRun { kind, history, final_train_acc, final_test_acc })
        }
        BaselineKind::DoubleWidth => {
            let mut wide = cfg.clone();
            wide.width = cfg.width * 2;
            let (net, history) = train_single_net(&wide, "base", train_ds, test_ds, sched, augment)?;
            let final_train_acc = single_net_accuracy(&net, train_ds)?;
            let final_test_acc = single_net_accuracy(&net, test_ds)?;
            Ok(BaselineRun { kind, history, final_train_acc, final_test_acc })
        }
        BaselineKind::Ensemble2 => {
            let (a, _) = train_single_net(cfg, "ens1", train_ds, test_ds, sched, augment)?;
            let (b, _) = train_single_net(cfg, "ens2", train_ds, test_ds, sched, augment)?;
            let final_train_acc = ensemble_accuracy(&[&a, &b], train_ds)?;
            let final_test_acc = ensemble_accuracy(&[&a, &b], test_ds)?;
            Ok(BaselineRun { kind, history: Vec::new(), final_train_acc, final_test_acc })
        }
    }
}
