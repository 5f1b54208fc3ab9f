//! Training loops: pre-training on unlabeled features, supervised
//! fine-tuning, the uni→bi transfer path, and checkpoint averaging.
//!
//! All scheduling and shuffling randomness derives from the run seed via
//! named sub-streams, so single-threaded runs are bit-reproducible.

mod optim;

pub use optim::{lr_at_epoch, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint::{tensor_sha256, Checkpoint};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::net::forward::{absorb_bn_stats, bind, forward_batch, UttOutput};
use crate::net::{HeadKind, Mode, Model, ModelKind, ModelSpec};
use crate::objectives::{
    apc_loss, biapc_loss, ce_loss, mpc_loss, AlignmentLabels, ObjectiveConfig, ObjectiveKind,
};
use crate::rng::SeedStreams;
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Hyper-parameters for one training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub epochs: usize,
    pub lr0: f64,
    pub hold_epochs: usize,
    /// Final-to-initial learning-rate ratio.
    pub lambda: f64,
    /// Utterances per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// How many trailing checkpoints the final model averages.
    pub avg_last_k: usize,
}

impl TrainConfig {
    /// Pre-training defaults: 0.001 held 2 epochs then decayed ×0.1 over 8.
    pub fn pretrain_defaults(objective: ObjectiveConfig, seed: u64) -> Self {
        Self {
            objective,
            epochs: 8,
            lr0: 1e-3,
            hold_epochs: 2,
            lambda: 0.1,
            batch_size: 8,
            seed,
            clip_norm: 5.0,
            avg_last_k: 3,
        }
    }

    /// Fine-tuning defaults: 2e-4 decaying to 2e-6 over 15 epochs.
    pub fn finetune_defaults(seed: u64) -> Self {
        Self {
            objective: ObjectiveConfig::new(ObjectiveKind::CrossEntropy),
            epochs: 15,
            lr0: 2e-4,
            hold_epochs: 2,
            lambda: 0.01,
            batch_size: 8,
            seed,
            clip_norm: 5.0,
            avg_last_k: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.lr0)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Invalid(format!("decay ratio {} outside (0, 1]", self.lambda)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Invalid(format!("clip norm {} must be positive", self.clip_norm)));
        }
        if self.epochs > 0 {
            if self.hold_epochs >= self.epochs {
                return Err(Error::Invalid(format!(
                    "hold epochs {} must be below total epochs {}",
                    self.hold_epochs, self.epochs
                )));
            }
            if self.avg_last_k == 0 || self.avg_last_k > self.epochs {
                return Err(Error::Invalid(format!(
                    "averaging window {} outside 1..={}",
                    self.avg_last_k, self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss summed over the epoch divided by contributing frames.
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} loss={:?} lr={:?} wall_ms={}",
            self.epoch, self.mean_loss, self.lr, self.wall_ms
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let mut fields = HashMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("log field `{part}` is not key=value")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields.get(k).ok_or_else(|| Error::Format(format!("log line missing `{k}`")))
        };
        Ok(Self {
            epoch: get("epoch")?.parse().map_err(|_| Error::Format("bad epoch".into()))?,
            mean_loss: get("loss")?.parse().map_err(|_| Error::Format("bad loss".into()))?,
            lr: get("lr")?.parse().map_err(|_| Error::Format("bad lr".into()))?,
            wall_ms: get("wall_ms")?.parse().map_err(|_| Error::Format("bad wall_ms".into()))?,
        })
    }
}

/// Everything a training run produces: one checkpoint and one log record
/// per epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<EpochRecord>,
}

impl TrainRun {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.mean_loss)
    }
}

/// Per-utterance ground truth paired with a forward output.
pub enum UttTarget<'a, S: Scalar> {
    /// Shifted prediction against the clean features (apc / biapc).
    Predict { clean: &'a Tensor<S> },
    /// Reconstruction of masked frames against the clean features.
    PredictMasked { clean: &'a Tensor<S>, mask: &'a [bool] },
    /// Frame classification.
    Classify { labels: &'a [u32] },
}

/// Loss summed over a batch, with the frame count that normalizes it.
pub struct BatchLoss {
    pub total: Value,
    pub frames: usize,
    /// Raw (unnormalized) per-utterance loss values, batch order.
    pub per_utt: Vec<f64>,
}

/// Assemble the objective over one forward batch. Shared by the trainer and
/// the gradient checker so both optimize exactly the same quantity.
pub fn batch_objective<S: Scalar>(
    tape: &mut Tape<S>,
    outputs: &[UttOutput],
    targets: &[UttTarget<'_, S>],
    cfg: &ObjectiveConfig,
) -> Result<BatchLoss> {
    if outputs.len() != targets.len() || outputs.is_empty() {
        return Err(Error::Invalid(format!(
            "{} outputs vs {} targets in one batch",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Value> = None;
    let mut frames = 0usize;
    let mut per_utt = Vec::with_capacity(outputs.len());
    for (out, target) in outputs.iter().zip(targets) {
        let loss = match (cfg.kind, out, target) {
            (
                ObjectiveKind::Apc,
                UttOutput::Prediction { y_fwd, .. },
                UttTarget::Predict { clean },
            ) => {
                frames += cfg.contributing_frames(clean.rows(), None);
                apc_loss(tape, *y_fwd, clean, cfg.shift_n)?
            }
            (
                ObjectiveKind::BiApc,
                UttOutput::Prediction { y_fwd, y_rev: Some(y_rev) },
                UttTarget::Predict { clean },
            ) => {
                frames += cfg.contributing_frames(clean.rows(), None);
                biapc_loss(tape, *y_fwd, *y_rev, clean, cfg.shift_n, cfg.direction_weights)?
            }
            (
                ObjectiveKind::Mpc,
                UttOutput::Prediction { y_fwd, y_rev },
                UttTarget::PredictMasked { clean, mask },
            ) => {
                frames += mask.iter().filter(|&&m| m).count();
                // Bi models reconstruct from both directions; score the mean.
                let y = match y_rev {
                    Some(y_rev) => {
                        let sum = tape.add(*y_fwd, *y_rev)?;
                        tape.scale(sum, 0.5)
                    }
                    None => *y_fwd,
                };
                mpc_loss(tape, y, clean, mask)?
            }
            (ObjectiveKind::CrossEntropy, UttOutput::Logits(logits), UttTarget::Classify { labels }) => {
                frames += labels.len();
                ce_loss(tape, *logits, labels, false)?
            }
            _ => {
                return Err(Error::Invalid(format!(
                    "objective `{}` does not fit the model's output",
                    cfg.kind.as_str()
                )));
            }
        };
        per_utt.push(tape.value(loss).data()[0].into_f64());
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
    }
    Ok(BatchLoss {
        total: total.expect("non-empty batch"),
        frames: frames.max(1),
        per_utt,
    })
}

/// What the epoch loop trains against, per utterance, index-aligned with the
/// feature list.
enum Task {
    /// apc / biapc: targets are the features themselves.
    Predict,
    /// mpc: inputs are masked per epoch, targets are the clean features.
    PredictMasked,
    /// ce: fixed per-utterance labels.
    Classify(Vec<Vec<u32>>),
}

struct EpochLoop<'a> {
    feats: Vec<Tensor<f32>>,
    task: Task,
    mode: Mode,
    cfg: &'a TrainConfig,
    objective_name: &'a str,
    init_hashes: BTreeMap<String, String>,
}

impl EpochLoop<'_> {
    fn run(self, mut model: Model<f32>) -> Result<TrainRun> {
        let streams = SeedStreams::new(self.cfg.seed);
        let mut adam = AdamState::new();
        let mut checkpoints = Vec::with_capacity(self.cfg.epochs);
        let mut log = Vec::with_capacity(self.cfg.epochs);

        for e in 1..=self.cfg.epochs {
            let started = Instant::now();
            let lr = lr_at_epoch(self.cfg.lr0, self.cfg.lambda, self.cfg.epochs, self.cfg.hold_epochs, e)?;
            let mut order: Vec<usize> = (0..self.feats.len()).collect();
            order.shuffle(&mut streams.stream(&format!("shuffle-e{e}")));
            let mut dropout_rng = streams.stream(&format!("dropout-e{e}"));
            let mut mask_rng = streams.stream(&format!("mask-e{e}"));

            let mut sum_loss = 0.0f64;
            let mut sum_frames = 0usize;
            for batch_ids in order.chunks(self.cfg.batch_size) {
                // Masked-reconstruction inputs are re-drawn every epoch.
                let mut masked_inputs = Vec::new();
                let mut masks = Vec::new();
                if matches!(self.task, Task::PredictMasked) {
                    for &i in batch_ids {
                        let (masked, mask) = crate::objectives::mpc_mask(
                            &self.feats[i],
                            self.cfg.objective.mask_ratio,
                            &mut mask_rng,
                        )?;
                        masked_inputs.push(masked);
                        masks.push(mask);
                    }
                }
                let net_inputs: Vec<&Tensor<f32>> = match self.task {
                    Task::PredictMasked => masked_inputs.iter().collect(),
                    _ => batch_ids.iter().map(|&i| &self.feats[i]).collect(),
                };

                let mut tape = Tape::<f32>::new();
                let bound = bind(&mut tape, &model);
                let batch = forward_batch(
                    &mut tape,
                    &bound,
                    &model.spec,
                    &net_inputs,
                    self.mode,
                    true,
                    Some(&mut dropout_rng),
                )?;

                let targets: Vec<UttTarget<'_, f32>> = batch_ids
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| match &self.task {
                        Task::Predict => UttTarget::Predict { clean: &self.feats[i] },
                        Task::PredictMasked => UttTarget::PredictMasked {
                            clean: &self.feats[i],
                            mask: &masks[j],
                        },
                        Task::Classify(labels) => UttTarget::Classify { labels: &labels[i] },
                    })
                    .collect();
                let loss = batch_objective(&mut tape, &batch.outputs, &targets, &self.cfg.objective)?;
                let scaled = tape.scale(loss.total, 1.0 / loss.frames as f64);
                let grads_by_value = tape.backward(scaled)?;
                let grads: Vec<(String, Tensor<f32>)> = bound
                    .trainable
                    .iter()
                    .filter_map(|(name, v)| {
                        grads_by_value.get(*v).map(|g| (name.clone(), g.clone()))
                    })
                    .collect();
                adam.step(&mut model, &grads, lr, self.cfg.clip_norm)?;
                absorb_bn_stats(&mut model, &batch.bn_stats);

                sum_loss += loss.per_utt.iter().sum::<f64>();
                sum_frames += loss.frames;
            }

            log.push(EpochRecord {
                epoch: e,
                mean_loss: sum_loss / sum_frames.max(1) as f64,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            });
            checkpoints.push(Checkpoint::from_model(
                &model,
                e,
                self.objective_name,
                self.cfg.seed,
                self.init_hashes.clone(),
            ));
        }
        Ok(TrainRun { checkpoints, log })
    }
}

fn check_corpus(corpus: &[FeatureSequence], spec: &ModelSpec, objective: &ObjectiveConfig) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    for s in corpus {
        if s.dim() != spec.input_dim {
            return Err(Error::Mismatch(format!(
                "utterance `{}` has dim {}, model expects {}",
                s.utterance_id,
                s.dim(),
                spec.input_dim
            )));
        }
        if matches!(objective.kind, ObjectiveKind::Apc | ObjectiveKind::BiApc)
            && s.num_frames() <= objective.shift_n
        {
            return Err(Error::SequenceShorterThanShift {
                t: s.num_frames(),
                n: objective.shift_n,
            });
        }
    }
    Ok(())
}

fn cast_feats(corpus: &[FeatureSequence]) -> Vec<Tensor<f32>> {
    corpus.iter().map(|s| s.frames.cast::<f32>()).collect()
}

/// Self-supervised pre-training on features alone. The corpus type carries
/// no labels, so no label can leak in. Returns one checkpoint per epoch.
pub fn pretrain(
    mut model: Model<f32>,
    corpus: &[FeatureSequence],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if model.spec.head != HeadKind::Prediction {
        return Err(Error::Invalid("pre-training needs the shared prediction head".into()));
    }
    let mode = match (cfg.objective.kind, model.spec.kind) {
        (ObjectiveKind::Apc, ModelKind::Uni) => Mode::Pretrain,
        (ObjectiveKind::Apc, ModelKind::Bi) => {
            return Err(Error::Mismatch(
                "objective `apc` trains a uni model; a bi model takes `biapc`".into(),
            ));
        }
        (ObjectiveKind::BiApc, ModelKind::Bi) => Mode::Pretrain,
        (ObjectiveKind::BiApc, ModelKind::Uni) => {
            return Err(Error::Mismatch("objective `biapc` needs a bi model".into()));
        }
        (ObjectiveKind::Mpc, _) => Mode::Full,
        (ObjectiveKind::CrossEntropy, _) => {
            return Err(Error::Invalid(
                "cross-entropy is a fine-tuning objective, not a pre-training one".into(),
            ));
        }
    };
    check_corpus(corpus, &model.spec, &cfg.objective)?;

    // Freeze cross-direction blocks and record what they must still equal
    // after the whole run.
    let mut init_hashes = BTreeMap::new();
    if cfg.objective.kind == ObjectiveKind::BiApc {
        model.freeze_cross();
        for name in model.cross_tensor_names() {
            let t = model.tensor(&name).expect("cross tensor just listed");
            init_hashes.insert(name, tensor_sha256(&t));
        }
    }

    let task = match cfg.objective.kind {
        ObjectiveKind::Mpc => Task::PredictMasked,
        _ => Task::Predict,
    };
    EpochLoop {
        feats: cast_feats(corpus),
        task,
        mode,
        cfg,
        objective_name: cfg.objective.kind.as_str(),
        init_hashes,
    }
    .run(model)
}

/// Supervised fine-tuning with a fresh classifier head. `pretrained`
/// supplies every non-head tensor when given; cross blocks train again.
/// `reset_bn_moments` re-zeroes the running batch-norm statistics instead of
/// transferring them.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base_spec: &ModelSpec,
    classes: usize,
    pretrained: Option<&Checkpoint>,
    features: &[FeatureSequence],
    labels: &[AlignmentLabels],
    cfg: &TrainConfig,
    reset_bn_moments: bool,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.objective.kind != ObjectiveKind::CrossEntropy {
        return Err(Error::Invalid(format!(
            "fine-tuning optimizes cross-entropy, not `{}`",
            cfg.objective.kind.as_str()
        )));
    }
    let spec = ModelSpec { head: HeadKind::Classifier(classes), ..base_spec.clone() };
    spec.validate()?;
    check_corpus(features, &spec, &cfg.objective)?;

    let by_id: HashMap<&str, &AlignmentLabels> =
        labels.iter().map(|l| (l.utterance_id.as_str(), l)).collect();
    let mut joined = Vec::with_capacity(features.len());
    for f in features {
        let l = by_id.get(f.utterance_id.as_str()).ok_or_else(|| {
            Error::Mismatch(format!("no labels for utterance `{}`", f.utterance_id))
        })?;
        l.validate_against(f, classes)?;
        joined.push(l.labels.clone());
    }

    let streams = SeedStreams::new(cfg.seed);
    let mut model = Model::<f32>::init(spec, &mut streams.stream("finetune-init"))?;
    if let Some(ckpt) = pretrained {
        if ckpt.spec.kind != model.spec.kind
            || ckpt.spec.num_layers != model.spec.num_layers
            || ckpt.spec.hidden != model.spec.hidden
            || ckpt.spec.input_dim != model.spec.input_dim
            || ckpt.spec.batchnorm != model.spec.batchnorm
        {
            return Err(Error::Mismatch(format!(
                "checkpoint shape (kind={:?} layers={} hidden={} dim={} bn={}) does not fit \
                 the fine-tuning model (kind={:?} layers={} hidden={} dim={} bn={})",
                ckpt.spec.kind,
                ckpt.spec.num_layers,
                ckpt.spec.hidden,
                ckpt.spec.input_dim,
                ckpt.spec.batchnorm,
                model.spec.kind,
                model.spec.num_layers,
                model.spec.hidden,
                model.spec.input_dim,
                model.spec.batchnorm,
            )));
        }
        // The pre-training head is task-specific; everything else transfers.
        model.load_tensors(&ckpt.tensors, |name| {
            name.starts_with("head.") || (reset_bn_moments && name.contains(".running_"))
        })?;
        model.unfreeze_cross();
    }

    if cfg.epochs == 0 {
        return Ok(TrainRun {
            checkpoints: vec![Checkpoint::from_model(&model, 0, "ce", cfg.seed, BTreeMap::new())],
            log: Vec::new(),
        });
    }
    EpochLoop {
        feats: cast_feats(features),
        task: Task::Classify(joined),
        mode: Mode::Full,
        cfg,
        objective_name: "ce",
        init_hashes: BTreeMap::new(),
    }
    .run(model)
}

/// Initialize a bi model's forward-direction blocks (and shared prediction
/// head, when both heads are prediction) from a uni checkpoint. Reverse and
/// cross blocks start fresh from `seed`.
pub fn transfer_uni_to_bi(uni: &Checkpoint, bi_spec: &ModelSpec, seed: u64) -> Result<Model<f32>> {
    if uni.spec.kind != ModelKind::Uni {
        return Err(Error::Mismatch("transfer source must be a uni checkpoint".into()));
    }
    bi_spec.validate()?;
    if bi_spec.kind != ModelKind::Bi {
        return Err(Error::Mismatch("transfer target must be a bi model".into()));
    }
    if uni.spec.hidden != bi_spec.hidden
        || uni.spec.num_layers != bi_spec.num_layers
        || uni.spec.input_dim != bi_spec.input_dim
        || uni.spec.batchnorm != bi_spec.batchnorm
    {
        return Err(Error::Mismatch(format!(
            "uni checkpoint (layers={} hidden={} dim={} bn={}) does not fit bi spec \
             (layers={} hidden={} dim={} bn={})",
            uni.spec.num_layers,
            uni.spec.hidden,
            uni.spec.input_dim,
            uni.spec.batchnorm,
            bi_spec.num_layers,
            bi_spec.hidden,
            bi_spec.input_dim,
            bi_spec.batchnorm,
        )));
    }

    let streams = SeedStreams::new(seed);
    let mut model = Model::<f32>::init(bi_spec.clone(), &mut streams.stream("transfer-init"))?;

    let copy_head = uni.spec.head == HeadKind::Prediction && bi_spec.head == HeadKind::Prediction;
    let mut entries = Vec::new();
    for (name, t) in &uni.tensors {
        if let Some(rest) = name.strip_prefix("layer") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Format(format!("unexpected tensor name `{name}`")))?;
            let mapped = if let Some(bn_field) = field.strip_prefix("bn.") {
                // Running moments travel too, so the forward stream keeps
                // the uni model's normalization behavior.
                format!("layer{idx}.bn_fwd.{bn_field}")
            } else {
                format!("layer{idx}.fwd_same.{field}")
            };
            entries.push((mapped, t.clone()));
        } else if name.starts_with("head.") {
            if copy_head {
                entries.push((name.clone(), t.clone()));
            }
        } else {
            return Err(Error::Format(format!("unexpected tensor name `{name}`")));
        }
    }
    model.load_tensors(&entries, |_| false)?;
    Ok(model)
}

/// Elementwise arithmetic mean of the last `k` checkpoints, accumulated in
/// 64-bit. Batch-norm moments average the same way.
pub fn average_checkpoints(ckpts: &[Checkpoint], k: usize) -> Result<Checkpoint> {
    if k == 0 {
        return Err(Error::Invalid("averaging window must be at least 1".into()));
    }
    if ckpts.len() < k {
        return Err(Error::Invalid(format!(
            "cannot average the last {k} of {} checkpoints",
            ckpts.len()
        )));
    }
    let sel = &ckpts[ckpts.len() - k..];
    let last = sel.last().expect("k >= 1");
    let mut out = last.clone();
    for c in sel {
        if c.spec != last.spec {
            return Err(Error::Mismatch("checkpoints describe different models".into()));
        }
        if c.tensors.len() != last.tensors.len() {
            return Err(Error::Mismatch("checkpoints hold different tensor sets".into()));
        }
    }
    for (i, (name, t)) in out.tensors.iter_mut().enumerate() {
        let mut acc = vec![0.0f64; t.numel()];
        for c in sel {
            let (n2, t2) = &c.tensors[i];
            if n2 != name || t2.shape() != t.shape() {
                return Err(Error::Mismatch(format!(
                    "checkpoint tensor `{n2}` does not line up with `{name}`"
                )));
            }
            for (a, &v) in acc.iter_mut().zip(t2.data()) {
                *a += v as f64;
            }
        }
        for (dst, a) in t.data_mut().iter_mut().zip(acc) {
            *dst = (a / k as f64) as f32;
        }
    }
    Ok(out)
}
