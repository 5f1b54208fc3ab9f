//! Post-hoc checks on trained checkpoints: pretrain-mode blindness (each
//! direction's predictions must ignore the frames it is not allowed to see),
//! frozen-block integrity against recorded init hashes, and finite-difference
//! spot checks of the analytic gradient.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{tensor_sha256, Checkpoint};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::gradcheck::{self, rel_err};
use crate::net::forward::{bind, forward_batch, stack_forward, UttOutput};
use crate::net::{HeadKind, Mode, Model, ModelKind};
use crate::objectives::{mpc_mask, ObjectiveConfig, ObjectiveKind};
use crate::rng::SeedStreams;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{batch_objective, UttTarget};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    /// The invariant does not constrain this kind of checkpoint.
    NotApplicable,
}

impl CheckStatus {
    fn label(self) -> &'static str {
        match self {
            CheckStatus::Pass => "pass",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NotApplicable => "not applicable",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuditCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct AuditReport {
    pub checks: Vec<AuditCheck>,
}

impl AuditReport {
    /// True when no check failed; "not applicable" does not count against.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{}: {} — {}", c.name, c.status.label(), c.detail);
        }
        let _ = writeln!(out, "overall: {}", if self.passed() { "pass" } else { "FAIL" });
        out
    }
}

#[derive(Debug, Clone)]
pub struct AuditConfig {
    /// Perturbation trials for the blindness check.
    pub trials: usize,
    /// Parameter coordinates sampled by the gradient spot check.
    pub spot_coords: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { trials: 20, spot_coords: 16, seed: 0 }
    }
}

/// Outcome of a single perturbation trial.
#[derive(Debug, Clone, Copy)]
pub struct LeakageTrial {
    /// Forward predictions over the protected prefix stayed bit-identical.
    pub fwd_ok: bool,
    /// Same for the reverse stream's protected suffix; `None` on uni models.
    pub rev_ok: Option<bool>,
}

impl LeakageTrial {
    pub fn ok(&self) -> bool {
        self.fwd_ok && self.rev_ok.unwrap_or(true)
    }
}

fn pretrain_outputs(
    model: &Model<f32>,
    x: &Tensor<f32>,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let bound = bind(&mut tape, model);
    match stack_forward(&mut tape, &bound, &model.spec, x, Mode::Pretrain, false, None)? {
        UttOutput::Prediction { y_fwd, y_rev } => {
            Ok((tape.value(y_fwd).clone(), y_rev.map(|v| tape.value(v).clone())))
        }
        UttOutput::Logits(_) => {
            Err(Error::Invalid("blindness trial needs a prediction head".into()))
        }
    }
}

fn perturb_rows(x: &mut Tensor<f32>, rows: std::ops::Range<usize>, rng: &mut ChaCha8Rng) {
    let cols = x.cols();
    for r in rows {
        for c in 0..cols {
            *x.at_mut(r, c) += rng.random_range(-1.0f32..1.0);
        }
    }
}

fn rows_bit_equal(a: &Tensor<f32>, b: &Tensor<f32>, rows: std::ops::Range<usize>) -> bool {
    let cols = a.cols();
    rows.flat_map(|r| (0..cols).map(move |c| (r, c)))
        .all(|(r, c)| a.at(r, c).to_bits() == b.at(r, c).to_bits())
}

/// One blindness trial in pretrain mode with dropout off. `cut` splits the
/// utterance into a prefix of `cut` frames and the remaining suffix. Noising
/// the suffix must leave the forward stream's prefix predictions bit-identical
/// (the forward direction never reads ahead), and noising the prefix must
/// leave the reverse stream's suffix predictions bit-identical.
pub fn leakage_trial(
    model: &Model<f32>,
    x: &Tensor<f32>,
    cut: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LeakageTrial> {
    let t = x.rows();
    if cut == 0 || cut >= t {
        return Err(Error::Invalid(format!(
            "cut {cut} does not split a {t}-frame utterance into two non-empty parts"
        )));
    }
    let (clean_fwd, clean_rev) = pretrain_outputs(model, x)?;

    let mut suffix_noised = x.clone();
    perturb_rows(&mut suffix_noised, cut..t, rng);
    let (pert_fwd, _) = pretrain_outputs(model, &suffix_noised)?;
    let fwd_ok = rows_bit_equal(&clean_fwd, &pert_fwd, 0..cut);

    let rev_ok = match (model.spec.kind, clean_rev) {
        (ModelKind::Bi, Some(clean_rev)) => {
            let mut prefix_noised = x.clone();
            perturb_rows(&mut prefix_noised, 0..cut, rng);
            let (_, pert_rev) = pretrain_outputs(model, &prefix_noised)?;
            let pert_rev = pert_rev.expect("bi model emits a reverse stream");
            Some(rows_bit_equal(&clean_rev, &pert_rev, cut..t))
        }
        _ => None,
    };
    Ok(LeakageTrial { fwd_ok, rev_ok })
}

/// Trial length cap: long utterances add cost, not coverage.
const TRIAL_MAX_FRAMES: usize = 48;

fn leakage_check(model: &Model<f32>, feats: &[FeatureSequence], trials: usize, seed: u64) -> AuditCheck {
    let name = "pretrain-mode blindness";
    let mut rng = SeedStreams::new(seed).stream("audit-leakage");
    for i in 0..trials {
        let seq = &feats[rng.random_range(0..feats.len())];
        let t = seq.num_frames().min(TRIAL_MAX_FRAMES);
        if t < 2 {
            continue;
        }
        let x = Tensor::from_fn(t, seq.dim(), |r, c| seq.frames.at(r, c) as f32);
        let cut = rng.random_range(1..t);
        match leakage_trial(model, &x, cut, &mut rng) {
            Ok(trial) if trial.ok() => {}
            Ok(trial) => {
                let stream = if trial.fwd_ok { "reverse" } else { "forward" };
                return AuditCheck {
                    name,
                    status: CheckStatus::Fail,
                    detail: format!(
                        "trial {i}: utterance `{}`, cut {cut}: the {stream} stream's protected \
                         predictions changed under perturbation",
                        seq.utterance_id
                    ),
                };
            }
            Err(e) => {
                return AuditCheck { name, status: CheckStatus::Fail, detail: e.to_string() }
            }
        }
    }
    AuditCheck {
        name,
        status: CheckStatus::Pass,
        detail: format!(
            "{trials} perturbation trials; every protected prediction row stayed bit-identical"
        ),
    }
}

fn frozen_hash_check(ckpt: &Checkpoint) -> AuditCheck {
    let name = "frozen blocks vs recorded init hashes";
    if ckpt.init_hashes.is_empty() {
        return AuditCheck {
            name,
            status: CheckStatus::NotApplicable,
            detail: "checkpoint records no frozen-tensor hashes".into(),
        };
    }
    let mut drifted = Vec::new();
    for (tensor_name, want) in &ckpt.init_hashes {
        match ckpt.tensor(tensor_name) {
            None => drifted.push(format!("`{tensor_name}` (missing)")),
            Some(t) if &tensor_sha256(t) != want => drifted.push(format!("`{tensor_name}`")),
            Some(_) => {}
        }
    }
    if drifted.is_empty() {
        AuditCheck {
            name,
            status: CheckStatus::Pass,
            detail: format!("{} frozen tensors match their initialization", ckpt.init_hashes.len()),
        }
    } else {
        AuditCheck {
            name,
            status: CheckStatus::Fail,
            detail: format!("drifted from initialization: {}", drifted.join(", ")),
        }
    }
}

/// What the spot check recomputes: the per-frame training loss of one short
/// utterance under the checkpoint's own objective, at 64-bit, dropout off.
struct SpotObjective {
    input: Tensor<f64>,
    clean: Tensor<f64>,
    mask: Vec<bool>,
    labels: Vec<u32>,
    objective: ObjectiveConfig,
    mode: Mode,
}

impl SpotObjective {
    fn prepare(ckpt: &Checkpoint, feats: &[FeatureSequence], seed: u64) -> Result<Self> {
        let kind = ObjectiveKind::parse(&ckpt.objective)?;
        let objective = ObjectiveConfig::new(kind);
        let seq = feats
            .first()
            .ok_or_else(|| Error::Invalid("audit needs at least one utterance".into()))?;
        let t = seq.num_frames().min(24);
        if t <= objective.shift_n && matches!(kind, ObjectiveKind::Apc | ObjectiveKind::BiApc) {
            return Err(Error::Invalid(format!(
                "utterance `{}` is too short ({t} frames) to score a shift-{} objective",
                seq.utterance_id, objective.shift_n
            )));
        }
        let clean = Tensor::from_fn(t, seq.dim(), |r, c| seq.frames.at(r, c));
        let streams = SeedStreams::new(seed);
        let (input, mask) = match kind {
            ObjectiveKind::Mpc => {
                let (masked, mask) =
                    mpc_mask(&clean, objective.mask_ratio, &mut streams.stream("audit-mask"))?;
                (masked, mask)
            }
            _ => (clean.clone(), Vec::new()),
        };
        let labels = match (kind, ckpt.spec.head) {
            (ObjectiveKind::CrossEntropy, HeadKind::Classifier(classes)) => {
                let mut rng = streams.stream("audit-labels");
                (0..t).map(|_| rng.random_range(0..classes as u32)).collect()
            }
            (ObjectiveKind::CrossEntropy, HeadKind::Prediction) => {
                return Err(Error::Mismatch(
                    "`ce` checkpoint carries a prediction head".into(),
                ));
            }
            _ => Vec::new(),
        };
        let mode = match kind {
            ObjectiveKind::Apc | ObjectiveKind::BiApc => Mode::Pretrain,
            _ => Mode::Full,
        };
        Ok(Self { input, clean, mask, labels, objective, mode })
    }

    fn target(&self) -> UttTarget<'_, f64> {
        match self.objective.kind {
            ObjectiveKind::Mpc => UttTarget::PredictMasked { clean: &self.clean, mask: &self.mask },
            ObjectiveKind::CrossEntropy => UttTarget::Classify { labels: &self.labels },
            _ => UttTarget::Predict { clean: &self.clean },
        }
    }

    /// Loss, and analytic gradients flattened over trainable coordinates when
    /// asked. Evaluation mode: dropout off, running batch-norm moments.
    fn eval(&self, model: &Model<f64>, want_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let bound = bind(&mut tape, model);
        let batch =
            forward_batch(&mut tape, &bound, &model.spec, &[&self.input], self.mode, false, None)?;
        let loss = batch_objective(&mut tape, &batch.outputs, &[self.target()], &self.objective)?;
        let per_frame = tape.scale(loss.total, 1.0 / loss.frames as f64);
        let loss_val = tape.value(per_frame).data()[0];
        if !want_grad {
            return Ok((loss_val, None));
        }
        let grads = tape.backward(per_frame)?;
        let mut flat = Vec::new();
        for (_, v) in &bound.trainable {
            match grads.get(*v) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, tape.value(*v).numel())),
            }
        }
        Ok((loss_val, Some(flat)))
    }
}

const SPOT_STEP: f64 = 1e-5;
const SPOT_TOL: f64 = 1e-4;

fn gradient_spot_check(
    ckpt: &Checkpoint,
    feats: &[FeatureSequence],
    coords: usize,
    seed: u64,
) -> Result<AuditCheck> {
    let name = "gradient spot check";
    let spot = match SpotObjective::prepare(ckpt, feats, seed) {
        Ok(s) => s,
        Err(e) => return Ok(AuditCheck { name, status: CheckStatus::Fail, detail: e.to_string() }),
    };
    let mut model = ckpt.to_model()?.cast::<f64>();
    if spot.objective.kind == ObjectiveKind::BiApc {
        model.freeze_cross();
    }

    let (_, analytic) = spot.eval(&model, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut theta = gradcheck::read_theta(&model);
    if analytic.len() != theta.len() {
        return Err(Error::Invalid(format!(
            "analytic gradient covers {} coordinates, model exposes {}",
            analytic.len(),
            theta.len()
        )));
    }

    let mut rng = SeedStreams::new(seed).stream("audit-coords");
    let mut picked = BTreeSet::new();
    while picked.len() < coords.min(theta.len()) {
        picked.insert(rng.random_range(0..theta.len()));
    }

    let mut worst: Option<(usize, f64)> = None;
    for &i in &picked {
        let saved = theta[i];
        theta[i] = saved + SPOT_STEP;
        gradcheck::write_theta(&mut model, &theta);
        let (up, _) = spot.eval(&model, false)?;
        theta[i] = saved - SPOT_STEP;
        gradcheck::write_theta(&mut model, &theta);
        let (down, _) = spot.eval(&model, false)?;
        theta[i] = saved;
        gradcheck::write_theta(&mut model, &theta);
        let numeric = (up - down) / (2.0 * SPOT_STEP);
        let err = rel_err(analytic[i], numeric);
        if worst.is_none_or(|(_, w)| err > w) {
            worst = Some((i, err));
        }
    }
    let (worst_i, worst_err) = worst.ok_or_else(|| {
        Error::Invalid("gradient spot check sampled zero coordinates".into())
    })?;
    let (tensor, offset) = gradcheck::locate(&model, worst_i);
    let detail = format!(
        "{} coordinates at 64-bit, max rel err {worst_err:.2e} ({tensor}[{offset}])",
        picked.len()
    );
    let status = if worst_err < SPOT_TOL { CheckStatus::Pass } else { CheckStatus::Fail };
    Ok(AuditCheck { name, status, detail })
}

/// Run every invariant check that applies to `ckpt` against sample features.
/// Blindness applies only to checkpoints trained with a shifted-prediction
/// objective (`apc`, `biapc`); everything else trains in full mode, where no
/// direction is held blind, so the check reports "not applicable".
pub fn audit_checkpoint(
    ckpt: &Checkpoint,
    feats: &[FeatureSequence],
    cfg: &AuditConfig,
) -> Result<AuditReport> {
    if feats.is_empty() {
        return Err(Error::Invalid("audit needs at least one utterance".into()));
    }
    for f in feats {
        if f.dim() != ckpt.spec.input_dim {
            return Err(Error::Mismatch(format!(
                "utterance `{}` has dim {}, checkpoint expects {}",
                f.utterance_id,
                f.dim(),
                ckpt.spec.input_dim
            )));
        }
    }
    let mut model = ckpt.to_model()?;
    let mut checks = Vec::new();

    let shifted_prediction = matches!(ckpt.objective.as_str(), "apc" | "biapc")
        && model.spec.head == HeadKind::Prediction;
    if shifted_prediction {
        // Pretrain-mode forwards demand frozen cross blocks — the very
        // configuration the checkpoint trained under.
        model.freeze_cross();
        checks.push(leakage_check(&model, feats, cfg.trials, cfg.seed));
    } else {
        checks.push(AuditCheck {
            name: "pretrain-mode blindness",
            status: CheckStatus::NotApplicable,
            detail: format!(
                "`{}` checkpoints train in full mode; no direction is held blind",
                ckpt.objective
            ),
        });
    }
    checks.push(frozen_hash_check(ckpt));
    checks.push(gradient_spot_check(ckpt, feats, cfg.spot_coords, cfg.seed)?);
    Ok(AuditReport { checks })
}
