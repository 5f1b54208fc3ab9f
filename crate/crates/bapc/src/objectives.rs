//! Training objectives: supervised cross-entropy, forward predictive coding,
//! its bidirectional twin, and masked reconstruction.
//!
//! The predictive losses are L1 over every feature dimension. With shift `n`
//! and a T-frame utterance, the forward term sums |x_{t+n} − y_t| for
//! t = 1..T−n and the reverse term sums |x_{t−n} − y_t| for t = n+1..T;
//! frames with no valid target are excluded rather than padded, so their
//! predictions carry exactly zero gradient. Masked reconstruction zeroes a
//! random subset of input frames and scores L1 only at the masked positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Per-frame class targets for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentLabels {
    pub utterance_id: String,
    pub labels: Vec<u32>,
}

impl AlignmentLabels {
    pub fn new(utterance_id: impl Into<String>, labels: Vec<u32>) -> Self {
        Self { utterance_id: utterance_id.into(), labels }
    }

    /// Check length agreement with the paired features and the class bound.
    pub fn validate_against(&self, features: &FeatureSequence, classes: usize) -> Result<()> {
        if self.labels.len() != features.num_frames() {
            return Err(Error::Mismatch(format!(
                "utterance `{}`: {} labels vs {} frames",
                self.utterance_id,
                self.labels.len(),
                features.num_frames()
            )));
        }
        for &l in &self.labels {
            if l as usize >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    CrossEntropy,
    Apc,
    BiApc,
    Mpc,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::CrossEntropy => "ce",
            ObjectiveKind::Apc => "apc",
            ObjectiveKind::BiApc => "biapc",
            ObjectiveKind::Mpc => "mpc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(ObjectiveKind::CrossEntropy),
            "apc" => Ok(ObjectiveKind::Apc),
            "biapc" => Ok(ObjectiveKind::BiApc),
            "mpc" => Ok(ObjectiveKind::Mpc),
            _ => Err(Error::Config(format!(
                "unknown objective `{s}` (expected ce, apc, biapc, or mpc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Prediction shift in frames for apc/biapc.
    pub shift_n: usize,
    /// Fraction of frames zeroed for mpc.
    pub mask_ratio: f64,
    /// Forward/reverse term weights for biapc.
    pub direction_weights: (f64, f64),
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        Self {
            kind,
            shift_n: 2,
            mask_ratio: 0.15,
            direction_weights: (0.5, 0.5),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift_n == 0 {
            return Err(Error::Invalid("shift must be at least 1 frame".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Invalid(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        let (a, b) = self.direction_weights;
        if !(a.is_finite() && b.is_finite() && a >= 0.0 && b >= 0.0) {
            return Err(Error::Invalid(format!("bad direction weights ({a}, {b})")));
        }
        Ok(())
    }

    /// Frames that actually produce loss terms for a T-frame utterance.
    /// The count is what minibatch losses are normalized by.
    pub fn contributing_frames(&self, t: usize, masked: Option<usize>) -> usize {
        match self.kind {
            ObjectiveKind::CrossEntropy => t,
            ObjectiveKind::Apc | ObjectiveKind::BiApc => t.saturating_sub(self.shift_n),
            ObjectiveKind::Mpc => masked.unwrap_or(0),
        }
    }
}

/// Summed cross-entropy over frames; `mean_frames` divides by T for
/// rate-comparable magnitudes.
pub fn ce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Value,
    labels: &[u32],
    mean_frames: bool,
) -> Result<Value> {
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    if mean_frames && !labels.is_empty() {
        Ok(tape.scale(loss, 1.0 / labels.len() as f64))
    } else {
        Ok(loss)
    }
}

fn check_pred_shape<S: Scalar>(tape: &Tape<S>, y: Value, x: &Tensor<S>, n: usize) -> Result<usize> {
    let t = x.rows();
    if tape.value(y).shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "predictive loss",
            lhs: tape.value(y).shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if t <= n {
        return Err(Error::SequenceShorterThanShift { t, n });
    }
    Ok(t)
}

fn rows_of<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let cols = x.cols();
    let data = x.data()[start * cols..(start + len) * cols].to_vec();
    Tensor::matrix(len, cols, data).expect("shape")
}

/// Σ_{t=1}^{T−n} |x_{t+n} − y_t|: predict `n` frames ahead, scored from the
/// first T−n predictions only.
pub fn apc_loss<S: Scalar>(tape: &mut Tape<S>, y: Value, x: &Tensor<S>, n: usize) -> Result<Value> {
    let t = check_pred_shape(tape, y, x, n)?;
    let y_used = tape.slice_rows(y, 0, t - n)?;
    let targets = tape.constant(rows_of(x, n, t - n));
    let diff = tape.sub(targets, y_used)?;
    let a = tape.abs(diff);
    Ok(tape.sum(a))
}

/// Weighted two-direction predictive loss: the forward stream predicts
/// `n` ahead, the reverse stream predicts `n` behind.
pub fn biapc_loss<S: Scalar>(
    tape: &mut Tape<S>,
    y_fwd: Value,
    y_rev: Value,
    x: &Tensor<S>,
    n: usize,
    weights: (f64, f64),
) -> Result<Value> {
    let t = check_pred_shape(tape, y_fwd, x, n)?;
    check_pred_shape(tape, y_rev, x, n)?;
    let fwd_term = apc_loss(tape, y_fwd, x, n)?;
    // Reverse: predictions at t = n+1..T target x_{t−n} = rows 1..T−n.
    let y_used = tape.slice_rows(y_rev, n, t - n)?;
    let targets = tape.constant(rows_of(x, 0, t - n));
    let diff = tape.sub(targets, y_used)?;
    let a = tape.abs(diff);
    let rev_term = tape.sum(a);
    let wf = tape.scale(fwd_term, weights.0);
    let wr = tape.scale(rev_term, weights.1);
    tape.add(wf, wr)
}

/// Zero out a random subset of frames. Each frame is masked independently
/// with probability `ratio`; if none got masked, one uniform-random frame is
/// forced so the loss is never empty.
pub fn mpc_mask<S: Scalar>(
    x: &Tensor<S>,
    ratio: f64,
    rng: &mut impl Rng,
) -> Result<(Tensor<S>, Vec<bool>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let t = x.rows();
    let mut mask: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < ratio).collect();
    if !mask.iter().any(|&m| m) {
        mask[rng.random_range(0..t)] = true;
    }
    let mut masked = x.clone();
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for v in &mut masked.data_mut()[r * x.cols()..(r + 1) * x.cols()] {
                *v = S::zero();
            }
        }
    }
    Ok((masked, mask))
}

/// Σ over masked t of |x_t − y_t|; unmasked predictions contribute nothing.
pub fn mpc_loss<S: Scalar>(
    tape: &mut Tape<S>,
    y: Value,
    x: &Tensor<S>,
    mask: &[bool],
) -> Result<Value> {
    if tape.value(y).shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked reconstruction loss",
            lhs: tape.value(y).shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    if mask.len() != x.rows() {
        return Err(Error::Mismatch(format!(
            "mask length {} vs {} frames",
            mask.len(),
            x.rows()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    let d = x.cols();
    let mut mask_matrix = Tensor::zeros(vec![x.rows(), d]);
    for (r, &m) in mask.iter().enumerate() {
        if m {
            for v in &mut mask_matrix.data_mut()[r * d..(r + 1) * d] {
                *v = S::one();
            }
        }
    }
    let targets = tape.constant(x.clone());
    let diff = tape.sub(targets, y)?;
    let a = tape.abs(diff);
    let masked = tape.mul_mask(a, mask_matrix)?;
    Ok(tape.sum(masked))
}
