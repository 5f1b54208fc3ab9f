//! Recurrent acoustic models: the uni-LSTM stack and the partitioned BLSTM.
//!
//! A bidirectional layer is split into four blocks: `fwd_same` and `rev_same`
//! carry information within one temporal direction; `fwd_cross` and
//! `rev_cross` connect the previous layer's opposite stream into a cell.
//! Pre-training mode severs the cross connections (their activations are
//! zeroed and the blocks must be frozen), which is what lets each direction
//! train on its own predictive objective without seeing the other's context.
//! Full mode is a standard BLSTM. Layer 1 has no cross blocks — both
//! directions read the raw features.

pub mod forward;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance floor inside every batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Running-moment retention: new = momentum·old + (1−momentum)·batch.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Uni,
    Bi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Linear map from a top hidden stream back to feature space, shared by
    /// both directions; used only for pre-training.
    Prediction,
    /// Per-frame class logits over the given alphabet size.
    Classifier(usize),
}

/// How a bidirectional stack treats its cross-direction connections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cross contributions zeroed; requires frozen cross blocks.
    Pretrain,
    /// Standard BLSTM.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_layers: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub input_dim: usize,
    pub dropout: f64,
    pub batchnorm: bool,
    pub head: HeadKind,
}

impl ModelSpec {
    /// Production-scale unidirectional shape: 4 layers of 800 units.
    pub fn default_uni(input_dim: usize, head: HeadKind) -> Self {
        Self {
            kind: ModelKind::Uni,
            num_layers: 4,
            hidden: 800,
            input_dim,
            dropout: 0.2,
            batchnorm: true,
            head,
        }
    }

    /// Production-scale bidirectional shape: 4 layers of 512 units per
    /// direction.
    pub fn default_bi(input_dim: usize, head: HeadKind) -> Self {
        Self {
            kind: ModelKind::Bi,
            num_layers: 4,
            hidden: 512,
            input_dim,
            dropout: 0.2,
            batchnorm: true,
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden == 0 || self.input_dim == 0 {
            return Err(Error::Invalid(format!(
                "model needs positive layers/hidden/input_dim, got {}/{}/{}",
                self.num_layers, self.hidden, self.input_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let HeadKind::Classifier(c) = self.head {
            if c < 2 {
                return Err(Error::Invalid(format!("classifier needs ≥ 2 classes, got {c}")));
            }
        }
        Ok(())
    }

    /// Width of the vector the head consumes: top hidden state (uni) or the
    /// two concatenated direction streams (bi classifier).
    pub fn head_input_dim(&self) -> usize {
        match (self.kind, self.head) {
            (ModelKind::Bi, HeadKind::Classifier(_)) => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    pub fn head_output_dim(&self) -> usize {
        match self.head {
            HeadKind::Prediction => self.input_dim,
            HeadKind::Classifier(c) => c,
        }
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.hidden
        }
    }
}

/// One direction's LSTM weights. Gate order inside the 4H axis is fixed:
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams<S: Scalar> {
    /// 4H×D_in.
    pub w_in: Tensor<S>,
    /// 4H×H.
    pub w_rec: Tensor<S>,
    /// 4H; forget-gate rows start at 1.0.
    pub bias: Tensor<S>,
}

/// One bidirectional layer. `fwd_cross`/`rev_cross` (4H×H) feed the previous
/// layer's opposite stream into a cell and are `None` at layer 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BlstmLayerParams<S: Scalar> {
    pub fwd_same: LstmLayerParams<S>,
    pub rev_same: LstmLayerParams<S>,
    pub fwd_cross: Option<Tensor<S>>,
    pub rev_cross: Option<Tensor<S>>,
    /// When false the cross blocks are excluded from every update; pretrain
    /// mode refuses to run unless this is false.
    pub cross_trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<S: Scalar> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> BatchNormState<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Tensor::full(vec![dim], S::one()),
            shift: Tensor::zeros(vec![dim]),
            // (0, 1) moments make eval legal before any update.
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::full(vec![dim], S::one()),
        }
    }

    /// Fold one batch's moments into the running estimates.
    pub fn absorb(&mut self, batch_mean: &Tensor<S>, batch_var: &Tensor<S>) {
        let keep = S::from_f64(BN_MOMENTUM);
        let take = S::from_f64(1.0 - BN_MOMENTUM);
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + take * b;
        }
    }

    pub fn reset_moments(&mut self) {
        self.running_mean = Tensor::zeros(vec![self.running_mean.numel()]);
        self.running_var = Tensor::full(vec![self.running_var.numel()], S::one());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<S: Scalar> {
    Uni {
        lstm: LstmLayerParams<S>,
        bn: Option<BatchNormState<S>>,
    },
    Bi {
        blstm: BlstmLayerParams<S>,
        bn_fwd: Option<BatchNormState<S>>,
        bn_rev: Option<BatchNormState<S>>,
    },
}

/// The output linear map; its role (prediction vs classifier) lives in the
/// spec's `head` field.
#[derive(Debug, Clone, PartialEq)]
pub struct Head<S: Scalar> {
    /// out_dim × head_input_dim.
    pub w: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub layers: Vec<Layer<S>>,
    pub head: Head<S>,
}

/// Classification of one named tensor inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorMeta {
    /// Receives optimizer updates. False for frozen cross blocks and
    /// batch-norm running moments.
    pub trainable: bool,
    /// Batch-norm running moment (updated by momentum, not by gradient).
    pub bn_stat: bool,
}

const WEIGHT: TensorMeta = TensorMeta { trainable: true, bn_stat: false };
const FROZEN: TensorMeta = TensorMeta { trainable: false, bn_stat: false };
const BN_STAT: TensorMeta = TensorMeta { trainable: false, bn_stat: true };

fn uniform<S: Scalar>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn init_lstm_block<S: Scalar>(
    rng: &mut impl Rng,
    hidden: usize,
    input_dim: usize,
) -> LstmLayerParams<S> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let w_in = uniform(rng, 4 * hidden, input_dim, bound);
    let w_rec = uniform(rng, 4 * hidden, hidden, bound);
    let mut bias = Tensor::zeros(vec![4 * hidden]);
    // Forget gate opens at 1.0 so early cell state survives long sequences.
    for b in &mut bias.data_mut()[hidden..2 * hidden] {
        *b = S::one();
    }
    LstmLayerParams { w_in, w_rec, bias }
}

impl<S: Scalar> Model<S> {
    /// Fresh random model. Weights are uniform in ±1/√H (heads use their own
    /// fan-in); biases zero except the forget gates; cross blocks start
    /// trainable — pre-training freezes them explicitly.
    pub fn init(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in 0..spec.num_layers {
            let d_in = spec.layer_input_dim(l);
            let layer = match spec.kind {
                ModelKind::Uni => Layer::Uni {
                    lstm: init_lstm_block(rng, h, d_in),
                    bn: spec.batchnorm.then(|| BatchNormState::new(h)),
                },
                ModelKind::Bi => {
                    let fwd_same = init_lstm_block(rng, h, d_in);
                    let rev_same = init_lstm_block(rng, h, d_in);
                    let bound = 1.0 / (h as f64).sqrt();
                    let (fwd_cross, rev_cross) = if l == 0 {
                        (None, None)
                    } else {
                        (
                            Some(uniform(rng, 4 * h, h, bound)),
                            Some(uniform(rng, 4 * h, h, bound)),
                        )
                    };
                    Layer::Bi {
                        blstm: BlstmLayerParams {
                            fwd_same,
                            rev_same,
                            fwd_cross,
                            rev_cross,
                            cross_trainable: true,
                        },
                        bn_fwd: spec.batchnorm.then(|| BatchNormState::new(h)),
                        bn_rev: spec.batchnorm.then(|| BatchNormState::new(h)),
                    }
                }
            };
            layers.push(layer);
        }
        let fan_in = spec.head_input_dim();
        let out = spec.head_output_dim();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let head = Head {
            w: uniform(rng, out, fan_in, bound),
            bias: Tensor::zeros(vec![out]),
        };
        Ok(Self { spec, layers, head })
    }

    pub fn freeze_cross(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Bi { blstm, .. } = layer {
                blstm.cross_trainable = false;
            }
        }
    }

    pub fn unfreeze_cross(&mut self) {
        for layer in &mut self.layers {
            if let Layer::Bi { blstm, .. } = layer {
                blstm.cross_trainable = true;
            }
        }
    }

    /// Names of the cross-direction weight tensors, in model order.
    pub fn cross_tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Bi { blstm, .. } = layer {
                if blstm.fwd_cross.is_some() {
                    names.push(format!("layer{}.fwd_cross.W", i + 1));
                    names.push(format!("layer{}.rev_cross.W", i + 1));
                }
            }
        }
        names
    }

    /// Visit every tensor with its stable name. The order is fixed and is
    /// the canonical order for checkpoints and optimizer state.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<S>, TensorMeta)) {
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{}", i + 1);
            match layer {
                Layer::Uni { lstm, bn } => {
                    visit_lstm(&p, lstm, f);
                    if let Some(bn) = bn {
                        visit_bn(&format!("{p}.bn"), bn, f);
                    }
                }
                Layer::Bi { blstm, bn_fwd, bn_rev } => {
                    visit_lstm(&format!("{p}.fwd_same"), &blstm.fwd_same, f);
                    visit_lstm(&format!("{p}.rev_same"), &blstm.rev_same, f);
                    let cross_meta = if blstm.cross_trainable { WEIGHT } else { FROZEN };
                    if let Some(w) = &blstm.fwd_cross {
                        f(&format!("{p}.fwd_cross.W"), w, cross_meta);
                    }
                    if let Some(w) = &blstm.rev_cross {
                        f(&format!("{p}.rev_cross.W"), w, cross_meta);
                    }
                    if let Some(bn) = bn_fwd {
                        visit_bn(&format!("{p}.bn_fwd"), bn, f);
                    }
                    if let Some(bn) = bn_rev {
                        visit_bn(&format!("{p}.bn_rev"), bn, f);
                    }
                }
            }
        }
        f("head.W", &self.head.w, WEIGHT);
        f("head.bias", &self.head.bias, WEIGHT);
    }

    /// Mutable twin of [`Model::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>, TensorMeta)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{}", i + 1);
            match layer {
                Layer::Uni { lstm, bn } => {
                    visit_lstm_mut(&p, lstm, f);
                    if let Some(bn) = bn {
                        visit_bn_mut(&format!("{p}.bn"), bn, f);
                    }
                }
                Layer::Bi { blstm, bn_fwd, bn_rev } => {
                    visit_lstm_mut(&format!("{p}.fwd_same"), &mut blstm.fwd_same, f);
                    visit_lstm_mut(&format!("{p}.rev_same"), &mut blstm.rev_same, f);
                    let cross_meta = if blstm.cross_trainable { WEIGHT } else { FROZEN };
                    if let Some(w) = &mut blstm.fwd_cross {
                        f(&format!("{p}.fwd_cross.W"), w, cross_meta);
                    }
                    if let Some(w) = &mut blstm.rev_cross {
                        f(&format!("{p}.rev_cross.W"), w, cross_meta);
                    }
                    if let Some(bn) = bn_fwd {
                        visit_bn_mut(&format!("{p}.bn_fwd"), bn, f);
                    }
                    if let Some(bn) = bn_rev {
                        visit_bn_mut(&format!("{p}.bn_rev"), bn, f);
                    }
                }
            }
        }
        f("head.W", &mut self.head.w, WEIGHT);
        f("head.bias", &mut self.head.bias, WEIGHT);
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t, _| out.push((name.to_string(), t.clone())));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor<S>> {
        let mut found = None;
        self.visit(&mut |n, t, _| {
            if n == name {
                found = Some(t.clone());
            }
        });
        found
    }

    /// Overwrite tensors by name. `skip` filters source entries (e.g. the
    /// head when transferring into a different task). Every non-skipped
    /// entry must land, with matching shape.
    pub fn load_tensors(
        &mut self,
        entries: &[(String, Tensor<S>)],
        skip: impl Fn(&str) -> bool,
    ) -> Result<()> {
        use std::collections::HashMap;
        let mut pending: HashMap<&str, &Tensor<S>> = entries
            .iter()
            .filter(|(n, _)| !skip(n))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut err: Option<Error> = None;
        self.visit_mut(&mut |name, t, _| {
            if err.is_some() {
                return;
            }
            if let Some(src) = pending.remove(name) {
                if src.shape() != t.shape() {
                    err = Some(Error::Mismatch(format!(
                        "tensor `{name}`: checkpoint shape {:?} vs model shape {:?}",
                        src.shape(),
                        t.shape()
                    )));
                    return;
                }
                *t = src.clone();
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(name) = pending.keys().next() {
            return Err(Error::Mismatch(format!(
                "checkpoint tensor `{name}` has no place in this model"
            )));
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Model<T> {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Uni { lstm, bn } => Layer::Uni {
                    lstm: cast_lstm(lstm),
                    bn: bn.as_ref().map(cast_bn),
                },
                Layer::Bi { blstm, bn_fwd, bn_rev } => Layer::Bi {
                    blstm: BlstmLayerParams {
                        fwd_same: cast_lstm(&blstm.fwd_same),
                        rev_same: cast_lstm(&blstm.rev_same),
                        fwd_cross: blstm.fwd_cross.as_ref().map(|t| t.cast()),
                        rev_cross: blstm.rev_cross.as_ref().map(|t| t.cast()),
                        cross_trainable: blstm.cross_trainable,
                    },
                    bn_fwd: bn_fwd.as_ref().map(cast_bn),
                    bn_rev: bn_rev.as_ref().map(cast_bn),
                },
            })
            .collect();
        Model {
            spec: self.spec.clone(),
            layers,
            head: Head {
                w: self.head.w.cast(),
                bias: self.head.bias.cast(),
            },
        }
    }

    /// Count of scalar parameters that receive gradients.
    pub fn trainable_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t, meta| {
            if meta.trainable {
                n += t.numel();
            }
        });
        n
    }
}

fn visit_lstm<S: Scalar>(
    prefix: &str,
    lstm: &LstmLayerParams<S>,
    f: &mut dyn FnMut(&str, &Tensor<S>, TensorMeta),
) {
    f(&format!("{prefix}.W_in"), &lstm.w_in, WEIGHT);
    f(&format!("{prefix}.W_rec"), &lstm.w_rec, WEIGHT);
    f(&format!("{prefix}.bias"), &lstm.bias, WEIGHT);
}

fn visit_lstm_mut<S: Scalar>(
    prefix: &str,
    lstm: &mut LstmLayerParams<S>,
    f: &mut dyn FnMut(&str, &mut Tensor<S>, TensorMeta),
) {
    f(&format!("{prefix}.W_in"), &mut lstm.w_in, WEIGHT);
    f(&format!("{prefix}.W_rec"), &mut lstm.w_rec, WEIGHT);
    f(&format!("{prefix}.bias"), &mut lstm.bias, WEIGHT);
}

fn visit_bn<S: Scalar>(
    prefix: &str,
    bn: &BatchNormState<S>,
    f: &mut dyn FnMut(&str, &Tensor<S>, TensorMeta),
) {
    f(&format!("{prefix}.scale"), &bn.scale, WEIGHT);
    f(&format!("{prefix}.shift"), &bn.shift, WEIGHT);
    f(&format!("{prefix}.running_mean"), &bn.running_mean, BN_STAT);
    f(&format!("{prefix}.running_var"), &bn.running_var, BN_STAT);
}

fn visit_bn_mut<S: Scalar>(
    prefix: &str,
    bn: &mut BatchNormState<S>,
    f: &mut dyn FnMut(&str, &mut Tensor<S>, TensorMeta),
) {
    f(&format!("{prefix}.scale"), &mut bn.scale, WEIGHT);
    f(&format!("{prefix}.shift"), &mut bn.shift, WEIGHT);
    f(&format!("{prefix}.running_mean"), &mut bn.running_mean, BN_STAT);
    f(&format!("{prefix}.running_var"), &mut bn.running_var, BN_STAT);
}

fn cast_lstm<S: Scalar, T: Scalar>(l: &LstmLayerParams<S>) -> LstmLayerParams<T> {
    LstmLayerParams {
        w_in: l.w_in.cast(),
        w_rec: l.w_rec.cast(),
        bias: l.bias.cast(),
    }
}

fn cast_bn<S: Scalar, T: Scalar>(b: &BatchNormState<S>) -> BatchNormState<T> {
    BatchNormState {
        scale: b.scale.cast(),
        shift: b.shift.cast(),
        running_mean: b.running_mean.cast(),
        running_var: b.running_var.cast(),
    }
}
