//! Tape-side forward passes for the uni and bidirectional stacks.
//!
//! Minibatches are jagged: each utterance runs through the recurrence at its
//! own length, and batch-norm pools every utterance's frames into one
//! statistics matrix per layer (per direction for bi), so no padding ever
//! enters a loss or a moment estimate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{BatchNormState, HeadKind, Layer, Mode, Model, ModelKind, ModelSpec, BN_EPS};
use crate::scalar::Scalar;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// One direction's LSTM weights as tape values.
#[derive(Debug, Clone, Copy)]
pub struct BoundLstm {
    pub w_in: Value,
    pub w_rec: Value,
    pub bias: Value,
}

/// Batch-norm scale/shift on the tape plus fixed running moments.
#[derive(Debug, Clone)]
pub struct BoundBn<S: Scalar> {
    pub scale: Value,
    pub shift: Value,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

#[derive(Debug, Clone)]
pub enum BoundLayer<S: Scalar> {
    Uni {
        lstm: BoundLstm,
        bn: Option<BoundBn<S>>,
    },
    Bi {
        fwd_same: BoundLstm,
        rev_same: BoundLstm,
        fwd_cross: Option<Value>,
        rev_cross: Option<Value>,
        cross_trainable: bool,
        bn_fwd: Option<BoundBn<S>>,
        bn_rev: Option<BoundBn<S>>,
    },
}

/// A model's tensors registered on a tape. Trainable tensors enter as
/// tracked parameters; frozen cross blocks enter as constants, so no
/// gradient can even be computed for them.
#[derive(Debug)]
pub struct BoundModel<S: Scalar> {
    pub layers: Vec<BoundLayer<S>>,
    pub head_w: Value,
    pub head_bias: Value,
    /// (name, value) for every trainable tensor, in canonical model order.
    pub trainable: Vec<(String, Value)>,
}

pub fn bind<S: Scalar>(tape: &mut Tape<S>, model: &Model<S>) -> BoundModel<S> {
    let mut trainable = Vec::new();
    let bind_lstm = |tape: &mut Tape<S>,
                         trainable: &mut Vec<(String, Value)>,
                         prefix: &str,
                         lstm: &crate::net::LstmLayerParams<S>| {
        let w_in = tape.param(lstm.w_in.clone());
        let w_rec = tape.param(lstm.w_rec.clone());
        let bias = tape.param(lstm.bias.clone());
        trainable.push((format!("{prefix}.W_in"), w_in));
        trainable.push((format!("{prefix}.W_rec"), w_rec));
        trainable.push((format!("{prefix}.bias"), bias));
        BoundLstm { w_in, w_rec, bias }
    };
    let bind_bn = |tape: &mut Tape<S>,
                   trainable: &mut Vec<(String, Value)>,
                   prefix: &str,
                   bn: &BatchNormState<S>| {
        let scale = tape.param(bn.scale.clone());
        let shift = tape.param(bn.shift.clone());
        trainable.push((format!("{prefix}.scale"), scale));
        trainable.push((format!("{prefix}.shift"), shift));
        BoundBn {
            scale,
            shift,
            running_mean: bn.running_mean.clone(),
            running_var: bn.running_var.clone(),
        }
    };

    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let p = format!("layer{}", i + 1);
        match layer {
            Layer::Uni { lstm, bn } => {
                let lstm = bind_lstm(tape, &mut trainable, &p, lstm);
                let bn = bn.as_ref().map(|b| bind_bn(tape, &mut trainable, &format!("{p}.bn"), b));
                layers.push(BoundLayer::Uni { lstm, bn });
            }
            Layer::Bi { blstm, bn_fwd, bn_rev } => {
                let fwd_same = bind_lstm(tape, &mut trainable, &format!("{p}.fwd_same"), &blstm.fwd_same);
                let rev_same = bind_lstm(tape, &mut trainable, &format!("{p}.rev_same"), &blstm.rev_same);
                let bind_cross = |tape: &mut Tape<S>,
                                      trainable: &mut Vec<(String, Value)>,
                                      name: String,
                                      w: &Option<Tensor<S>>| {
                    w.as_ref().map(|w| {
                        if blstm.cross_trainable {
                            let v = tape.param(w.clone());
                            trainable.push((name, v));
                            v
                        } else {
                            tape.constant(w.clone())
                        }
                    })
                };
                let fwd_cross =
                    bind_cross(tape, &mut trainable, format!("{p}.fwd_cross.W"), &blstm.fwd_cross);
                let rev_cross =
                    bind_cross(tape, &mut trainable, format!("{p}.rev_cross.W"), &blstm.rev_cross);
                let bn_fwd = bn_fwd
                    .as_ref()
                    .map(|b| bind_bn(tape, &mut trainable, &format!("{p}.bn_fwd"), b));
                let bn_rev = bn_rev
                    .as_ref()
                    .map(|b| bind_bn(tape, &mut trainable, &format!("{p}.bn_rev"), b));
                layers.push(BoundLayer::Bi {
                    fwd_same,
                    rev_same,
                    fwd_cross,
                    rev_cross,
                    cross_trainable: blstm.cross_trainable,
                    bn_fwd,
                    bn_rev,
                });
            }
        }
    }
    let head_w = tape.param(model.head.w.clone());
    let head_bias = tape.param(model.head.bias.clone());
    trainable.push(("head.W".to_string(), head_w));
    trainable.push(("head.bias".to_string(), head_bias));
    BoundModel { layers, head_w, head_bias, trainable }
}

/// Run the standard LSTM recurrence over a precomputed gate pre-activation
/// sequence `xg` (T×4H, gate order input/forget/cell/output).
fn lstm_steps<S: Scalar>(
    tape: &mut Tape<S>,
    xg: Value,
    w_rec: Value,
    hidden: usize,
    state0: Option<(Value, Value)>,
    reverse: bool,
) -> Result<Value> {
    let t_len = tape.value(xg).rows();
    if tape.value(xg).cols() != 4 * hidden {
        return Err(Error::Invalid(format!(
            "gate pre-activations have {} columns, expected {}",
            tape.value(xg).cols(),
            4 * hidden
        )));
    }
    let (mut h, mut c) = match state0 {
        Some((h0, c0)) => {
            for s in [h0, c0] {
                if tape.value(s).shape() != [1, hidden] {
                    return Err(Error::Invalid(format!(
                        "initial state shape {:?}, expected [1, {hidden}]",
                        tape.value(s).shape()
                    )));
                }
            }
            (h0, c0)
        }
        None => {
            let z = tape.constant(Tensor::zeros(vec![1, hidden]));
            (z, z)
        }
    };
    let mut hs: Vec<Option<Value>> = vec![None; t_len];
    let steps: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in steps {
        let xt = tape.slice_rows(xg, t, 1)?;
        let hr = tape.linear(h, w_rec)?;
        let z = tape.add(xt, hr)?;
        let i_g = tape.slice_cols(z, 0, hidden)?;
        let i_g = tape.sigmoid(i_g);
        let f_g = tape.slice_cols(z, hidden, hidden)?;
        let f_g = tape.sigmoid(f_g);
        let c_g = tape.slice_cols(z, 2 * hidden, hidden)?;
        let c_g = tape.tanh(c_g);
        let o_g = tape.slice_cols(z, 3 * hidden, hidden)?;
        let o_g = tape.sigmoid(o_g);
        let fc = tape.mul(f_g, c)?;
        let ig = tape.mul(i_g, c_g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o_g, tc)?;
        hs[t] = Some(h);
    }
    let ordered: Vec<Value> = hs.into_iter().map(|v| v.expect("every step visited")).collect();
    tape.concat_rows(&ordered)
}

/// One unidirectional LSTM layer over a T×D input. Initial state is zeros
/// unless given as a pair of 1×H values.
pub fn lstm_layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    params: &BoundLstm,
    input: Value,
    hidden: usize,
    state0: Option<(Value, Value)>,
) -> Result<Value> {
    let xg = tape.affine(input, params.w_in, params.bias)?;
    lstm_steps(tape, xg, params.w_rec, hidden, state0, false)
}

/// One partitioned BLSTM layer. In pretrain mode each cell sees only its own
/// direction's stream (the cross contribution is dropped, which equals
/// zeroing it); in full mode cross weights mix the two streams.
pub fn blstm_layer_forward<S: Scalar>(
    tape: &mut Tape<S>,
    layer: &BoundLayer<S>,
    fwd_in: Value,
    rev_in: Value,
    mode: Mode,
    hidden: usize,
) -> Result<(Value, Value)> {
    let BoundLayer::Bi { fwd_same, rev_same, fwd_cross, rev_cross, cross_trainable, .. } = layer
    else {
        return Err(Error::Invalid("blstm_layer_forward on a unidirectional layer".into()));
    };
    if mode == Mode::Pretrain && *cross_trainable && (fwd_cross.is_some() || rev_cross.is_some()) {
        return Err(Error::IllegalInformationExchange(
            "pretrain-mode forward with trainable cross blocks".into(),
        ));
    }
    let mut xg_f = tape.affine(fwd_in, fwd_same.w_in, fwd_same.bias)?;
    let mut xg_r = tape.affine(rev_in, rev_same.w_in, rev_same.bias)?;
    if mode == Mode::Full {
        if let Some(w) = fwd_cross {
            let cross = tape.linear(rev_in, *w)?;
            xg_f = tape.add(xg_f, cross)?;
        }
        if let Some(w) = rev_cross {
            let cross = tape.linear(fwd_in, *w)?;
            xg_r = tape.add(xg_r, cross)?;
        }
    }
    let fh = lstm_steps(tape, xg_f, fwd_same.w_rec, hidden, None, false)?;
    let rh = lstm_steps(tape, xg_r, rev_same.w_rec, hidden, None, true)?;
    Ok((fh, rh))
}

/// Output of the stack for one utterance.
#[derive(Debug, Clone, Copy)]
pub enum UttOutput {
    /// Feature-space predictions from the shared head: forward stream always,
    /// reverse stream for bi models.
    Prediction { y_fwd: Value, y_rev: Option<Value> },
    /// Per-frame class logits.
    Logits(Value),
}

/// Batch moments observed by one layer's batch-norm during a train-mode
/// forward; the trainer folds them into the running estimates.
#[derive(Debug, Clone)]
pub enum LayerStats<S: Scalar> {
    Inactive,
    Uni {
        mean: Tensor<S>,
        var: Tensor<S>,
    },
    Bi {
        fwd: (Tensor<S>, Tensor<S>),
        rev: (Tensor<S>, Tensor<S>),
    },
}

#[derive(Debug)]
pub struct BatchForward<S: Scalar> {
    pub outputs: Vec<UttOutput>,
    pub bn_stats: Vec<LayerStats<S>>,
}

/// Forward a jagged minibatch of utterances through the whole stack.
pub fn forward_batch<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel<S>,
    spec: &ModelSpec,
    inputs: &[&Tensor<S>],
    mode: Mode,
    train: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchForward<S>> {
    if inputs.is_empty() {
        return Err(Error::Invalid("forward_batch on an empty batch".into()));
    }
    for x in inputs {
        if x.rank() != 2 || x.cols() != spec.input_dim || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "features",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows().max(1), spec.input_dim],
            });
        }
    }
    if mode == Mode::Pretrain && !matches!(spec.head, HeadKind::Prediction) {
        return Err(Error::Mismatch("pretrain mode requires a prediction head".into()));
    }
    let drops = train && spec.dropout > 0.0;
    if drops && dropout_rng.is_none() {
        return Err(Error::Invalid("train-mode forward with dropout needs an RNG".into()));
    }

    let h = spec.hidden;
    let mut fwd: Vec<Value> = inputs.iter().map(|x| tape.constant((*x).clone())).collect();
    // Layer 1 of a bi stack reads the same feature nodes in both directions.
    let mut rev: Vec<Value> = fwd.clone();
    let mut bn_stats = Vec::with_capacity(bound.layers.len());

    for layer in &bound.layers {
        match layer {
            BoundLayer::Uni { lstm, bn } => {
                let mut hs = Vec::with_capacity(fwd.len());
                for &x in &fwd {
                    hs.push(lstm_layer_forward(tape, lstm, x, h, None)?);
                }
                let (hs, stats) =
                    post_layer(tape, hs, bn.as_ref(), spec, train, dropout_rng.as_deref_mut())?;
                bn_stats.push(match stats {
                    Some((mean, var)) => LayerStats::Uni { mean, var },
                    None => LayerStats::Inactive,
                });
                fwd = hs;
            }
            BoundLayer::Bi { bn_fwd, bn_rev, .. } => {
                let mut fhs = Vec::with_capacity(fwd.len());
                let mut rhs = Vec::with_capacity(fwd.len());
                for (&f, &r) in fwd.iter().zip(&rev) {
                    let (fh, rh) = blstm_layer_forward(tape, layer, f, r, mode, h)?;
                    fhs.push(fh);
                    rhs.push(rh);
                }
                let (fhs, fstats) =
                    post_layer(tape, fhs, bn_fwd.as_ref(), spec, train, dropout_rng.as_deref_mut())?;
                let (rhs, rstats) =
                    post_layer(tape, rhs, bn_rev.as_ref(), spec, train, dropout_rng.as_deref_mut())?;
                bn_stats.push(match (fstats, rstats) {
                    (Some(f), Some(r)) => LayerStats::Bi { fwd: f, rev: r },
                    _ => LayerStats::Inactive,
                });
                fwd = fhs;
                rev = rhs;
            }
        }
    }

    let mut outputs = Vec::with_capacity(inputs.len());
    for u in 0..inputs.len() {
        let out = match spec.head {
            HeadKind::Prediction => {
                let y_fwd = tape.affine(fwd[u], bound.head_w, bound.head_bias)?;
                let y_rev = match spec.kind {
                    ModelKind::Bi => Some(tape.affine(rev[u], bound.head_w, bound.head_bias)?),
                    ModelKind::Uni => None,
                };
                UttOutput::Prediction { y_fwd, y_rev }
            }
            HeadKind::Classifier(_) => {
                let top = match spec.kind {
                    ModelKind::Uni => fwd[u],
                    ModelKind::Bi => tape.concat_cols(fwd[u], rev[u])?,
                };
                UttOutput::Logits(tape.affine(top, bound.head_w, bound.head_bias)?)
            }
        };
        outputs.push(out);
    }
    Ok(BatchForward { outputs, bn_stats })
}

/// Single-utterance convenience wrapper around [`forward_batch`].
pub fn stack_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundModel<S>,
    spec: &ModelSpec,
    features: &Tensor<S>,
    mode: Mode,
    train: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<UttOutput> {
    let mut batch = forward_batch(tape, bound, spec, &[features], mode, train, dropout_rng)?;
    Ok(batch.outputs.pop().expect("one utterance in, one out"))
}

/// Batch-norm and dropout over one direction's layer outputs: pool every
/// utterance's frames, normalize/mask once, slice back apart.
fn post_layer<S: Scalar>(
    tape: &mut Tape<S>,
    hs: Vec<Value>,
    bn: Option<&BoundBn<S>>,
    spec: &ModelSpec,
    train: bool,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Vec<Value>, Option<(Tensor<S>, Tensor<S>)>)> {
    let drops = train && spec.dropout > 0.0;
    if bn.is_none() && !drops {
        return Ok((hs, None));
    }
    let lengths: Vec<usize> = hs.iter().map(|&v| tape.value(v).rows()).collect();
    let mut pooled = if hs.len() == 1 { hs[0] } else { tape.concat_rows(&hs)? };
    let mut stats = None;
    if let Some(bn) = bn {
        if train {
            let (out, mean, var) = tape.batch_norm_train(pooled, bn.scale, bn.shift, BN_EPS)?;
            pooled = out;
            stats = Some((mean, var));
        } else {
            pooled = tape.batch_norm_eval(
                pooled,
                bn.scale,
                bn.shift,
                &bn.running_mean,
                &bn.running_var,
                BN_EPS,
            )?;
        }
    }
    if drops {
        let rng = dropout_rng.expect("checked by forward_batch");
        let t = tape.value(pooled);
        let mask = dropout_mask(rng, t.rows(), t.cols(), spec.dropout);
        pooled = tape.mul_mask(pooled, mask)?;
    }
    if lengths.len() == 1 {
        return Ok((vec![pooled], stats));
    }
    let mut parts = Vec::with_capacity(lengths.len());
    let mut start = 0;
    for len in lengths {
        parts.push(tape.slice_rows(pooled, start, len)?);
        start += len;
    }
    Ok((parts, stats))
}

/// Inverted dropout: kept entries scaled by 1/keep so eval needs no scaling.
fn dropout_mask<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Tensor<S> {
    let keep = 1.0 - rate;
    let inv = S::from_f64(1.0 / keep);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < keep { inv } else { S::zero() })
        .collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

/// Fold a train-mode forward's batch moments into the model's running
/// estimates.
pub fn absorb_bn_stats<S: Scalar>(model: &mut Model<S>, stats: &[LayerStats<S>]) {
    for (layer, stat) in model.layers.iter_mut().zip(stats) {
        match (layer, stat) {
            (Layer::Uni { bn: Some(bn), .. }, LayerStats::Uni { mean, var }) => {
                bn.absorb(mean, var);
            }
            (Layer::Bi { bn_fwd, bn_rev, .. }, LayerStats::Bi { fwd, rev }) => {
                if let Some(bn) = bn_fwd {
                    bn.absorb(&fwd.0, &fwd.1);
                }
                if let Some(bn) = bn_rev {
                    bn.absorb(&rev.0, &rev.1);
                }
            }
            _ => {}
        }
    }
}
