//! Learning-rate schedule and the Adam update with global-norm clipping.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::net::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Hold-then-decay schedule for a 1-based epoch index: the rate stays at
/// `lr0` through `hold` epochs, then decays exponentially so the final epoch
/// lands on `lr0 · lambda` exactly.
pub fn lr_at_epoch(lr0: f64, lambda: f64, epochs: usize, hold: usize, e: usize) -> Result<f64> {
    if e == 0 || e > epochs {
        return Err(Error::Invalid(format!("epoch {e} outside schedule 1..={epochs}")));
    }
    if e <= hold {
        return Ok(lr0);
    }
    let frac = (e - hold) as f64 / (epochs - hold) as f64;
    Ok(lr0 * lambda.powf(frac))
}

/// First and second moment estimates per tensor, plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S: Scalar> {
    step: u64,
    m: BTreeMap<String, Tensor<S>>,
    v: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one Adam step to the named model tensors. Returns the
    /// pre-clipping global gradient norm.
    ///
    /// Gradients must target trainable tensors only — an entry for a frozen
    /// block or an unknown name is an error, as is any non-finite value.
    pub fn step(
        &mut self,
        model: &mut Model<S>,
        grads: &[(String, Tensor<S>)],
        rate: f64,
        clip_norm: f64,
    ) -> Result<f64> {
        let mut sq = 0.0f64;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGrad(name.clone()));
            }
            sq += g.data().iter().map(|&x| x.into_f64() * x.into_f64()).sum::<f64>();
        }
        let norm = sq.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);

        let mut gmap: HashMap<&str, &Tensor<S>> =
            grads.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if gmap.len() != grads.len() {
            return Err(Error::Invalid("duplicate gradient entry".into()));
        }
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut err: Option<Error> = None;
        model.visit_mut(&mut |name, theta, meta| {
            if err.is_some() {
                return;
            }
            let Some(g) = gmap.remove(name) else { return };
            if !meta.trainable {
                err = Some(Error::Invalid(format!("gradient for frozen tensor `{name}`")));
                return;
            }
            if g.shape() != theta.shape() {
                err = Some(Error::ShapeMismatch {
                    op: "adam step",
                    lhs: theta.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = vs.entry(name.to_string()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for i in 0..g.numel() {
                let gi = g.data()[i].into_f64() * scale;
                let mi = ADAM_BETA1 * m.data()[i].into_f64() + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v.data()[i].into_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                m.data_mut()[i] = S::from_f64(mi);
                v.data_mut()[i] = S::from_f64(vi);
                let update = rate * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                let ti = theta.data()[i].into_f64() - update;
                theta.data_mut()[i] = S::from_f64(ti);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(name) = gmap.keys().next() {
            return Err(Error::Invalid(format!("gradient for unknown tensor `{name}`")));
        }
        Ok(norm)
    }
}
