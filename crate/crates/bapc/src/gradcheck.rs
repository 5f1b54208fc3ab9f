//! Finite-difference oracle for reverse-mode gradients.
//!
//! Training runs in 32-bit, but finite differences drown in rounding noise
//! there, so every check in this module builds the model in 64-bit. The
//! model-level harness flattens all trainable tensors into one parameter
//! vector, evaluates the batch loss as a plain function of that vector, and
//! compares central differences against one analytic backward pass,
//! coordinate by coordinate.

use rand::Rng;

use crate::error::{Error, Result};
use crate::net::forward::{bind, forward_batch};
use crate::net::{HeadKind, Mode, Model, ModelKind, ModelSpec};
use crate::objectives::{mpc_mask, ObjectiveConfig, ObjectiveKind};
use crate::rng::SeedStreams;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{batch_objective, UttTarget};

/// Central differences (f(θ+h·eᵢ) − f(θ−h·eᵢ)) / 2h, one coordinate at a time.
///
/// `f` must be a deterministic function of `theta` alone — no dropout, no
/// sampling — or the differences measure noise instead of slope.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step {h} must be positive")));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let up = f(&probe)?;
        probe[i] = theta[i] - h;
        let down = f(&probe)?;
        probe[i] = theta[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// |a − n| / max(1, |a|, |n|): relative where gradients are large, absolute
/// where they are tiny.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs())
}

/// One model-plus-objective scenario for the checker.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub spec: ModelSpec,
    pub objective: ObjectiveConfig,
    /// Lengths of the synthetic utterances in the batch (jagged on purpose).
    pub seq_lens: Vec<usize>,
    pub seed: u64,
}

/// Outcome of checking every trainable coordinate of one case.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    /// Tensor name and flat offset of the worst coordinate, with its
    /// analytic and numeric values.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub(crate) fn read_theta(model: &Model<f64>) -> Vec<f64> {
    let mut theta = Vec::new();
    model.visit(&mut |_, t, meta| {
        if meta.trainable {
            theta.extend_from_slice(t.data());
        }
    });
    theta
}

pub(crate) fn write_theta(model: &mut Model<f64>, theta: &[f64]) {
    let mut off = 0;
    model.visit_mut(&mut |_, t, meta| {
        if meta.trainable {
            let n = t.numel();
            t.data_mut().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
    });
    debug_assert_eq!(off, theta.len(), "theta length drifted from the model");
}

/// Tensor name and in-tensor offset for a flat coordinate index.
pub(crate) fn locate(model: &Model<f64>, index: usize) -> (String, usize) {
    let mut off = 0;
    let mut found = (String::from("?"), index);
    model.visit(&mut |name, t, meta| {
        if meta.trainable {
            let n = t.numel();
            if index >= off && index < off + n {
                found = (name.to_string(), index - off);
            }
            off += n;
        }
    });
    found
}

struct CaseData {
    /// Clean feature sequences, one per utterance.
    inputs: Vec<Tensor<f64>>,
    /// What the network actually sees (masked copies for mpc).
    net_inputs: Vec<Tensor<f64>>,
    labels: Vec<Vec<u32>>,
    masks: Vec<Vec<bool>>,
    mode: Mode,
    frames: usize,
}

fn prepare(case: &GradCheckCase) -> Result<CaseData> {
    case.spec.validate()?;
    case.objective.validate()?;
    let streams = SeedStreams::new(case.seed);
    let mut data_rng = streams.stream("gradcheck-data");

    let d = case.spec.input_dim;
    let mut inputs = Vec::new();
    let mut net_inputs = Vec::new();
    let mut labels = Vec::new();
    let mut masks = Vec::new();
    let mut frames = 0usize;
    for &t in &case.seq_lens {
        let x = Tensor::from_fn(t, d, |_, _| data_rng.random_range(-1.0..1.0));
        match case.objective.kind {
            ObjectiveKind::CrossEntropy => {
                let classes = match case.spec.head {
                    HeadKind::Classifier(c) => c,
                    HeadKind::Prediction => {
                        return Err(Error::Invalid(
                            "cross-entropy check needs a classifier head".into(),
                        ));
                    }
                };
                labels.push((0..t).map(|_| data_rng.random_range(0..classes as u32)).collect());
                net_inputs.push(x.clone());
            }
            ObjectiveKind::Mpc => {
                let (masked, mask) = mpc_mask(&x, case.objective.mask_ratio, &mut data_rng)?;
                frames += mask.iter().filter(|&&m| m).count();
                net_inputs.push(masked);
                masks.push(mask);
            }
            ObjectiveKind::Apc | ObjectiveKind::BiApc => {
                if t <= case.objective.shift_n {
                    return Err(Error::SequenceShorterThanShift {
                        t,
                        n: case.objective.shift_n,
                    });
                }
                net_inputs.push(x.clone());
            }
        }
        frames += case.objective.contributing_frames(t, None);
        inputs.push(x);
    }

    let mode = match case.objective.kind {
        // Frozen cross blocks stay out of the graph while both directions
        // pretrain side by side.
        ObjectiveKind::BiApc => Mode::Pretrain,
        ObjectiveKind::Apc => Mode::Pretrain,
        ObjectiveKind::CrossEntropy | ObjectiveKind::Mpc => Mode::Full,
    };
    Ok(CaseData { inputs, net_inputs, labels, masks, mode, frames: frames.max(1) })
}

/// Batch loss (summed over utterances, divided by contributing frames —
/// exactly the trainer's per-batch quantity) plus the flat analytic gradient
/// when requested.
fn eval_loss(
    model: &Model<f64>,
    case: &GradCheckCase,
    data: &CaseData,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let mut tape = Tape::<f64>::new();
    let bound = bind(&mut tape, model);
    let refs: Vec<&Tensor<f64>> = data.net_inputs.iter().collect();
    let batch = forward_batch(&mut tape, &bound, &model.spec, &refs, data.mode, true, None)?;

    let targets: Vec<UttTarget<'_, f64>> = data
        .inputs
        .iter()
        .enumerate()
        .map(|(u, x)| match case.objective.kind {
            ObjectiveKind::Mpc => UttTarget::PredictMasked { clean: x, mask: &data.masks[u] },
            ObjectiveKind::CrossEntropy => UttTarget::Classify { labels: &data.labels[u] },
            _ => UttTarget::Predict { clean: x },
        })
        .collect();
    let loss = batch_objective(&mut tape, &batch.outputs, &targets, &case.objective)?;
    if loss.frames != data.frames {
        return Err(Error::Invalid(format!(
            "objective scored {} frames, case prepared {}",
            loss.frames, data.frames
        )));
    }
    let per_frame = tape.scale(loss.total, 1.0 / data.frames as f64);
    let loss_val = tape.value(per_frame).data()[0];

    if !want_grad {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(per_frame)?;
    let mut flat = Vec::new();
    for (_, v) in &bound.trainable {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            // Parameter never touched the loss (possible for bn of a
            // disabled feature); its gradient is identically zero.
            None => flat.extend(std::iter::repeat(0.0).take(tape.value(*v).numel())),
        }
    }
    Ok((loss_val, Some(flat)))
}

/// Compare analytic and central-difference gradients for every trainable
/// coordinate of `case`.
pub fn check_case(case: &GradCheckCase, h: f64) -> Result<GradCheckReport> {
    let streams = SeedStreams::new(case.seed);
    let mut init_rng = streams.stream("gradcheck-init");
    let mut model = Model::<f64>::init(case.spec.clone(), &mut init_rng)?;
    if case.objective.kind == ObjectiveKind::BiApc {
        model.freeze_cross();
    }
    let data = prepare(case)?;

    let theta = read_theta(&model);
    let (_, analytic) = eval_loss(&model, case, &data, true)?;
    let analytic = analytic.expect("gradient requested");
    if analytic.len() != theta.len() {
        return Err(Error::Invalid(format!(
            "analytic gradient has {} coordinates for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }

    let mut probe_model = model.clone();
    let numeric = finite_diff_grad(
        |t| {
            write_theta(&mut probe_model, t);
            eval_loss(&probe_model, case, &data, false).map(|(l, _)| l)
        },
        &theta,
        h,
    )?;

    let mut max_rel = 0.0;
    let mut worst = None;
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = rel_err(a, n);
        if e >= max_rel {
            max_rel = e;
            let (name, off) = locate(&model, i);
            worst = Some((name, off, a, n));
        }
    }
    Ok(GradCheckReport { name: case.name.clone(), coords: theta.len(), max_rel_err: max_rel, worst })
}

/// The scenarios the `gradcheck` command and the acceptance suite run:
/// small random models covering every objective, both model kinds,
/// batch-norm on and off, frozen and trainable cross blocks, and a
/// shortest-legal-sequence edge case.
pub fn standard_cases(seed: u64) -> Vec<GradCheckCase> {
    let uni = |layers: usize, hidden: usize, d: usize, bn: bool, head: HeadKind| ModelSpec {
        kind: ModelKind::Uni,
        num_layers: layers,
        hidden,
        input_dim: d,
        dropout: 0.0,
        batchnorm: bn,
        head,
    };
    let bi = |layers: usize, hidden: usize, d: usize, bn: bool, head: HeadKind| ModelSpec {
        kind: ModelKind::Bi,
        num_layers: layers,
        hidden,
        input_dim: d,
        dropout: 0.0,
        batchnorm: bn,
        head,
    };
    vec![
        GradCheckCase {
            name: "uni-predictive-1layer".into(),
            spec: uni(1, 4, 3, true, HeadKind::Prediction),
            objective: ObjectiveConfig::new(ObjectiveKind::Apc),
            seq_lens: vec![6, 5],
            seed,
        },
        GradCheckCase {
            name: "uni-predictive-2layer".into(),
            spec: uni(2, 8, 16, false, HeadKind::Prediction),
            objective: ObjectiveConfig::new(ObjectiveKind::Apc),
            seq_lens: vec![12],
            seed: seed ^ 1,
        },
        GradCheckCase {
            name: "uni-classifier".into(),
            spec: uni(2, 4, 3, true, HeadKind::Classifier(5)),
            objective: ObjectiveConfig::new(ObjectiveKind::CrossEntropy),
            seq_lens: vec![6, 5],
            seed: seed ^ 2,
        },
        GradCheckCase {
            name: "bi-predictive-frozen-cross".into(),
            spec: bi(2, 4, 4, true, HeadKind::Prediction),
            objective: ObjectiveConfig::new(ObjectiveKind::BiApc),
            seq_lens: vec![8, 6],
            seed: seed ^ 3,
        },
        GradCheckCase {
            name: "bi-classifier-trainable-cross".into(),
            spec: bi(2, 4, 3, false, HeadKind::Classifier(4)),
            objective: ObjectiveConfig::new(ObjectiveKind::CrossEntropy),
            seq_lens: vec![6],
            seed: seed ^ 4,
        },
        GradCheckCase {
            name: "bi-masked-reconstruction".into(),
            spec: bi(2, 4, 4, false, HeadKind::Prediction),
            objective: ObjectiveConfig::new(ObjectiveKind::Mpc),
            seq_lens: vec![8, 7],
            seed: seed ^ 5,
        },
        GradCheckCase {
            name: "uni-predictive-shortest".into(),
            // T = n + 1: exactly one frame contributes to the shifted loss.
            spec: uni(1, 4, 3, false, HeadKind::Prediction),
            objective: ObjectiveConfig::new(ObjectiveKind::Apc),
            seq_lens: vec![3],
            seed: seed ^ 6,
        },
    ]
}
