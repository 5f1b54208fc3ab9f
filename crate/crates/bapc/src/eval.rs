//! Frame-level evaluation: run the classifier in eval mode and score
//! argmax predictions against alignment labels.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::net::forward::{bind, stack_forward, UttOutput};
use crate::net::{HeadKind, Mode, Model};
use crate::objectives::AlignmentLabels;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Index of the row maximum; ties break to the first.
fn argmax_row(t: &Tensor<f32>, row: usize) -> u32 {
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for j in 0..t.cols() {
        let v = t.at(row, j);
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best as u32
}

/// Fraction of frames whose logits argmax equals the label, micro-averaged
/// over every frame of every utterance.
pub fn frame_accuracy(logits: &[Tensor<f32>], labels: &[&[u32]]) -> Result<f64> {
    if logits.len() != labels.len() {
        return Err(Error::Mismatch(format!(
            "{} logit tensors vs {} label sequences",
            logits.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut frames = 0usize;
    for (l, y) in logits.iter().zip(labels) {
        if l.rows() != y.len() {
            return Err(Error::Mismatch(format!(
                "{} logit rows vs {} labels",
                l.rows(),
                y.len()
            )));
        }
        for (r, &label) in y.iter().enumerate() {
            if argmax_row(l, r) == label {
                correct += 1;
            }
            frames += 1;
        }
    }
    if frames == 0 {
        return Err(Error::Invalid("no frames to score".into()));
    }
    Ok(correct as f64 / frames as f64)
}

/// Eval-mode per-frame logits for one utterance.
pub fn utterance_logits(model: &Model<f32>, feats: &Tensor<f32>) -> Result<Tensor<f32>> {
    if !matches!(model.spec.head, HeadKind::Classifier(_)) {
        return Err(Error::Invalid("evaluation needs a classifier head".into()));
    }
    let mut tape = Tape::<f32>::new();
    let bound = bind(&mut tape, model);
    match stack_forward(&mut tape, &bound, &model.spec, feats, Mode::Full, false, None)? {
        UttOutput::Logits(v) => Ok(tape.value(v).clone()),
        UttOutput::Prediction { .. } => unreachable!("classifier head checked above"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub correct: usize,
    pub accuracy: f64,
}

/// Score a model over a labeled corpus. Every utterance needs a label row;
/// extra label rows are ignored.
pub fn evaluate(
    model: &Model<f32>,
    corpus: &[FeatureSequence],
    labels: &[AlignmentLabels],
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("evaluation corpus is empty".into()));
    }
    let classes = match model.spec.head {
        HeadKind::Classifier(c) => c,
        HeadKind::Prediction => {
            return Err(Error::Invalid("evaluation needs a classifier head".into()));
        }
    };
    let by_id: HashMap<&str, &AlignmentLabels> =
        labels.iter().map(|l| (l.utterance_id.as_str(), l)).collect();
    let mut correct = 0usize;
    let mut frames = 0usize;
    for f in corpus {
        let l = by_id.get(f.utterance_id.as_str()).ok_or_else(|| {
            Error::Mismatch(format!("no labels for utterance `{}`", f.utterance_id))
        })?;
        l.validate_against(f, classes)?;
        let logits = utterance_logits(model, &f.frames.cast::<f32>())?;
        for (r, &label) in l.labels.iter().enumerate() {
            if argmax_row(&logits, r) == label {
                correct += 1;
            }
            frames += 1;
        }
    }
    Ok(EvalReport { frames, correct, accuracy: correct as f64 / frames as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ModelKind, ModelSpec};
    use crate::rng::SeedStreams;
    use rand::Rng;

    #[test]
    fn perfect_logits_score_one() {
        let labels: Vec<u32> = vec![0, 2, 1, 2];
        let logits = Tensor::from_fn(4, 3, |r, c| {
            if c as u32 == labels[r] { 5.0f32 } else { -1.0 }
        });
        let acc = frame_accuracy(&[logits], &[&labels]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn random_logits_score_near_chance() {
        let streams = SeedStreams::new(42);
        let mut rng = streams.stream("mc");
        let c = 4usize;
        let t = 20_000;
        let labels: Vec<u32> = (0..t).map(|_| rng.random_range(0..c as u32)).collect();
        let logits = Tensor::from_fn(t, c, |_, _| rng.random_range(-1.0f32..1.0));
        let acc = frame_accuracy(&[logits], &[&labels]).unwrap();
        // 3σ binomial band around 1/C.
        let sigma = (0.25 * 0.75 / t as f64).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn accuracy_ignores_monotone_transforms() {
        let streams = SeedStreams::new(43);
        let mut rng = streams.stream("mono");
        let labels: Vec<u32> = (0..50).map(|_| rng.random_range(0..3)).collect();
        let logits = Tensor::from_fn(50, 3, |_, _| rng.random_range(-2.0f32..2.0));
        let squashed = logits.map(|v| (0.5 * v).tanh() * 3.0 + 1.0);
        let a = frame_accuracy(&[logits], &[&labels]).unwrap();
        let b = frame_accuracy(&[squashed], &[&labels]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let logits = Tensor::zeros(vec![3, 2]);
        let labels: Vec<u32> = vec![0, 1];
        assert!(frame_accuracy(&[logits], &[&labels]).is_err());
    }

    #[test]
    fn evaluate_joins_by_utterance_id() {
        let streams = SeedStreams::new(44);
        let spec = ModelSpec {
            kind: ModelKind::Bi,
            num_layers: 1,
            hidden: 3,
            input_dim: 2,
            dropout: 0.0,
            batchnorm: false,
            head: HeadKind::Classifier(3),
        };
        let model = Model::<f32>::init(spec, &mut streams.stream("init")).unwrap();
        let mut rng = streams.stream("data");
        let corpus: Vec<FeatureSequence> = (0..3)
            .map(|i| {
                let frames = Tensor::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
                FeatureSequence::new(format!("u{i}"), frames)
            })
            .collect();
        // Labels supplied out of order, with an extra unused row.
        let mut labels: Vec<AlignmentLabels> = (0..3)
            .rev()
            .map(|i| AlignmentLabels::new(format!("u{i}"), vec![0, 1, 2, 0, 1, 2]))
            .collect();
        labels.push(AlignmentLabels::new("unused", vec![0]));
        let report = evaluate(&model, &corpus, &labels).unwrap();
        assert_eq!(report.frames, 18);
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert_eq!(report.correct as f64 / report.frames as f64, report.accuracy);

        let missing = evaluate(&model, &corpus, &labels[..2].to_vec());
        assert!(missing.is_err());
    }
}
