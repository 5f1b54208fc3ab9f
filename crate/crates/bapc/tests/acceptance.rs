//! Acceptance gate: one test per verification criterion, each printing a
//! single pass/fail line (run with `--nocapture` to see every line).
//!
//! Criteria 3, 7, and 8 share a matrix of desk-scale experiments — two
//! pre-training arms plus six fine-tuning arms per seed, five seeds — built
//! once behind a `OnceLock` and reused by every test that needs it. The
//! matrix takes roughly half an hour of CPU time; everything else is
//! seconds.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use bapc::audit::{audit_checkpoint, leakage_trial, AuditConfig};
use bapc::checkpoint::Checkpoint;
use bapc::cli;
use bapc::datagen::{generate_corpus, SyntheticSpec};
use bapc::eval::evaluate;
use bapc::features::{extract_logmel, frame_signal, AudioBuffer, FeaturizerConfig, LOG_FLOOR};
use bapc::gradcheck::{check_case, standard_cases};
use bapc::net::forward::{bind, stack_forward, UttOutput};
use bapc::net::{HeadKind, Mode, Model, ModelKind, ModelSpec};
use bapc::objectives::{apc_loss, biapc_loss, ObjectiveConfig, ObjectiveKind};
use bapc::rng::SeedStreams;
use bapc::tape::Tape;
use bapc::tensor::Tensor;
use bapc::trainer::{
    average_checkpoints, finetune, lr_at_epoch, pretrain, transfer_uni_to_bi, TrainConfig,
};

fn report(n: usize, label: &str, pass: bool, detail: &str) {
    let status = if pass { "pass" } else { "FAIL" };
    println!("criterion {n:2} ({label}): {status} — {detail}");
    assert!(pass, "criterion {n} ({label}) failed: {detail}");
}

// --------------------------------------------------------------------------
// Shared experiment matrix (criteria 3, 7, 8)
// --------------------------------------------------------------------------

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CLASSES: usize = 5;
const INPUT_DIM: usize = 16;
const ARM_BUDGET_SECS: f64 = 300.0;

fn model_spec(kind: ModelKind, hidden: usize) -> ModelSpec {
    ModelSpec {
        kind,
        num_layers: 2,
        hidden,
        input_dim: INPUT_DIM,
        dropout: 0.0,
        batchnorm: false,
        head: HeadKind::Prediction,
    }
}

fn pretrain_cfg(obj: ObjectiveKind, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::pretrain_defaults(ObjectiveConfig::new(obj), seed);
    cfg.lr0 = 1e-2;
    cfg.batch_size = 2;
    cfg.epochs = 32;
    cfg.hold_epochs = 12;
    cfg.lambda = 0.1;
    cfg
}

fn finetune_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::finetune_defaults(seed);
    cfg.lr0 = 2e-3;
    cfg.batch_size = 2;
    cfg.epochs = 16;
    cfg.hold_epochs = 6;
    cfg.lambda = 0.1;
    cfg
}

/// Smallest uni hidden size whose trainable parameter count in the
/// fine-tuning configuration meets or exceeds the bi model's.
fn matched_uni_hidden(bi: &ModelSpec) -> usize {
    let count = |spec: ModelSpec| {
        Model::<f32>::init(spec, &mut SeedStreams::new(0).stream("count"))
            .unwrap()
            .trainable_parameters()
    };
    let target = count(bi.clone());
    (bi.hidden..)
        .find(|&h| count(ModelSpec { kind: ModelKind::Uni, hidden: h, ..bi.clone() }) >= target)
        .unwrap()
}

struct SeedOutcome {
    uni_first: f64,
    uni_last: f64,
    uni_secs: f64,
    bi_first: f64,
    bi_last: f64,
    bi_secs: f64,
    bi_epochs: usize,
    /// Cross-direction tensors of the averaged final checkpoint are
    /// bit-identical to the freshly initialized model's.
    cross_bit_identical: bool,
    /// The audit pathway (stored init hashes et al.) signs the run off.
    audit_passed: bool,
    // Mean test frame accuracy of each fine-tuning arm.
    bi_random: f64,
    bi_biapc: f64,
    bi_apcfwd: f64,
    uni_random: f64,
    uni_apc: f64,
    uni_matched: f64,
}

fn run_seed(seed: u64) -> SeedOutcome {
    let bi_spec = model_spec(ModelKind::Bi, 48);
    let uni_spec = model_spec(ModelKind::Uni, 48);
    let matched_h = matched_uni_hidden(&ModelSpec {
        head: HeadKind::Classifier(CLASSES),
        ..bi_spec.clone()
    });
    let uni_matched_spec = model_spec(ModelKind::Uni, matched_h);

    let (feats, labels) = generate_corpus(&SyntheticSpec::default_benchmark(1000 + seed)).unwrap();
    let train = &feats[..200];
    // Low-resource supervision: the labeled subset is 10% of the train split.
    let labeled_f = &feats[..20];
    let labeled_l = &labels[..20];
    let test_f = &feats[200..];
    let test_l = &labels[200..];

    let streams = SeedStreams::new(seed);

    let t = Instant::now();
    let uni_model =
        Model::<f32>::init(uni_spec.clone(), &mut streams.stream("pretrain-init")).unwrap();
    let uni_run = pretrain(uni_model, train, &pretrain_cfg(ObjectiveKind::Apc, seed)).unwrap();
    let uni_secs = t.elapsed().as_secs_f64();
    let uni_final = average_checkpoints(&uni_run.checkpoints, 3).unwrap();

    let t = Instant::now();
    let bi_init =
        Model::<f32>::init(bi_spec.clone(), &mut streams.stream("pretrain-init")).unwrap();
    let bi_model = bi_init.clone();
    let bi_run = pretrain(bi_model, train, &pretrain_cfg(ObjectiveKind::BiApc, seed)).unwrap();
    let bi_secs = t.elapsed().as_secs_f64();
    let bi_final = average_checkpoints(&bi_run.checkpoints, 3).unwrap();

    // Criterion 3 evidence: every cross tensor of the averaged final
    // checkpoint must still carry the bits it was born with.
    let cross_bit_identical = bi_init.cross_tensor_names().iter().all(|name| {
        let before = bi_init.tensor(name).unwrap();
        let after = bi_final.tensor(name).unwrap();
        before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let audit_passed = audit_checkpoint(&bi_final, test_f, &AuditConfig::default())
        .unwrap()
        .passed();

    let apcfwd_model = transfer_uni_to_bi(&uni_final, &bi_spec, seed).unwrap();
    let apcfwd = Checkpoint::from_model(&apcfwd_model, 0, "biapc", seed, BTreeMap::new());

    let accuracy = |base: &ModelSpec, init: Option<&Checkpoint>| -> f64 {
        let run = finetune(base, CLASSES, init, labeled_f, labeled_l, &finetune_cfg(seed), false)
            .unwrap();
        let fin = average_checkpoints(&run.checkpoints, 3).unwrap();
        evaluate(&fin.to_model().unwrap(), test_f, test_l).unwrap().accuracy
    };

    SeedOutcome {
        uni_first: uni_run.log.first().unwrap().mean_loss,
        uni_last: uni_run.log.last().unwrap().mean_loss,
        uni_secs,
        bi_first: bi_run.log.first().unwrap().mean_loss,
        bi_last: bi_run.log.last().unwrap().mean_loss,
        bi_secs,
        bi_epochs: bi_run.log.len(),
        cross_bit_identical,
        audit_passed,
        bi_random: accuracy(&bi_spec, None),
        bi_biapc: accuracy(&bi_spec, Some(&bi_final)),
        bi_apcfwd: accuracy(&bi_spec, Some(&apcfwd)),
        uni_random: accuracy(&uni_spec, None),
        uni_apc: accuracy(&uni_spec, Some(&uni_final)),
        uni_matched: accuracy(&uni_matched_spec, None),
    }
}

fn experiments() -> &'static [SeedOutcome] {
    static CELL: OnceLock<Vec<SeedOutcome>> = OnceLock::new();
    CELL.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// --------------------------------------------------------------------------
// Criteria
// --------------------------------------------------------------------------

#[test]
fn c01_gradient_correctness() {
    let t = Instant::now();
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    let mut coords = 0usize;
    let mut failures = Vec::new();
    for case in standard_cases(2024) {
        let rep = check_case(&case, 1e-5).unwrap();
        worst = worst.max(rep.max_rel_err);
        coords += rep.coords;
        if !rep.passes(tol) {
            failures.push(format!("{} ({:.2e})", rep.name, rep.max_rel_err));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "{coords} coordinates across every objective, max rel err {worst:.2e}, {secs:.1}s{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    );
}

#[test]
fn c02_leakage_invariance() {
    let mut rng = SeedStreams::new(77).stream("acceptance-leakage");
    let mut trials = 0usize;
    let mut failures = 0usize;
    for model_idx in 0..30u64 {
        let kind = if model_idx % 2 == 0 { ModelKind::Bi } else { ModelKind::Uni };
        let spec = ModelSpec {
            kind,
            num_layers: 1 + (model_idx as usize / 2) % 2,
            hidden: [4, 8][(model_idx as usize / 4) % 2],
            input_dim: [3, 5][(model_idx as usize / 8) % 2],
            dropout: if model_idx % 3 == 0 { 0.2 } else { 0.0 },
            batchnorm: model_idx % 5 == 0,
            head: HeadKind::Prediction,
        };
        let mut model =
            Model::<f32>::init(spec, &mut SeedStreams::new(model_idx).stream("leak-init"))
                .unwrap();
        model.freeze_cross();
        for _ in 0..4 {
            let t = rng.random_range(8..48usize);
            let d = model.spec.input_dim;
            let vals: Vec<f32> = (0..t * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
            let x = Tensor::matrix(t, d, vals).unwrap();
            let cut = rng.random_range(1..t);
            let trial = leakage_trial(&model, &x, cut, &mut rng).unwrap();
            trials += 1;
            if !trial.ok() {
                failures += 1;
            }
        }
    }
    let pass = trials >= 100 && failures == 0;
    report(
        2,
        "leakage invariance",
        pass,
        &format!("{trials} random (model, input, cut) triples, {failures} leaks"),
    );
}

#[test]
fn c03_frozen_cross_blocks() {
    let ex = experiments();
    let all_identical = ex.iter().all(|o| o.cross_bit_identical);
    let all_audited = ex.iter().all(|o| o.audit_passed);
    let epochs_ok = ex.iter().all(|o| o.bi_epochs >= 8);
    report(
        3,
        "frozen-parameter guarantee",
        all_identical && all_audited && epochs_ok,
        &format!(
            "{} runs of {} epochs: cross blocks bit-identical {}, audit sign-off {}",
            ex.len(),
            ex[0].bi_epochs,
            all_identical,
            all_audited
        ),
    );
}

#[test]
fn c04_loss_value_oracles() {
    // Hand-evaluated scalar sequences (mirrors the objectives module docs).
    let col = |vals: &[f64]| Tensor::matrix(vals.len(), 1, vals.to_vec()).unwrap();
    let mut tape = Tape::<f64>::new();
    let x = col(&[1.0, 2.0, 3.0, 4.0]);
    let y0 = tape.constant(Tensor::zeros(vec![4, 1]));
    let apc = apc_loss(&mut tape, y0, &x, 2).unwrap();
    let apc_ok = tape.value(apc).data()[0] == 7.0;
    let bi = biapc_loss(&mut tape, y0, y0, &x, 2, (0.5, 0.5)).unwrap();
    let bi_ok = tape.value(bi).data()[0] == 5.0;

    // Degeneracy at machine precision on a non-trivial random case.
    let mut rng = SeedStreams::new(4).stream("oracle");
    let vals: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
    let xr = Tensor::matrix(8, 3, vals).unwrap();
    let yf_vals: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
    let yr_vals: Vec<f64> = (0..24).map(|_| rng.random_range(-2.0..2.0)).collect();
    let yf = tape.constant(Tensor::matrix(8, 3, yf_vals).unwrap());
    let yr = tape.constant(Tensor::matrix(8, 3, yr_vals).unwrap());
    let plain = apc_loss(&mut tape, yf, &xr, 2).unwrap();
    let fwd_only = biapc_loss(&mut tape, yf, yr, &xr, 2, (1.0, 0.0)).unwrap();
    let degeneracy_ok =
        tape.value(plain).data()[0].to_bits() == tape.value(fwd_only).data()[0].to_bits();

    report(
        4,
        "loss-value oracles",
        apc_ok && bi_ok && degeneracy_ok,
        &format!(
            "one-direction 7.0: {apc_ok}, two-direction 5.0: {bi_ok}, \
             forward-only weights collapse bit-exactly: {degeneracy_ok}"
        ),
    );
}

#[test]
fn c05_schedule_fidelity() {
    let rel = |got: f64, want: f64| ((got - want) / want).abs();
    // Pre-training: 0.001 held two epochs, decayed to 1e-4 at epoch 8.
    let pre = |e| lr_at_epoch(1e-3, 0.1, 8, 2, e).unwrap();
    let pre_ok = pre(1) == 1e-3
        && pre(2) == 1e-3
        && rel(pre(8), 1e-4) < 1e-12
        && (1..8).all(|e| pre(e + 1) <= pre(e));
    // Fine-tuning: 2e-4 decayed to 2e-6 over 15 epochs.
    let fin = |e| lr_at_epoch(2e-4, 1e-2, 15, 2, e).unwrap();
    let fin_ok =
        fin(1) == 2e-4 && rel(fin(15), 2e-6) < 1e-12 && (1..15).all(|e| fin(e + 1) <= fin(e));
    // The defaults used by the trainer commands encode exactly these shapes.
    let dp = TrainConfig::pretrain_defaults(ObjectiveConfig::new(ObjectiveKind::Apc), 0);
    let df = TrainConfig::finetune_defaults(0);
    let defaults_ok = (dp.lr0, dp.hold_epochs, dp.epochs, dp.lambda) == (1e-3, 2, 8, 0.1)
        && (df.lr0, df.epochs, df.lambda) == (2e-4, 15, 1e-2);
    report(
        5,
        "schedule fidelity",
        pre_ok && fin_ok && defaults_ok,
        &format!(
            "pre-train endpoints {:.0e}/{:.0e}, fine-tune endpoints {:.0e}/{:.0e}, defaults {}",
            pre(1),
            pre(8),
            fin(1),
            fin(15),
            defaults_ok
        ),
    );
}

#[test]
fn c06_checkpoint_averaging() {
    let spec = model_spec(ModelKind::Bi, 6);
    let ckpts: Vec<Checkpoint> = (0..4)
        .map(|i| {
            let m = Model::<f32>::init(spec.clone(), &mut SeedStreams::new(i).stream("avg"))
                .unwrap();
            Checkpoint::from_model(&m, i as usize, "biapc", i, BTreeMap::new())
        })
        .collect();

    let avg = average_checkpoints(&ckpts, 3).unwrap();
    let sel = &ckpts[1..4];
    let mut mean_ok = true;
    for (i, (name, t)) in avg.tensors.iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            let want =
                (sel.iter().map(|c| c.tensors[i].1.data()[j] as f64).sum::<f64>() / 3.0) as f32;
            if v.to_bits() != want.to_bits() {
                mean_ok = false;
                eprintln!("tensor {name} coordinate {j}: {v} vs {want}");
            }
        }
    }

    let last = average_checkpoints(&ckpts, 1).unwrap();
    let identity_ok = last.tensors.iter().zip(&ckpts[3].tensors).all(|((an, at), (bn, bt))| {
        an == bn && at.data().iter().zip(bt.data()).all(|(a, b)| a.to_bits() == b.to_bits())
    });

    report(
        6,
        "checkpoint averaging",
        mean_ok && identity_ok,
        &format!("window of 3 equals the elementwise mean: {mean_ok}, window of 1 is identity: {identity_ok}"),
    );
}

#[test]
fn c07_pretraining_learns() {
    let ex = experiments();
    let mut pass = true;
    let mut details = Vec::new();
    for (seed, o) in SEEDS.iter().zip(ex) {
        let uni_ok = o.uni_last < 0.5 * o.uni_first && o.uni_secs < ARM_BUDGET_SECS;
        let bi_ok = o.bi_last < 0.5 * o.bi_first && o.bi_secs < ARM_BUDGET_SECS;
        pass &= uni_ok && bi_ok;
        details.push(format!(
            "seed {seed}: uni {:.2}→{:.2} ({:.0}s), bi {:.2}→{:.2} ({:.0}s)",
            o.uni_first, o.uni_last, o.uni_secs, o.bi_first, o.bi_last, o.bi_secs
        ));
    }
    report(7, "pre-training learns", pass, &details.join("; "));
}

#[test]
fn c08_transfer_helps() {
    let ex = experiments();
    let bi_random = mean(ex.iter().map(|o| o.bi_random));
    let bi_biapc = mean(ex.iter().map(|o| o.bi_biapc));
    let bi_apcfwd = mean(ex.iter().map(|o| o.bi_apcfwd));
    let uni_random = mean(ex.iter().map(|o| o.uni_random));
    let uni_apc = mean(ex.iter().map(|o| o.uni_apc));
    let pass = bi_biapc > bi_random && uni_apc > uni_random && bi_biapc >= bi_apcfwd;
    report(
        8,
        "transfer helps",
        pass,
        &format!(
            "mean accuracy over {} seeds at 10% labels — bi: two-direction init {bi_biapc:.3} vs \
             random {bi_random:.3}, forward-only init {bi_apcfwd:.3}; uni: pretrained {uni_apc:.3} \
             vs random {uni_random:.3}",
            ex.len()
        ),
    );
}

/// Companion invariant to criterion 8: trained from scratch in full mode,
/// the bi model outclassifies a uni model of matched parameter count.
#[test]
fn c08b_bidirectional_beats_matched_unidirectional() {
    let ex = experiments();
    let bi_random = mean(ex.iter().map(|o| o.bi_random));
    let uni_matched = mean(ex.iter().map(|o| o.uni_matched));
    report(
        8,
        "addendum: bi from scratch beats matched uni",
        bi_random > uni_matched,
        &format!("mean accuracy bi {bi_random:.3} vs parameter-matched uni {uni_matched:.3}"),
    );
}

#[test]
fn c09_equivalence_oracles() {
    // (a) Full mode with zeroed cross weights reproduces pretrain mode
    // exactly, at 32-bit, through the entire stack.
    let spec = model_spec(ModelKind::Bi, 5);
    let mut model =
        Model::<f32>::init(spec.clone(), &mut SeedStreams::new(21).stream("equiv")).unwrap();
    model.visit_mut(&mut |name, t, _| {
        if name.contains("cross") {
            *t = Tensor::zeros(t.shape().to_vec());
        }
    });
    let mut rng = SeedStreams::new(22).stream("equiv-data");
    let vals: Vec<f32> = (0..9 * INPUT_DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let x = Tensor::matrix(9, INPUT_DIM, vals).unwrap();
    let run = |model: &Model<f32>, mode: Mode| {
        let mut model = model.clone();
        if mode == Mode::Pretrain {
            model.freeze_cross();
        }
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, &model);
        let out = stack_forward(&mut tape, &bound, &model.spec, &x, mode, false, None).unwrap();
        let UttOutput::Prediction { y_fwd, y_rev } = out else { unreachable!() };
        (tape.value(y_fwd).clone(), tape.value(y_rev.unwrap()).clone())
    };
    let (f_full, r_full) = run(&model, Mode::Full);
    let (f_pre, r_pre) = run(&model, Mode::Pretrain);
    let zero_cross_diff = f_full.max_abs_diff(&f_pre).max(r_full.max_abs_diff(&r_pre));

    // (b) A bi model initialized from a uni checkpoint reproduces the uni
    // model's forward-stream predictions.
    let uni_spec = model_spec(ModelKind::Uni, 5);
    let uni =
        Model::<f32>::init(uni_spec.clone(), &mut SeedStreams::new(23).stream("equiv")).unwrap();
    let uni_ckpt = Checkpoint::from_model(&uni, 0, "apc", 23, BTreeMap::new());
    let mut transferred = transfer_uni_to_bi(&uni_ckpt, &spec, 99).unwrap();
    transferred.freeze_cross();
    let uni_y = {
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, &uni);
        let out =
            stack_forward(&mut tape, &bound, &uni_spec, &x, Mode::Pretrain, false, None).unwrap();
        let UttOutput::Prediction { y_fwd, .. } = out else { unreachable!() };
        tape.value(y_fwd).clone()
    };
    let bi_y = {
        let mut tape = Tape::<f32>::new();
        let bound = bind(&mut tape, &transferred);
        let out =
            stack_forward(&mut tape, &bound, &spec, &x, Mode::Pretrain, false, None).unwrap();
        let UttOutput::Prediction { y_fwd, .. } = out else { unreachable!() };
        tape.value(y_fwd).clone()
    };
    let transfer_diff = uni_y.max_abs_diff(&bi_y);

    let pass = zero_cross_diff == 0.0 && transfer_diff < 1e-5;
    report(
        9,
        "equivalence oracles",
        pass,
        &format!(
            "zeroed-cross full vs pretrain max abs diff {zero_cross_diff:.1e}, \
             uni→bi forward stream max abs diff {transfer_diff:.1e}"
        ),
    );
}

#[test]
fn c10_featurizer_contract() {
    // (a) Frame-count formula on 1000 random geometries. A 1 kHz rate maps
    // milliseconds one-to-one onto samples.
    let mut rng = SeedStreams::new(10).stream("framing");
    let mut formula_ok = true;
    for _ in 0..1000 {
        let l = rng.random_range(2..400usize);
        let s = rng.random_range(1..200usize);
        let n = rng.random_range(l..4000usize);
        let audio = AudioBuffer::new(
            (0..n).map(|k| ((k as f64) * 0.61).sin() * 0.3).collect(),
            1000,
        )
        .unwrap();
        let frames = frame_signal(&audio, l as f64, s as f64).unwrap();
        formula_ok &= frames.rows() == 1 + (n - l) / s;
    }

    // (b) Silence hits the log floor in every bin.
    let cfg = FeaturizerConfig::default();
    let silence = AudioBuffer::new(vec![0.0; 8000], 16000).unwrap();
    let silent = extract_logmel(&silence, "silence", &cfg).unwrap();
    let floor = LOG_FLOOR.ln();
    let silence_ok = silent.frames.data().iter().all(|&v| v == floor);

    // (c) Doubling the amplitude lifts log power by ln 4 wherever the
    // quieter signal already clears the floor.
    let tone = |amp: f64| {
        let samples: Vec<f64> = (0..8000)
            .map(|k| amp * (2.0 * std::f64::consts::PI * 300.0 * k as f64 / 16000.0).sin())
            .collect();
        let audio = AudioBuffer::new(samples, 16000).unwrap();
        extract_logmel(&audio, "tone", &cfg).unwrap()
    };
    let quiet = tone(0.2);
    let loud = tone(0.4);
    let ln4 = 4.0f64.ln();
    let mut checked = 0usize;
    let mut doubling_ok = true;
    for (a, b) in quiet.frames.data().iter().zip(loud.frames.data()) {
        if *a > floor + 1.0 {
            checked += 1;
            doubling_ok &= (b - a - ln4).abs() < 1e-6;
        }
    }

    let pass = formula_ok && silence_ok && doubling_ok && checked > 100;
    report(
        10,
        "featurizer contract",
        pass,
        &format!(
            "1000 frame-count cases: {formula_ok}, silence at log floor: {silence_ok}, \
             ln4 shift on {checked} bins: {doubling_ok}"
        ),
    );
}

#[test]
fn c11_bit_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let gen_conf = tmp.path().join("gen.conf");
    std::fs::write(
        &gen_conf,
        "utterances = 10\ntrain_utterances = 8\nlabeled_fraction = 0.5\n\
         t_min = 24\nt_max = 40\ndim = 4\nclasses = 3\ndwell_mean = 6.0\n",
    )
    .unwrap();
    let pre_conf = tmp.path().join("pre.conf");
    std::fs::write(
        &pre_conf,
        "kind = uni\nlayers = 1\nhidden = 8\ndropout = 0.0\nbatchnorm = false\nepochs = 3\n",
    )
    .unwrap();
    let fin_conf = tmp.path().join("fin.conf");
    std::fs::write(&fin_conf, "epochs = 3\nbatch_size = 2\n").unwrap();

    let run_pipeline = |root: &std::path::Path| {
        let data = root.join("data");
        let pre = root.join("pre");
        let fin = root.join("fin");
        let eval_dir = root.join("eval");
        let arg = |p: &std::path::Path| p.to_str().unwrap().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec![
                "bapc".into(), "gen".into(),
                "--out-dir".into(), arg(&data),
                "--config".into(), arg(&gen_conf),
                "--seed".into(), "9".into(),
            ],
            vec![
                "bapc".into(), "pretrain".into(),
                "--features".into(), arg(&data.join("train.farc")),
                "--out-dir".into(), arg(&pre),
                "--config".into(), arg(&pre_conf),
                "--objective".into(), "apc".into(),
                "--seed".into(), "9".into(),
            ],
            vec![
                "bapc".into(), "finetune".into(),
                "--features".into(), arg(&data.join("labeled.farc")),
                "--labels".into(), arg(&data.join("labeled.larc")),
                "--out-dir".into(), arg(&fin),
                "--config".into(), arg(&fin_conf),
                "--init".into(), arg(&pre.join("final.bapc")),
                "--seed".into(), "9".into(),
            ],
            vec![
                "bapc".into(), "eval".into(),
                "--checkpoint".into(), arg(&fin.join("final.bapc")),
                "--features".into(), arg(&data.join("test.farc")),
                "--labels".into(), arg(&data.join("test.larc")),
                "--out-dir".into(), arg(&eval_dir),
            ],
        ];
        for step in steps {
            assert_eq!(cli::run(step.clone()), 0, "pipeline step failed: {step:?}");
        }
    };

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run_pipeline(&a);
    run_pipeline(&b);

    // Every checkpoint, archive, metrics file, and effective config must
    // match byte for byte. The epoch log is excluded: it records wall time.
    let mut compared = 0usize;
    let mut mismatched = Vec::new();
    let mut walk = |sub: &str| {
        let dir_a = a.join(sub);
        let mut names: Vec<String> = std::fs::read_dir(&dir_a)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| !n.ends_with(".log"))
            .collect();
        names.sort();
        for n in names {
            let bytes_a = std::fs::read(dir_a.join(&n)).unwrap();
            let bytes_b = std::fs::read(b.join(sub).join(&n)).unwrap();
            compared += 1;
            if bytes_a != bytes_b {
                mismatched.push(format!("{sub}/{n}"));
            }
        }
    };
    walk("data");
    walk("pre");
    walk("fin");
    walk("eval");

    let pass = mismatched.is_empty() && compared >= 12;
    report(
        11,
        "bit reproducibility",
        pass,
        &format!(
            "{compared} files from two generate→pretrain→finetune→eval runs{}",
            if mismatched.is_empty() {
                " identical".to_string()
            } else {
                format!("; mismatched: {}", mismatched.join(", "))
            }
        ),
    );
}
