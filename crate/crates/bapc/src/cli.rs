//! Command-line pipeline driver: `featurize`/`gen` make feature archives,
//! `pretrain` → `finetune` → `eval` run the training loop, `audit` and
//! `gradcheck` verify invariants. Every command is deterministic given its
//! configuration and seed, and the trainer commands write the fully resolved
//! configuration next to their outputs, so any run can be reproduced
//! bit-exactly from its artifacts alone.
//!
//! Exit codes: 0 success (or all checks pass), 1 a verification command found
//! a failure, 2 usage or runtime error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::archive::{
    read_feature_archive, read_label_archive, write_feature_archive, write_label_archive,
};
use crate::audit::{audit_checkpoint, AuditConfig};
use crate::checkpoint::Checkpoint;
use crate::config::ConfigMap;
use crate::datagen::{
    generate_corpus, resonant_coeffs, SyntheticSpec, DEFAULT_LABELED_FRACTION,
    DEFAULT_TRAIN_UTTERANCES,
};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::features::wav::read_wav;
use crate::features::{extract_logmel, FeaturizerConfig};
use crate::gradcheck::{check_case, standard_cases};
use crate::net::{HeadKind, Model, ModelKind, ModelSpec};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::rng::SeedStreams;
use crate::trainer::{
    average_checkpoints, finetune, pretrain, transfer_uni_to_bi, TrainConfig, TrainRun,
};

#[derive(Parser)]
#[command(
    name = "bapc",
    about = "Predictive-coding pre-training for uni- and bidirectional LSTM acoustic models",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a directory of WAV files into a feature archive.
    Featurize {
        /// Directory scanned (non-recursively) for .wav files.
        #[arg(long)]
        wav_dir: PathBuf,
        /// Output feature archive.
        #[arg(long)]
        out: PathBuf,
        /// Analysis window length in milliseconds.
        #[arg(long, default_value_t = 25.0)]
        frame_ms: f64,
        /// Hop between windows in milliseconds.
        #[arg(long, default_value_t = 10.0)]
        shift_ms: f64,
        /// Mel filterbank size (feature dimension).
        #[arg(long, default_value_t = 80)]
        filters: usize,
        /// Lower mel band edge in Hz.
        #[arg(long, default_value_t = 20.0)]
        low_hz: f64,
        /// Upper mel band edge in Hz; defaults to Nyquist.
        #[arg(long)]
        high_hz: Option<f64>,
        /// Pre-emphasis coefficient; 0 disables it.
        #[arg(long, default_value_t = 0.97)]
        pre_emphasis: f64,
        /// Per-utterance mean/variance normalization.
        #[arg(long)]
        mvn: bool,
    },
    /// Generate the synthetic benchmark corpus: train/test feature archives
    /// plus frame-label archives and a labeled training subset.
    Gen {
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised pre-training on a feature archive (no labels read).
    Pretrain {
        /// Feature archive to train on.
        #[arg(long)]
        features: PathBuf,
        /// Output directory for checkpoints, log, and metrics.
        #[arg(long)]
        out_dir: PathBuf,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured objective: apc, biapc, or mpc.
        #[arg(long)]
        objective: Option<String>,
    },
    /// Supervised fine-tuning into a per-frame classifier.
    Finetune {
        /// Feature archive of the labeled subset.
        #[arg(long)]
        features: PathBuf,
        /// Frame-label archive aligned with the features.
        #[arg(long)]
        labels: PathBuf,
        /// Output directory for checkpoints, log, and metrics.
        #[arg(long)]
        out_dir: PathBuf,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Pre-trained checkpoint to warm-start from (same model shape).
        #[arg(long, conflicts_with = "from_uni")]
        init: Option<PathBuf>,
        /// Uni pre-training checkpoint whose forward blocks seed a bi model.
        #[arg(long)]
        from_uni: Option<PathBuf>,
    },
    /// Frame accuracy of a classifier checkpoint on a labeled archive.
    Eval {
        /// Fine-tuned checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature archive to score.
        #[arg(long)]
        features: PathBuf,
        /// Frame labels for the same utterances.
        #[arg(long)]
        labels: PathBuf,
        /// Directory for metrics.txt; omit to only print.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Invariant checks on a checkpoint: pretrain-mode blindness, frozen
    /// cross blocks against recorded init hashes, gradient spot checks.
    Audit {
        /// Checkpoint under audit.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature archive supplying sample inputs.
        #[arg(long)]
        features: PathBuf,
        /// Perturbation trials for the blindness check.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Parameter coordinates sampled by the gradient spot check.
        #[arg(long, default_value_t = 16)]
        spot_coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check analytic gradients against central finite differences at 64-bit
    /// for small models under every objective.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest acceptable relative error per coordinate.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

/// Parse and run. Returns the process exit code instead of exiting, so tests
/// can drive the CLI in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Featurize {
            wav_dir,
            out,
            frame_ms,
            shift_ms,
            filters,
            low_hz,
            high_hz,
            pre_emphasis,
            mvn,
        } => {
            let cfg = FeaturizerConfig {
                frame_length_ms: frame_ms,
                frame_shift_ms: shift_ms,
                num_filters: filters,
                f_low_hz: low_hz,
                f_high_hz: high_hz,
                pre_emphasis: (pre_emphasis != 0.0).then_some(pre_emphasis),
                mean_var_normalize: mvn,
            };
            cmd_featurize(&wav_dir, &out, &cfg)
        }
        Cmd::Gen { out_dir, config, seed } => cmd_gen(&out_dir, config.as_deref(), seed),
        Cmd::Pretrain { features, out_dir, config, seed, objective } => {
            cmd_pretrain(&features, &out_dir, config.as_deref(), seed, objective.as_deref())
        }
        Cmd::Finetune { features, labels, out_dir, config, seed, init, from_uni } => cmd_finetune(
            &features,
            &labels,
            &out_dir,
            config.as_deref(),
            seed,
            init.as_deref(),
            from_uni.as_deref(),
        ),
        Cmd::Eval { checkpoint, features, labels, out_dir } => {
            cmd_eval(&checkpoint, &features, &labels, out_dir.as_deref())
        }
        Cmd::Audit { checkpoint, features, trials, spot_coords, seed } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let feats = read_feature_archive(&features)?;
            let report =
                audit_checkpoint(&ckpt, &feats, &AuditConfig { trials, spot_coords, seed })?;
            print!("{}", report.render());
            Ok(if report.passed() { 0 } else { 1 })
        }
        Cmd::Gradcheck { seed, tol, step } => cmd_gradcheck(seed, tol, step),
    }
}

fn load_map(config: Option<&Path>) -> Result<ConfigMap> {
    match config {
        Some(path) => ConfigMap::from_file(path),
        None => Ok(ConfigMap::new()),
    }
}

/// Flag beats config file beats default; the config key is consumed either
/// way so strict parsing stays honest.
fn resolve<T: std::str::FromStr>(
    map: &mut ConfigMap,
    key: &str,
    flag: Option<T>,
    default: T,
) -> Result<T> {
    let configured = map.take::<T>(key)?;
    Ok(flag.or(configured).unwrap_or(default))
}

fn parse_kind(s: &str) -> Result<ModelKind> {
    match s {
        "uni" => Ok(ModelKind::Uni),
        "bi" => Ok(ModelKind::Bi),
        other => Err(Error::Config(format!("unknown model kind `{other}` (expected uni or bi)"))),
    }
}

fn kind_str(k: ModelKind) -> &'static str {
    match k {
        ModelKind::Uni => "uni",
        ModelKind::Bi => "bi",
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn cmd_featurize(wav_dir: &Path, out: &Path, cfg: &FeaturizerConfig) -> Result<i32> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(wav_dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        })
        .collect();
    // Directory order is filesystem-dependent; sort so reruns are bit-identical.
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no WAV files in `{}`", wav_dir.display())));
    }

    let mut seqs = Vec::new();
    let mut skipped = 0usize;
    for p in &paths {
        let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or("utterance").to_string();
        match read_wav(p).and_then(|audio| extract_logmel(&audio, &id, cfg)) {
            Ok(seq) => seqs.push(seq),
            Err(e) => {
                eprintln!("warning: skipping `{}`: {e}", p.display());
                skipped += 1;
            }
        }
    }
    if seqs.is_empty() {
        return Err(Error::Invalid(format!(
            "all {skipped} WAV files under `{}` failed to featurize",
            wav_dir.display()
        )));
    }
    write_feature_archive(out, &seqs)?;
    let note = if skipped > 0 { format!(" ({skipped} skipped)") } else { String::new() };
    println!("wrote {} utterances to `{}`{note}", seqs.len(), out.display());
    Ok(0)
}

struct GenConfig {
    seed: u64,
    utterances: usize,
    train_utterances: usize,
    labeled_fraction: f64,
    t_min: usize,
    t_max: usize,
    dim: usize,
    classes: usize,
    dwell_mean: f64,
    noise_level: f64,
}

impl GenConfig {
    fn resolve(mut map: ConfigMap, seed_flag: Option<u64>) -> Result<Self> {
        let d = SyntheticSpec::default_benchmark(0);
        let cfg = Self {
            seed: resolve(&mut map, "seed", seed_flag, 0)?,
            utterances: map.take_or("utterances", d.num_utterances)?,
            train_utterances: map.take_or("train_utterances", DEFAULT_TRAIN_UTTERANCES)?,
            labeled_fraction: map.take_or("labeled_fraction", DEFAULT_LABELED_FRACTION)?,
            t_min: map.take_or("t_min", d.t_range.0)?,
            t_max: map.take_or("t_max", d.t_range.1)?,
            dim: map.take_or("dim", d.dim)?,
            classes: map.take_or("classes", d.num_classes)?,
            dwell_mean: map.take_or("dwell_mean", d.dwell_mean)?,
            noise_level: map.take_or("noise_level", d.noise_level)?,
        };
        map.finish()?;
        if cfg.train_utterances == 0 || cfg.train_utterances >= cfg.utterances {
            return Err(Error::Config(format!(
                "train_utterances={} must leave at least one of {} utterances for the test split",
                cfg.train_utterances, cfg.utterances
            )));
        }
        if !(cfg.labeled_fraction > 0.0 && cfg.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled_fraction={} outside (0, 1]",
                cfg.labeled_fraction
            )));
        }
        Ok(cfg)
    }

    fn effective(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("seed", self.seed);
        m.set("utterances", self.utterances);
        m.set("train_utterances", self.train_utterances);
        m.set("labeled_fraction", format!("{:?}", self.labeled_fraction));
        m.set("t_min", self.t_min);
        m.set("t_max", self.t_max);
        m.set("dim", self.dim);
        m.set("classes", self.classes);
        m.set("dwell_mean", format!("{:?}", self.dwell_mean));
        m.set("noise_level", format!("{:?}", self.noise_level));
        m
    }

    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_utterances: self.utterances,
            t_range: (self.t_min, self.t_max),
            dim: self.dim,
            num_classes: self.classes,
            class_coeffs: resonant_coeffs(self.classes),
            dwell_mean: self.dwell_mean,
            noise_level: self.noise_level,
            seed: self.seed,
        }
    }
}

fn cmd_gen(out_dir: &Path, config: Option<&Path>, seed_flag: Option<u64>) -> Result<i32> {
    let cfg = GenConfig::resolve(load_map(config)?, seed_flag)?;
    let (feats, labels) = generate_corpus(&cfg.spec())?;

    let train = &feats[..cfg.train_utterances];
    let test = &feats[cfg.train_utterances..];
    let test_labels = &labels[cfg.train_utterances..];
    // The labeled slice stands in for scarce transcriptions: a small prefix
    // of the training split (utterances are i.i.d., so a prefix is as
    // representative as any subset and keeps reruns trivially identical).
    let labeled_count = ((cfg.train_utterances as f64 * cfg.labeled_fraction).ceil() as usize)
        .clamp(1, cfg.train_utterances);
    let labeled = &feats[..labeled_count];
    let labeled_labels = &labels[..labeled_count];

    std::fs::create_dir_all(out_dir)?;
    write_feature_archive(&out_dir.join("train.farc"), train)?;
    write_feature_archive(&out_dir.join("labeled.farc"), labeled)?;
    write_label_archive(&out_dir.join("labeled.larc"), labeled_labels, cfg.classes)?;
    write_feature_archive(&out_dir.join("test.farc"), test)?;
    write_label_archive(&out_dir.join("test.larc"), test_labels, cfg.classes)?;
    write_text(&out_dir.join("gen.effective.conf"), &cfg.effective().render())?;
    println!(
        "generated {} train / {} test utterances ({} labeled) in `{}`",
        train.len(),
        test.len(),
        labeled_count,
        out_dir.display()
    );
    Ok(0)
}

/// Schedule and optimizer knobs shared by both training commands.
struct ScheduleCfg {
    epochs: usize,
    lr0: f64,
    hold_epochs: usize,
    lambda: f64,
    batch_size: usize,
    clip_norm: f64,
    avg_last_k: usize,
}

impl ScheduleCfg {
    fn resolve(map: &mut ConfigMap, d: &TrainConfig) -> Result<Self> {
        Ok(Self {
            epochs: map.take_or("epochs", d.epochs)?,
            lr0: map.take_or("lr0", d.lr0)?,
            hold_epochs: map.take_or("hold_epochs", d.hold_epochs)?,
            lambda: map.take_or("lambda", d.lambda)?,
            batch_size: map.take_or("batch_size", d.batch_size)?,
            clip_norm: map.take_or("clip_norm", d.clip_norm)?,
            avg_last_k: map.take_or("avg_last_k", d.avg_last_k)?,
        })
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        cfg.epochs = self.epochs;
        cfg.lr0 = self.lr0;
        cfg.hold_epochs = self.hold_epochs;
        cfg.lambda = self.lambda;
        cfg.batch_size = self.batch_size;
        cfg.clip_norm = self.clip_norm;
        cfg.avg_last_k = self.avg_last_k;
    }

    fn echo(&self, m: &mut ConfigMap) {
        m.set("epochs", self.epochs);
        m.set("lr0", format!("{:?}", self.lr0));
        m.set("hold_epochs", self.hold_epochs);
        m.set("lambda", format!("{:?}", self.lambda));
        m.set("batch_size", self.batch_size);
        m.set("clip_norm", format!("{:?}", self.clip_norm));
        m.set("avg_last_k", self.avg_last_k);
    }
}

/// Write per-epoch checkpoints, the averaged final model, and the log.
fn write_run(out_dir: &Path, run: &TrainRun, avg_last_k: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for ckpt in &run.checkpoints {
        ckpt.save(&out_dir.join(format!("epoch-{:03}.bapc", ckpt.epoch)))?;
    }
    let k = avg_last_k.clamp(1, run.checkpoints.len());
    average_checkpoints(&run.checkpoints, k)?.save(&out_dir.join("final.bapc"))?;
    let log: String = run.log.iter().map(|r| r.to_line() + "\n").collect();
    write_text(&out_dir.join("train.log"), &log)
}

/// Final-loss metrics: deterministic key=value lines (wall time stays in the
/// log so reruns compare bit-exactly).
fn write_loss_metrics(out_dir: &Path, run: &TrainRun, extra: &mut ConfigMap) -> Result<()> {
    if let Some(loss) = run.final_loss() {
        extra.set("final_loss", format!("{:?}", loss));
    }
    write_text(&out_dir.join("metrics.txt"), &extra.render())
}

fn cmd_pretrain(
    features: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed_flag: Option<u64>,
    objective_flag: Option<&str>,
) -> Result<i32> {
    let mut map = load_map(config)?;
    let seed = resolve(&mut map, "seed", seed_flag, 0)?;
    let objective_str = resolve(
        &mut map,
        "objective",
        objective_flag.map(str::to_string),
        "biapc".to_string(),
    )?;
    let mut objective = ObjectiveConfig::new(ObjectiveKind::parse(&objective_str)?);
    objective.shift_n = map.take_or("shift", objective.shift_n)?;
    objective.mask_ratio = map.take_or("mask_ratio", objective.mask_ratio)?;
    objective.direction_weights.0 = map.take_or("w_fwd", objective.direction_weights.0)?;
    objective.direction_weights.1 = map.take_or("w_rev", objective.direction_weights.1)?;

    let kind = parse_kind(&map.take_or("kind", "bi".to_string())?)?;
    let layers = map.take_or("layers", 2usize)?;
    let hidden = map.take_or("hidden", 32usize)?;
    let dropout = map.take_or("dropout", 0.2f64)?;
    let batchnorm = map.take_bool_or("batchnorm", true)?;
    let configured_dim: Option<usize> = map.take("input_dim")?;

    let mut tcfg = TrainConfig::pretrain_defaults(objective, seed);
    let sched = ScheduleCfg::resolve(&mut map, &tcfg)?;
    sched.apply(&mut tcfg);
    map.finish()?;

    let feats = read_feature_archive(features)?;
    let input_dim = feats
        .first()
        .ok_or_else(|| Error::Invalid(format!("`{}` holds no utterances", features.display())))?
        .dim();
    if let Some(d) = configured_dim {
        if d != input_dim {
            return Err(Error::Mismatch(format!(
                "config says input_dim={d}, archive provides {input_dim}"
            )));
        }
    }

    let spec = ModelSpec {
        kind,
        num_layers: layers,
        hidden,
        input_dim,
        dropout,
        batchnorm,
        head: HeadKind::Prediction,
    };
    let streams = SeedStreams::new(seed);
    let model = Model::<f32>::init(spec, &mut streams.stream("pretrain-init"))?;
    let run = pretrain(model, &feats, &tcfg)?;

    let mut eff = ConfigMap::new();
    eff.set("seed", seed);
    eff.set("objective", &objective_str);
    eff.set("shift", tcfg.objective.shift_n);
    eff.set("mask_ratio", format!("{:?}", tcfg.objective.mask_ratio));
    eff.set("w_fwd", format!("{:?}", tcfg.objective.direction_weights.0));
    eff.set("w_rev", format!("{:?}", tcfg.objective.direction_weights.1));
    eff.set("kind", kind_str(kind));
    eff.set("layers", layers);
    eff.set("hidden", hidden);
    eff.set("dropout", format!("{:?}", dropout));
    eff.set("batchnorm", batchnorm);
    eff.set("input_dim", input_dim);
    sched.echo(&mut eff);

    write_run(out_dir, &run, tcfg.avg_last_k)?;
    write_text(&out_dir.join("pretrain.effective.conf"), &eff.render())?;
    let mut metrics = ConfigMap::new();
    metrics.set("seed", seed);
    metrics.set("objective", &objective_str);
    metrics.set("epochs", tcfg.epochs);
    write_loss_metrics(out_dir, &run, &mut metrics)?;

    match run.final_loss() {
        Some(loss) => println!(
            "pre-trained {} epochs ({objective_str}); final loss {loss:.6}; outputs in `{}`",
            tcfg.epochs,
            out_dir.display()
        ),
        None => println!("saved untrained model to `{}`", out_dir.display()),
    }
    Ok(0)
}

fn cmd_finetune(
    features: &Path,
    labels_path: &Path,
    out_dir: &Path,
    config: Option<&Path>,
    seed_flag: Option<u64>,
    init: Option<&Path>,
    from_uni: Option<&Path>,
) -> Result<i32> {
    let mut map = load_map(config)?;
    let seed = resolve(&mut map, "seed", seed_flag, 0)?;
    let kind_cfg: Option<String> = map.take("kind")?;
    let layers_cfg: Option<usize> = map.take("layers")?;
    let hidden_cfg: Option<usize> = map.take("hidden")?;
    let dropout_cfg: Option<f64> = map.take("dropout")?;
    let batchnorm_cfg: Option<bool> = map.take("batchnorm")?;
    let configured_dim: Option<usize> = map.take("input_dim")?;
    let classes_cfg: Option<usize> = map.take("classes")?;
    let reset_bn = map.take_bool_or("reset_bn_moments", false)?;

    let mut tcfg = TrainConfig::finetune_defaults(seed);
    let sched = ScheduleCfg::resolve(&mut map, &tcfg)?;
    sched.apply(&mut tcfg);
    map.finish()?;

    let feats = read_feature_archive(features)?;
    let (labels, classes) = read_label_archive(labels_path)?;
    if let Some(c) = classes_cfg {
        if c != classes {
            return Err(Error::Mismatch(format!(
                "config says classes={c}, label archive provides {classes}"
            )));
        }
    }
    let input_dim = feats
        .first()
        .ok_or_else(|| Error::Invalid(format!("`{}` holds no utterances", features.display())))?
        .dim();
    if let Some(d) = configured_dim {
        if d != input_dim {
            return Err(Error::Mismatch(format!(
                "config says input_dim={d}, archive provides {input_dim}"
            )));
        }
    }

    let kind_cfg = kind_cfg.as_deref().map(parse_kind).transpose()?;
    // Shape fields fall back to the warm-start checkpoint, then to defaults.
    let (pretrained, kind, layers, hidden, dropout, batchnorm);
    if let Some(path) = init {
        let ckpt = Checkpoint::load(path)?;
        kind = kind_cfg.unwrap_or(ckpt.spec.kind);
        layers = layers_cfg.unwrap_or(ckpt.spec.num_layers);
        hidden = hidden_cfg.unwrap_or(ckpt.spec.hidden);
        dropout = dropout_cfg.unwrap_or(ckpt.spec.dropout);
        batchnorm = batchnorm_cfg.unwrap_or(ckpt.spec.batchnorm);
        pretrained = Some(ckpt);
    } else if let Some(path) = from_uni {
        let uni = Checkpoint::load(path)?;
        kind = kind_cfg.unwrap_or(ModelKind::Bi);
        if kind != ModelKind::Bi {
            return Err(Error::Mismatch(
                "--from-uni seeds a bi model; config says kind=uni".into(),
            ));
        }
        layers = layers_cfg.unwrap_or(uni.spec.num_layers);
        hidden = hidden_cfg.unwrap_or(uni.spec.hidden);
        dropout = dropout_cfg.unwrap_or(uni.spec.dropout);
        batchnorm = batchnorm_cfg.unwrap_or(uni.spec.batchnorm);
        let bi_spec = ModelSpec {
            kind,
            num_layers: layers,
            hidden,
            input_dim,
            dropout,
            batchnorm,
            head: HeadKind::Prediction,
        };
        let transferred = transfer_uni_to_bi(&uni, &bi_spec, seed)?;
        pretrained = Some(Checkpoint::from_model(
            &transferred,
            0,
            uni.objective.clone(),
            seed,
            Default::default(),
        ));
    } else {
        kind = kind_cfg.unwrap_or(ModelKind::Bi);
        layers = layers_cfg.unwrap_or(2);
        hidden = hidden_cfg.unwrap_or(32);
        dropout = dropout_cfg.unwrap_or(0.2);
        batchnorm = batchnorm_cfg.unwrap_or(true);
        pretrained = None;
    }

    let base_spec = ModelSpec {
        kind,
        num_layers: layers,
        hidden,
        input_dim,
        dropout,
        batchnorm,
        head: HeadKind::Prediction,
    };
    let run =
        finetune(&base_spec, classes, pretrained.as_ref(), &feats, &labels, &tcfg, reset_bn)?;

    let mut eff = ConfigMap::new();
    eff.set("seed", seed);
    eff.set("kind", kind_str(kind));
    eff.set("layers", layers);
    eff.set("hidden", hidden);
    eff.set("dropout", format!("{:?}", dropout));
    eff.set("batchnorm", batchnorm);
    eff.set("input_dim", input_dim);
    eff.set("classes", classes);
    eff.set("reset_bn_moments", reset_bn);
    sched.echo(&mut eff);

    write_run(out_dir, &run, tcfg.avg_last_k)?;
    write_text(&out_dir.join("finetune.effective.conf"), &eff.render())?;
    let mut metrics = ConfigMap::new();
    metrics.set("seed", seed);
    metrics.set("objective", "ce");
    metrics.set("classes", classes);
    metrics.set("epochs", tcfg.epochs);
    write_loss_metrics(out_dir, &run, &mut metrics)?;

    match run.final_loss() {
        Some(loss) => println!(
            "fine-tuned {} epochs over {classes} classes; final loss {loss:.6}; outputs in `{}`",
            tcfg.epochs,
            out_dir.display()
        ),
        None => println!("saved classifier to `{}` without training", out_dir.display()),
    }
    Ok(0)
}

fn cmd_eval(
    checkpoint: &Path,
    features: &Path,
    labels_path: &Path,
    out_dir: Option<&Path>,
) -> Result<i32> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let feats = read_feature_archive(features)?;
    let (labels, _classes) = read_label_archive(labels_path)?;
    let report = evaluate(&model, &feats, &labels)?;
    println!(
        "frame accuracy {:.4} ({}/{} frames)",
        report.accuracy, report.correct, report.frames
    );
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut metrics = ConfigMap::new();
        metrics.set("frame_accuracy", format!("{:?}", report.accuracy));
        metrics.set("frames", report.frames);
        metrics.set("correct", report.correct);
        metrics.set("seed", ckpt.seed);
        write_text(&dir.join("metrics.txt"), &metrics.render())?;
    }
    Ok(0)
}

fn cmd_gradcheck(seed: u64, tol: f64, step: f64) -> Result<i32> {
    let mut all_ok = true;
    for case in standard_cases(seed) {
        let report = check_case(&case, step)?;
        let ok = report.passes(tol);
        all_ok &= ok;
        let worst = report
            .worst
            .as_ref()
            .map(|(tensor, off, a, n)| {
                format!(" at {tensor}[{off}] (analytic {a:.4e}, numeric {n:.4e})")
            })
            .unwrap_or_default();
        println!(
            "case {}: {} coordinates, max rel err {:.2e}{worst} — {}",
            report.name,
            report.coords,
            report.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!("gradcheck: {}", if all_ok { "all cases pass" } else { "FAILURES above" });
    Ok(if all_ok { 0 } else { 1 })
}
