//! `shine`: synthesize corpora, split, train, predict, evaluate and ensemble.

mod manifest;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use shine_core::dataset::{self, AuxContent, SplitPlan, SynthConfig};
use shine_core::ensemble::{self, EnsembleSpec};
use shine_core::features::TargetMode;
use shine_core::inference::{self, EvalReport, InferenceGeometry, PredictionTrace};
use shine_core::model::{checkpoint, ModelConfig};
use shine_core::training::{TrainConfig, Trainer};
use shine_core::{io, Error, ErrorKind, Result};

use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "shine", version, about = "Speech/silence decoding from MEG")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic sessions.
    Synth(SynthArgs),
    /// Draw a leave-session-out split.
    Split(SplitArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score every session with a checkpoint.
    Predict(PredictArgs),
    /// Calibrate a threshold and report F1 per session.
    Eval(EvalArgs),
    /// Average traces from several models.
    Ensemble(EnsembleArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    sessions: u64,
    /// Session length in seconds.
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Signal-to-noise power ratio per channel.
    #[arg(long, default_value_t = 4.0)]
    snr: f64,
    /// First session seed; session i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the simulated subject's sensor geometry.
    #[arg(long, default_value_t = 0)]
    subject_seed: u64,
    #[arg(long, default_value_t = dataset::DEFAULT_RATE_HZ)]
    rate: f64,
    #[arg(long, value_enum, default_value_t = AuxArg::Informative)]
    aux: AuxArg,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum AuxArg {
    Informative,
    Noise,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Standard,
    Extended,
}

impl From<ModeArg> for TargetMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Standard => TargetMode::Standard,
            ModeArg::Extended => TargetMode::Extended,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output split file.
    #[arg(long, default_value = "split.json")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Split file; drawn from --seed and --n-val when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    /// JSON file `{"model": {...}, "train": {...}}`; flags given on the
    /// command line override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Standard)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 20)]
    max_epochs: usize,
    /// Windows per optimizer step.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Epochs without improvement before stopping (0 = never).
    #[arg(long, default_value_t = 4)]
    patience: usize,
    #[arg(long, default_value_t = 8)]
    n_val: usize,
    /// Seed for the split, shuffling and (unless the config file sets a
    /// model section) parameter initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = dataset::WINDOW_SECONDS)]
    window_seconds: f64,
    #[arg(long, default_value_t = dataset::TRAIN_STRIDE_SECONDS)]
    stride_seconds: f64,
    /// Redraw validation sessions every epoch.
    #[arg(long)]
    resplit_each_epoch: bool,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trace directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30.0)]
    window_seconds: f64,
    #[arg(long, default_value_t = 20.0)]
    stride_seconds: f64,
    /// Seconds discarded from each side of a window.
    #[arg(long, default_value_t = 5.0)]
    trim_seconds: f64,
    /// Allow strides that do not equal window - 2 * trim.
    #[arg(long)]
    loose: bool,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split file whose validation sessions calibrate the threshold.
    #[arg(long)]
    calibrate_on: PathBuf,
    /// Metrics CSV; defaults to <traces>/metrics.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EnsembleArgs {
    /// Ensemble spec JSON; relative trace paths resolve against its folder.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sessions with labels, to evaluate the ensemble.
    #[arg(long, requires = "calibrate_on")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    calibrate_on: Option<PathBuf>,
}

/// Layout of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand required");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli, sub)),
        Err(e) => Err(Error::InvalidConfig(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn run(cli: &Cli, sub: &ArgMatches) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a, sub, cli.jobs),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble_cmd(a),
    }
}

fn summary(value: serde_json::Value) {
    println!("{value}");
}

fn synth(a: &SynthArgs) -> Result<()> {
    let mut m = RunManifest::start("synth", a);
    let cfg = SynthConfig {
        n_channels: a.channels,
        duration_seconds: a.duration,
        rate_hz: a.rate,
        snr: a.snr,
        subject_seed: a.subject_seed,
        aux: match a.aux {
            AuxArg::Informative => AuxContent::Informative,
            AuxArg::Noise => AuxContent::Noise,
        },
        ..SynthConfig::default()
    };
    cfg.validate()?;
    io::create_dir(&a.out)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.sessions).collect();
    let ids = seeds
        .par_iter()
        .map(|&seed| {
            let s = dataset::synth_session(&cfg, seed)?;
            dataset::write_session(&s, &a.out.join(&s.session_id))?;
            Ok(s.session_id)
        })
        .collect::<Result<Vec<_>>>()?;
    m.seeds = seeds;
    m.finish(&a.out.join(manifest::FILE))?;
    summary(json!({"command": "synth", "out": a.out, "sessions": ids}));
    Ok(())
}

fn session_ids(data: &Path) -> Result<Vec<String>> {
    dataset::list_sessions(data)?
        .iter()
        .map(|p| dataset::load_session(p).map(|s| s.session_id))
        .collect()
}

fn split(a: &SplitArgs) -> Result<()> {
    let mut m = RunManifest::start("split", a);
    m.add_input(&a.data)?;
    let ids = session_ids(&a.data)?;
    let plan = dataset::leave_session_out_split(&ids, a.n_val, a.seed)?;
    plan.save(&a.out)?;
    m.seeds = vec![a.seed];
    m.finish(&manifest::beside(&a.out))?;
    summary(json!({
        "command": "split",
        "out": a.out,
        "train": plan.train_sessions.len(),
        "val": plan.val_sessions.iter().collect::<Vec<_>>(),
    }));
    Ok(())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Resolves file values and command-line overrides into the two configs.
fn train_configs(
    a: &TrainArgs,
    m: &ArgMatches,
    in_channels: usize,
) -> Result<(ModelConfig, TrainConfig)> {
    let file = match &a.config {
        Some(p) => io::read_json::<ConfigFile>(p)?,
        None => ConfigFile::default(),
    };
    let mut t = file.train.unwrap_or_default();
    macro_rules! over {
        ($($field:ident <- $arg:ident),* $(,)?) => {
            $(if explicit(m, stringify!($arg)) {
                t.$field = a.$arg.clone().into();
            })*
        };
    }
    over!(
        lr <- lr,
        weight_decay <- weight_decay,
        max_epochs <- max_epochs,
        batch_size <- batch_size,
        patience <- patience,
        n_val_sessions <- n_val,
        seed <- seed,
        window_seconds <- window_seconds,
        stride_seconds <- stride_seconds,
        mode <- mode,
    );
    if a.resplit_each_epoch {
        t.resplit_each_epoch = true;
    }
    let model = match file.model {
        Some(mut model) => {
            if explicit(m, "seed") {
                model.seed = a.seed;
            }
            model
        }
        None => ModelConfig {
            in_channels,
            out_channels: t.mode.rows(),
            seed: t.seed,
            ..ModelConfig::default()
        },
    };
    t.validate()?;
    Ok((model, t))
}

fn train(a: &TrainArgs, m: &ArgMatches, jobs: usize) -> Result<()> {
    let mut man = RunManifest::start("train", a);
    man.add_input(&a.data)?;
    if let Some(p) = &a.config {
        man.add_input(p)?;
    }
    let plan = match &a.split {
        Some(p) => {
            man.add_input(p)?;
            Some(SplitPlan::load(p)?)
        }
        None => None,
    };
    let sessions = dataset::load_all(&a.data)?;
    let channels = sessions.first().map_or(0, |s| s.n_channels());
    let (model_cfg, train_cfg) = train_configs(a, m, channels)?;
    if plan.is_none() && sessions.len() <= train_cfg.n_val_sessions {
        return Err(Error::TooFewSessions {
            needed: train_cfg.n_val_sessions,
            found: sessions.len(),
        });
    }
    man.config = json!({"model": model_cfg, "train": train_cfg});
    man.seeds = vec![train_cfg.seed, model_cfg.seed];
    let mut trainer = Trainer::new(model_cfg, train_cfg, &a.out);
    trainer.jobs = jobs;
    let report = trainer.run(&sessions, plan.as_ref())?;
    man.finish(&a.out.join(manifest::FILE))?;
    for e in &report.epochs {
        summary(
            json!({"command": "train", "epoch": e.epoch, "train_loss": e.train_loss, "val_pearson": e.val_pearson}),
        );
    }
    summary(json!({
        "command": "train",
        "best_epoch": report.best_epoch,
        "best_val_pearson": report.best_val_pearson,
        "checkpoint": report.checkpoint,
    }));
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let mut man = RunManifest::start("predict", a);
    man.add_input(&a.ckpt)?;
    man.add_input(&a.data)?;
    let bytes = std::fs::read(&a.ckpt).map_err(|e| Error::io(&a.ckpt, e))?;
    let model = checkpoint::from_bytes(&bytes, &a.ckpt)?;
    let model_id = inference::model_id_from_bytes(&bytes);
    let geometry = InferenceGeometry {
        window_seconds: a.window_seconds,
        stride_seconds: a.stride_seconds,
        trim_seconds: a.trim_seconds,
        strict: !a.loose,
    };
    let paths = dataset::list_sessions(&a.data)?;
    let written = paths
        .par_iter()
        .map(|p| {
            let s = dataset::load_session(p)?;
            inference::predict_session(&model, &s, &geometry, &model_id)?.save(&a.out)
        })
        .collect::<Result<Vec<_>>>()?;
    man.finish(&a.out.join(manifest::FILE))?;
    summary(json!({"command": "predict", "model_id": model_id, "traces": written}));
    Ok(())
}

fn print_reports(command: &str, reports: &[EvalReport], csv: &Path) {
    for r in reports {
        let p = r.pooled();
        summary(json!({
            "command": command,
            "model_id": r.model_id,
            "threshold": r.threshold.value,
            "f1_macro": p.f1_macro,
            "f1_speech": p.f1_speech,
            "f1_silence": p.f1_silence,
            "csv": csv,
        }));
    }
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut man = RunManifest::start("eval", a);
    man.add_input(&a.traces)?;
    man.add_input(&a.data)?;
    man.add_input(&a.calibrate_on)?;
    let traces = inference::load_traces(&a.traces)?;
    if traces.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let labels = ensemble::load_labels(&a.data)?;
    let calib: BTreeSet<String> = SplitPlan::load(&a.calibrate_on)?.val_sessions;
    let reports = inference::evaluate_by_model(&traces, &labels, &calib)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.traces.join("metrics.csv"));
    EvalReport::write_csv(&reports, &out)?;
    man.finish(&manifest::beside(&out))?;
    print_reports("eval", &reports, &out);
    Ok(())
}

fn ensemble_cmd(a: &EnsembleArgs) -> Result<()> {
    let mut man = RunManifest::start("ensemble", a);
    man.add_input(&a.manifest)?;
    let mut spec = EnsembleSpec::load(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    for p in &mut spec.trace_paths {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    let written = ensemble::write_ensemble(&spec, &a.out)?;
    if let (Some(data), Some(split)) = (&a.data, &a.calibrate_on) {
        man.add_input(data)?;
        man.add_input(split)?;
        let labels = ensemble::load_labels(data)?;
        let calib = SplitPlan::load(split)?.val_sessions;
        let traces: Vec<PredictionTrace> = written
            .outputs
            .iter()
            .map(|p| PredictionTrace::load(p))
            .collect::<Result<_>>()?;
        let report = inference::evaluate_traces(&traces, &labels, &calib)?;
        let out = a.out.join("metrics.csv");
        EvalReport::write_csv(std::slice::from_ref(&report), &out)?;
        print_reports("ensemble", std::slice::from_ref(&report), &out);
    }
    man.finish(&a.out.join(manifest::FILE))?;
    summary(json!({
        "command": "ensemble",
        "model_id": written.model_id,
        "digest": written.digest,
        "traces": written.outputs,
    }));
    Ok(())
}
