//! The `scan` command line: dataset synthesis, training, evaluation,
//! gradient checking, ablations and the ensemble-rate sweep.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::data::{read_features, synthesize, write_features, Dataset, SyntheticConfig};
use crate::error::ScanError;
use crate::eval::{evaluate, score_dataset, EvalConfig, MetricsReport, SWEEP_RATES};
use crate::gradcheck::{check_full_graph, GraphCheckConfig};
use crate::io_util::write_atomic;
use crate::model::{ModelParams, Variant};
use crate::training::{train, TrainConfig};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;
pub const DEFAULT_GRADCHECK_SEEDS: u64 = 20;

#[derive(Debug, Parser)]
#[command(
    name = "scan",
    version,
    about = "Temporal matching head for video re-identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "kebab-case")]
enum CommandKind {
    Synth,
    Train,
    Eval,
    Gradcheck,
    Ablate,
    SweepEnsemble,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic SCNF dataset.
    Synth(Flags),
    /// Train on the training identities of a dataset and write a checkpoint.
    Train(Flags),
    /// Evaluate a checkpoint on the held-out identities.
    Eval(Flags),
    /// Finite-difference check of the full training graph.
    Gradcheck(Flags),
    /// Train and evaluate every ablation variant (ids 1-8).
    Ablate(Flags),
    /// Evaluate one model at several ensemble rates.
    SweepEnsemble(Flags),
}

/// Flags shared by every command; each command reads the ones it needs.
#[derive(Debug, Clone, Default, Args)]
struct Flags {
    /// JSON file with flat keys mirroring the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Variant name or ablation id (1-8).
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    ensemble_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_len: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Number of seeds for `gradcheck`.
    #[arg(long)]
    seeds: Option<u64>,
}

/// Config-file keys. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    dataset: Option<PathBuf>,
    out: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
    variant: Option<Variant>,
    ensemble_rate: Option<f64>,
    epochs: Option<usize>,
    lr: Option<f64>,
    clip_len: Option<usize>,
    stride: Option<usize>,
    seeds: Option<u64>,
    momentum: Option<f64>,
    weight_decay: Option<f64>,
    lambda_id: Option<f64>,
    batches_per_epoch: Option<usize>,
    width: Option<usize>,
    train_fraction: Option<f64>,
    n_identities: Option<usize>,
    n_cameras: Option<usize>,
    frames_per_sequence: Option<usize>,
    feature_dim: Option<usize>,
    camera_offset_scale: Option<f64>,
    frame_noise_sigma: Option<f64>,
    occlusion_prob: Option<f64>,
}

/// Fully resolved configuration of one invocation; echoed into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    command: CommandKind,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub train_fraction: f64,
    pub gradcheck_seeds: u64,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SyntheticConfig,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Scan(ScanError),
    GradcheckFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Scan(e) => write!(f, "{e}"),
            CliError::GradcheckFailed(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl From<ScanError> for CliError {
    fn from(e: ScanError) -> Self {
        CliError::Scan(e)
    }
}

impl CliError {
    /// 1 usage, 2 I/O, 3 validation or contract, 4 gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Scan(ScanError::Io(_)) => 2,
            CliError::Scan(_) => 3,
            CliError::GradcheckFailed(_) => 4,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_file_config(path: &Path) -> CliResult<FileConfig> {
    let text = fs::read(path).map_err(ScanError::from)?;
    serde_json::from_slice(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn resolve(kind: CommandKind, flags: Flags) -> CliResult<RunConfig> {
    let file = match &flags.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    let mut train = TrainConfig::default();
    let mut eval = EvalConfig::default();
    let mut synth = SyntheticConfig::default();

    macro_rules! pick {
        ($flag:expr, $file:expr) => {
            $flag.or($file)
        };
    }
    let seed = pick!(flags.seed, file.seed);
    if let Some(s) = seed {
        train.seed = s;
        synth.seed = s;
    }
    if let Some(v) = pick!(flags.variant, file.variant) {
        train.variant = v;
    }
    if let Some(v) = pick!(flags.epochs, file.epochs) {
        train.epochs = v;
    }
    if let Some(v) = pick!(flags.lr, file.lr) {
        train.lr0 = v;
    }
    if let Some(v) = pick!(flags.clip_len, file.clip_len) {
        train.clip_len = v;
        eval.clip_len = v;
    }
    if let Some(v) = pick!(flags.stride, file.stride) {
        train.stride = v;
        eval.stride = v;
    }
    if let Some(v) = pick!(flags.ensemble_rate, file.ensemble_rate) {
        eval.ensemble_rate = v;
    }
    if let Some(v) = file.momentum {
        train.momentum = v;
    }
    if let Some(v) = file.weight_decay {
        train.weight_decay = v;
    }
    if let Some(v) = file.lambda_id {
        train.lambda_id = v;
    }
    if file.batches_per_epoch.is_some() {
        train.batches_per_epoch = file.batches_per_epoch;
    }
    if let Some(v) = file.width {
        train.width = v;
    }
    if let Some(v) = file.n_identities {
        synth.n_identities = v;
    }
    if let Some(v) = file.n_cameras {
        synth.n_cameras = v;
    }
    if let Some(v) = file.frames_per_sequence {
        synth.frames_per_sequence = v;
    }
    if let Some(v) = file.feature_dim {
        synth.feature_dim = v;
    }
    if let Some(v) = file.camera_offset_scale {
        synth.camera_offset_scale = v;
    }
    if let Some(v) = file.frame_noise_sigma {
        synth.frame_noise_sigma = v;
    }
    if let Some(v) = file.occlusion_prob {
        synth.occlusion_prob = v;
    }

    let cfg = RunConfig {
        command: kind,
        dataset: pick!(flags.dataset, file.dataset),
        out: pick!(flags.out, file.out),
        checkpoint: pick!(flags.checkpoint, file.checkpoint),
        train_fraction: file.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION),
        gradcheck_seeds: pick!(flags.seeds, file.seeds).unwrap_or(DEFAULT_GRADCHECK_SEEDS),
        train,
        eval,
        synth,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> CliResult<()> {
    let need = |p: &Option<PathBuf>, name: &str| -> CliResult<()> {
        match p {
            Some(_) => Ok(()),
            None => Err(CliError::Usage(format!(
                "`{}` requires --{name}",
                cfg.command.name()
            ))),
        }
    };
    match cfg.command {
        CommandKind::Synth => {
            need(&cfg.out, "out")?;
            cfg.synth.validate()?;
        }
        CommandKind::Train => {
            need(&cfg.dataset, "dataset")?;
            need(&cfg.out, "out")?;
        }
        CommandKind::Eval => {
            need(&cfg.dataset, "dataset")?;
            need(&cfg.checkpoint, "checkpoint")?;
            need(&cfg.out, "out")?;
        }
        CommandKind::Gradcheck => {
            if cfg.gradcheck_seeds == 0 {
                return Err(CliError::Usage("--seeds must be >= 1".into()));
            }
        }
        CommandKind::Ablate | CommandKind::SweepEnsemble => {
            need(&cfg.dataset, "dataset")?;
            need(&cfg.out, "out")?;
        }
    }
    if matches!(
        cfg.command,
        CommandKind::Train | CommandKind::Ablate | CommandKind::SweepEnsemble
    ) && cfg.checkpoint.is_none()
    {
        cfg.train.validate()?;
        if cfg.train.epochs == 0 {
            return Err(ScanError::Config("epochs must be >= 1".into()).into());
        }
    }
    cfg.eval.validate()?;
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(ScanError::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            cfg.train_fraction
        ))
        .into());
    }
    Ok(())
}

impl CommandKind {
    fn name(self) -> &'static str {
        match self {
            CommandKind::Synth => "synth",
            CommandKind::Train => "train",
            CommandKind::Eval => "eval",
            CommandKind::Gradcheck => "gradcheck",
            CommandKind::Ablate => "ablate",
            CommandKind::SweepEnsemble => "sweep-ensemble",
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("SCAN_LOG_LEVEL", "info");
    // a second init (tests calling `run` repeatedly) is harmless
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(ScanError::from)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn echo(cfg: &RunConfig) -> CliResult<serde_json::Value> {
    Ok(serde_json::to_value(cfg).map_err(ScanError::from)?)
}

fn load_split(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    let path = cfg.dataset.as_ref().expect("validated");
    let dataset = read_features(path)?;
    info!(
        "dataset {}: {} sequences, {} identities, d={}",
        path.display(),
        dataset.len(),
        dataset.identities().len(),
        dataset.feature_dim
    );
    Ok(dataset.split_identities(cfg.train_fraction)?)
}

fn train_model(cfg: &RunConfig, train_set: &Dataset) -> CliResult<ModelParams> {
    let start = Instant::now();
    let outcome = train(train_set, &cfg.train)?;
    if let Some(last) = outcome.history.last() {
        info!(
            "{} trained in {:.1}s: bce {:.4}, oim {:.4}, pair accuracy {:.3}",
            cfg.train.variant,
            start.elapsed().as_secs_f64(),
            last.bce,
            last.oim,
            last.accuracy
        );
    }
    Ok(outcome.params)
}

fn csv_path(out: &Path) -> PathBuf {
    out.with_extension("csv")
}

fn write_report(out: &Path, report: &MetricsReport) -> CliResult<()> {
    write_json(out, report)?;
    write_atomic(&csv_path(out), report.cmc_csv().as_bytes())?;
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> CliResult<()> {
    let out = cfg.out.as_ref().expect("validated");
    let dataset = synthesize(&cfg.synth)?;
    write_features(&dataset, out)?;
    info!("wrote {} sequences to {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    let (train_set, _) = load_split(cfg)?;
    let params = train_model(cfg, &train_set)?;
    let out = cfg.out.as_ref().expect("validated");
    write_checkpoint(
        out,
        &Checkpoint {
            params,
            config: cfg.train.clone(),
        },
    )?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn load_model(cfg: &RunConfig) -> CliResult<ModelParams> {
    let path = cfg.checkpoint.as_ref().expect("checked by caller");
    let ckpt = read_checkpoint(path)?;
    if ckpt.params.variant != cfg.train.variant && cfg.train.variant != TrainConfig::default().variant {
        warn!(
            "checkpoint variant {} overrides requested variant {}",
            ckpt.params.variant, cfg.train.variant
        );
    }
    info!("loaded {} checkpoint {}", ckpt.params.variant, path.display());
    Ok(ckpt.params)
}

fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    let (_, test_set) = load_split(cfg)?;
    let params = load_model(cfg)?;
    let report = evaluate(&params, &test_set, &cfg.eval, echo(cfg)?)?;
    info!(
        "top1 {:.4} top5 {:.4} mAP {:.4} at rate {}",
        report.top1, report.top5, report.map, report.ensemble_rate
    );
    write_report(cfg.out.as_ref().expect("validated"), &report)
}

#[derive(Debug, Serialize)]
struct GradcheckSummary {
    variant: Variant,
    seeds: u64,
    max_rel_error: f64,
    tolerance: f64,
    h: f64,
    pass: bool,
    worst_seed: u64,
    seconds: f64,
    config: serde_json::Value,
}

fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<()> {
    let gc = GraphCheckConfig {
        lambda_id: cfg.train.lambda_id,
        ..GraphCheckConfig::default()
    };
    let start = Instant::now();
    let (mut worst, mut worst_seed, mut pass) = (0.0f64, cfg.train.seed, true);
    for k in 0..cfg.gradcheck_seeds {
        let seed = cfg.train.seed + k;
        let report = check_full_graph(seed, cfg.train.variant, &gc)?;
        if report.max_rel_error > worst {
            worst = report.max_rel_error;
            worst_seed = seed;
        }
        if !report.pass {
            error!(
                "{}: max relative error {:e} at {:?}",
                report.op_name, report.max_rel_error, report.worst_index
            );
            pass = false;
        }
    }
    let summary = GradcheckSummary {
        variant: cfg.train.variant,
        seeds: cfg.gradcheck_seeds,
        max_rel_error: worst,
        tolerance: gc.tolerance,
        h: gc.h,
        pass,
        worst_seed,
        seconds: start.elapsed().as_secs_f64(),
        config: echo(cfg)?,
    };
    info!(
        "gradcheck {}: {} seeds, max relative error {:e} (tolerance {:e})",
        summary.variant, summary.seeds, summary.max_rel_error, summary.tolerance
    );
    match &cfg.out {
        Some(out) => write_json(out, &summary)?,
        None => {
            let text = serde_json::to_string_pretty(&summary).map_err(ScanError::from)?;
            // a closed pipe (`| head`) is not an error worth a panic
            if let Err(e) = writeln!(std::io::stdout().lock(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(ScanError::from(e).into());
                }
            }
        }
    }
    if pass {
        Ok(())
    } else {
        Err(CliError::GradcheckFailed(format!(
            "max relative error {worst:e} exceeds {:e}",
            gc.tolerance
        )))
    }
}

#[derive(Debug, Serialize)]
struct AblationRow {
    id: u8,
    variant: Variant,
    top1: f64,
    top5: f64,
    #[serde(rename = "mAP")]
    map: f64,
    report: PathBuf,
}

fn cmd_ablate(cfg: &RunConfig) -> CliResult<()> {
    let (train_set, test_set) = load_split(cfg)?;
    let dir = cfg.out.as_ref().expect("validated");
    fs::create_dir_all(dir).map_err(ScanError::from)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let run = RunConfig {
            train: TrainConfig {
                variant,
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let params = train_model(&run, &train_set)?;
        let report = evaluate(&params, &test_set, &run.eval, echo(&run)?)?;
        let path = dir.join(format!("{}-{}.json", variant.id(), variant.name()));
        write_report(&path, &report)?;
        info!(
            "[{}] {variant}: top1 {:.4} mAP {:.4}",
            variant.id(),
            report.top1,
            report.map
        );
        rows.push(AblationRow {
            id: variant.id(),
            variant,
            top1: report.top1,
            top5: report.top5,
            map: report.map,
            report: path,
        });
    }
    write_json(&dir.join("summary.json"), &rows)
}

#[derive(Debug, Serialize)]
struct SweepReport {
    rates: Vec<f64>,
    top1: Vec<f64>,
    #[serde(rename = "mAP")]
    map: Vec<f64>,
    reports: Vec<MetricsReport>,
}

fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    let (train_set, test_set) = load_split(cfg)?;
    let params = match cfg.checkpoint {
        Some(_) => load_model(cfg)?,
        None => train_model(cfg, &train_set)?,
    };
    let table = score_dataset(&params, &test_set, &cfg.eval)?;
    let mut sweep = SweepReport {
        rates: SWEEP_RATES.to_vec(),
        top1: Vec::new(),
        map: Vec::new(),
        reports: Vec::new(),
    };
    let mut csv = String::from("rate,top1,mAP\n");
    for rate in SWEEP_RATES {
        let run = RunConfig {
            eval: EvalConfig {
                ensemble_rate: rate,
                ..cfg.eval.clone()
            },
            ..cfg.clone()
        };
        let report = MetricsReport::from_matrix(&table.score_matrix(rate)?, rate, echo(&run)?)?;
        info!("rate {rate}: top1 {:.4} mAP {:.4}", report.top1, report.map);
        csv.push_str(&format!("{rate},{},{}\n", report.top1, report.map));
        sweep.top1.push(report.top1);
        sweep.map.push(report.map);
        sweep.reports.push(report);
    }
    let out = cfg.out.as_ref().expect("validated");
    write_json(out, &sweep)?;
    write_atomic(&csv_path(out), csv.as_bytes())?;
    Ok(())
}

fn dispatch(cfg: &RunConfig) -> CliResult<()> {
    info!(
        "{} seed {} config {}",
        cfg.command.name(),
        cfg.train.seed,
        serde_json::to_string(cfg).map_err(ScanError::from)?
    );
    match cfg.command {
        CommandKind::Synth => cmd_synth(cfg),
        CommandKind::Train => cmd_train(cfg),
        CommandKind::Eval => cmd_eval(cfg),
        CommandKind::Gradcheck => cmd_gradcheck(cfg),
        CommandKind::Ablate => cmd_ablate(cfg),
        CommandKind::SweepEnsemble => cmd_sweep(cfg),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (kind, flags) = match cli.command {
        Command::Synth(f) => (CommandKind::Synth, f),
        Command::Train(f) => (CommandKind::Train, f),
        Command::Eval(f) => (CommandKind::Eval, f),
        Command::Gradcheck(f) => (CommandKind::Gradcheck, f),
        Command::Ablate(f) => (CommandKind::Ablate, f),
        Command::SweepEnsemble(f) => (CommandKind::SweepEnsemble, f),
    };
    match resolve(kind, flags).and_then(|cfg| dispatch(&cfg)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        std::iter::once("scan")
            .chain(list.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(args(&["bogus"])), 1);
        assert_eq!(run(args(&["train"])), 1);
        assert_eq!(run(args(&["synth", "--epochs", "x"])), 1);
        assert_eq!(run(args(&["--help"])), 0);
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("m.scnc");
        let code = run(args(&[
            "train",
            "--dataset",
            "/nonexistent/d.scnf",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 2);
        assert!(!out.exists());
    }

    #[test]
    fn config_file_and_flag_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.json");
        fs::write(
            &cfg_path,
            r#"{"seed": 3, "epochs": 4, "occlusion_prob": 0.2, "out": "x.scnf"}"#,
        )
        .unwrap();
        let flags = Flags {
            config: Some(cfg_path.clone()),
            epochs: Some(7),
            ..Flags::default()
        };
        let cfg = resolve(CommandKind::Synth, flags).unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.synth.occlusion_prob, 0.2);
        assert_eq!(cfg.out, Some(PathBuf::from("x.scnf")));

        fs::write(&cfg_path, r#"{"seed": 3, "learning_rate": 0.1}"#).unwrap();
        let flags = Flags {
            config: Some(cfg_path),
            ..Flags::default()
        };
        assert!(matches!(
            resolve(CommandKind::Gradcheck, flags),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn invalid_values_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d.scnf");
        let code = run(args(&[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--ensemble-rate",
            "1.5",
        ]));
        assert_eq!(code, 3);
        assert!(!out.exists());
    }

    #[test]
    fn variant_flag_accepts_names_and_ids() {
        let cli = Cli::try_parse_from(args(&["gradcheck", "--variant", "3"])).unwrap();
        let Command::Gradcheck(f) = cli.command else {
            panic!()
        };
        assert_eq!(f.variant, Some(Variant::SanOnly));
        let cli = Cli::try_parse_from(args(&["gradcheck", "--variant", "dot-product"])).unwrap();
        let Command::Gradcheck(f) = cli.command else {
            panic!()
        };
        assert_eq!(f.variant, Some(Variant::DotProduct));
    }
}
