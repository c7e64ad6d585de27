//! The `advgrad` command line: `train`, `attack`, `defend-eval` and `eval`.
//!
//! Exit codes: 0 success, 2 usage error, 3 data or format error, 4 internal
//! invariant violation. `ADVGRAD_SEED` supplies the seed when `--seed` is
//! absent.

pub mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use advgrad::config::{AttackConfig, LossKind, PgdParams, ATTACK_NAMES};
use advgrad::defenses::DefensePipeline;
use advgrad::idx::load_idx;
use advgrad::models::{load_model, save_model, Architecture, Model};
use advgrad::training::{adversarial_train, evaluate, train, Dataset, TrainConfig};

use report::{toolbox_version, AttackReport, DatasetInfo, ModelInfo};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<advgrad::Error> for CliError {
    fn from(e: advgrad::Error) -> Self {
        match e {
            advgrad::Error::Io(_) | advgrad::Error::Format { .. } => CliError::Data(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "advgrad", version, about = "Adversarial attacks, defenses and robust training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model (optionally adversarially) and write a model file.
    Train(TrainArgs),
    /// Attack a model and emit a report.
    Attack(AttackArgs),
    /// Attack a model behind a defense pipeline and emit a report.
    DefendEval(DefendArgs),
    /// Clean accuracy, optionally behind a defense pipeline.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    pub images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    pub labels: PathBuf,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Architecture descriptor, e.g. `mlp:784-128-64-10`.
    #[arg(long, default_value = "mlp:784-128-64-10")]
    pub arch: String,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, env = "ADVGRAD_SEED")]
    pub seed: Option<u64>,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Adversarial training with an inner Linf PGD attack.
    #[arg(long)]
    pub adv: bool,
    #[arg(long, requires = "adv")]
    pub eps: Option<f64>,
    #[arg(long, requires = "adv", default_value_t = 10)]
    pub nb_iter: usize,
    /// Defaults to 2.5·eps/nb_iter.
    #[arg(long, requires = "adv")]
    pub eps_iter: Option<f64>,
    /// Epochs over which the inner eps ramps up linearly.
    #[arg(long, requires = "adv", default_value_t = 0)]
    pub eps_warmup: usize,
}

/// Attack hyperparameters; each flag sets the config field of the same name.
#[derive(Debug, Default, Args)]
pub struct HyperParams {
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub nb_iter: Option<usize>,
    #[arg(long)]
    pub eps_iter: Option<f64>,
    #[arg(long)]
    pub rand_init: Option<bool>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub targeted: Option<bool>,
    #[arg(long)]
    pub clip_min: Option<f64>,
    #[arg(long)]
    pub clip_max: Option<f64>,
    #[arg(long)]
    pub confidence: Option<f64>,
    #[arg(long)]
    pub binary_search_steps: Option<usize>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub initial_const: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub max_queries: Option<usize>,
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub neighborhood_size: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

impl HyperParams {
    /// Flags given on the command line as `(config key, value)`.
    fn provided(&self) -> Vec<(&'static str, Value)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        put("loss", self.loss.clone().map(Value::from));
        put("eps", self.eps.map(Value::from));
        put("nb_iter", self.nb_iter.map(Value::from));
        put("eps_iter", self.eps_iter.map(Value::from));
        put("rand_init", self.rand_init.map(Value::from));
        put("decay", self.decay.map(Value::from));
        put("targeted", self.targeted.map(Value::from));
        put("clip_min", self.clip_min.map(Value::from));
        put("clip_max", self.clip_max.map(Value::from));
        put("confidence", self.confidence.map(Value::from));
        put("binary_search_steps", self.binary_search_steps.map(Value::from));
        put("max_iter", self.max_iter.map(Value::from));
        put("initial_const", self.initial_const.map(Value::from));
        put("learning_rate", self.learning_rate.map(Value::from));
        put("max_queries", self.max_queries.map(Value::from));
        put("p", self.p.map(Value::from));
        put("neighborhood_size", self.neighborhood_size.map(Value::from));
        put("rounds", self.rounds.map(Value::from));
        put("theta", self.theta.map(Value::from));
        put("gamma", self.gamma.map(Value::from));
        out
    }
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Attack name.
    #[arg(long)]
    pub attack: String,
    #[command(flatten)]
    pub hyper: HyperParams,
    #[arg(long, env = "ADVGRAD_SEED")]
    pub seed: Option<u64>,
    /// Append the report here instead of printing it.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DefendArgs {
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Comma-separated stages, e.g. `median:3,bitsqueeze:1`.
    #[arg(long, allow_hyphen_values = true)]
    pub defense: String,
    /// Attack through straight-through estimators for non-differentiable stages.
    #[arg(long)]
    pub bpda: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "")]
    pub defense: String,
    #[arg(long, env = "ADVGRAD_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Hyperparameters that `pgd-linf` and `pgd-l2` refuse to default.
pub const PGD_MANDATORY: [&str; 5] = ["loss", "eps", "nb_iter", "eps_iter", "rand_init"];

fn flag(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

/// Preset for `name` with the given flags applied on top.
pub fn build_attack_config(name: &str, hyper: &HyperParams) -> CliResult<AttackConfig> {
    let preset = AttackConfig::preset(name).map_err(|_| {
        CliError::Usage(format!("unknown attack {name:?}; available attacks: {}", ATTACK_NAMES.join(", ")))
    })?;
    let provided = hyper.provided();
    if name.starts_with("pgd-") {
        let missing: Vec<String> = PGD_MANDATORY
            .iter()
            .filter(|k| !provided.iter().any(|(p, _)| p == *k))
            .map(|k| flag(k))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Usage(format!(
                "{name} must be given every reported hyperparameter; missing {}",
                missing.join(", ")
            )));
        }
    }
    let Value::Object(mut obj) = serde_json::to_value(preset).expect("config serializes") else {
        unreachable!("configs serialize to objects")
    };
    for (key, value) in provided {
        if !obj.contains_key(key) {
            return Err(CliError::Usage(format!("{} is not a hyperparameter of {name}", flag(key))));
        }
        obj.insert(key.to_string(), value);
    }
    let cfg: AttackConfig =
        serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::Usage(format!("invalid {name} config: {e}")))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn sha256_file(path: &Path) -> CliResult<(Vec<u8>, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    Ok((bytes, digest))
}

struct LoadedData {
    data: Dataset,
    info: DatasetInfo,
}

fn load_data(args: &DataArgs) -> CliResult<LoadedData> {
    let full = load_idx(&args.images, &args.labels)
        .map_err(|e| CliError::Data(format!("{} / {}: {e}", args.images.display(), args.labels.display())))?
        .to_dataset()?;
    let data = match args.limit {
        Some(0) => return Err(CliError::Usage("--limit must be positive".into())),
        Some(n) => full.take(n)?,
        None => full,
    };
    let (_, images_sha256) = sha256_file(&args.images)?;
    let info = DatasetInfo {
        images: args.images.display().to_string(),
        labels: args.labels.display().to_string(),
        images_sha256,
        size: data.len(),
    };
    Ok(LoadedData { data, info })
}

fn load_checked_model(path: &Path, data: &Dataset) -> CliResult<(Model, ModelInfo)> {
    let model = load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let row = data.images().row_len();
    if model.input_len() != row {
        return Err(CliError::Data(format!(
            "model expects inputs of length {}, dataset images have {row} pixels",
            model.input_len()
        )));
    }
    let (_, sha256) = sha256_file(path)?;
    let info = ModelInfo {
        path: path.display().to_string(),
        sha256,
        architecture: model.architecture().to_string(),
    };
    Ok((model, info))
}

fn emit(report: &AttackReport, out: Option<&Path>) -> CliResult<String> {
    let line = report.to_json_line();
    match out {
        None => Ok(format!("{line}\n")),
        Some(path) => {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            writeln!(f, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
            Ok(String::new())
        }
    }
}

fn cmd_train(args: &TrainArgs) -> CliResult<String> {
    let arch: Architecture = args
        .arch
        .parse()
        .map_err(|e| CliError::Usage(format!("bad --arch: {e}")))?;
    let loaded = load_data(&args.data)?;
    if arch.input_len() != loaded.data.images().row_len() {
        return Err(CliError::Data(format!(
            "architecture {arch} expects {} inputs, images have {}",
            arch.input_len(),
            loaded.data.images().row_len()
        )));
    }
    let seed = args.seed.unwrap_or(0);
    let attack = if args.adv {
        let eps = args
            .eps
            .ok_or_else(|| CliError::Usage("--adv requires --eps".into()))?;
        let nb_iter = args.nb_iter;
        let cfg = AttackConfig::PgdLinf(PgdParams {
            loss: LossKind::CrossEntropy,
            eps,
            nb_iter,
            eps_iter: args.eps_iter.unwrap_or(2.5 * eps / nb_iter.max(1) as f64),
            rand_init: true,
            targeted: false,
            clip_min: 0.0,
            clip_max: 1.0,
        });
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Some(cfg)
    } else {
        None
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed,
        attack,
        eps_warmup_epochs: args.eps_warmup,
    };
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr >= 0.0) {
        return Err(CliError::Usage("--epochs and --batch-size must be positive and --lr >= 0".into()));
    }
    let init = Model::init(arch, seed)?;
    let outcome = if args.adv {
        adversarial_train(&init, &loaded.data, &cfg)?
    } else {
        train(&init, &loaded.data, &cfg)?
    };
    save_model(&outcome.model, &args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let mut log = String::new();
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        log.push_str(&format!("epoch {}/{} loss {loss:.6}\n", i + 1, args.epochs));
    }
    let (_, digest) = sha256_file(&args.out)?;
    log.push_str(&format!("wrote {} sha256 {digest}\n", args.out.display()));
    Ok(log)
}

fn attack_report(
    command: &str,
    args: &AttackArgs,
    pipeline: &DefensePipeline,
    bpda: bool,
) -> CliResult<String> {
    let cfg = build_attack_config(&args.attack, &args.hyper)?;
    let start = Instant::now();
    let loaded = load_data(&args.data)?;
    let (model, model_info) = load_checked_model(&args.model, &loaded.data)?;
    let seed = args.seed.unwrap_or(0);
    let attacked = if bpda { pipeline.with_straight_through() } else { pipeline.clone() };
    let result = evaluate(&model, &loaded.data, Some(&cfg), Some(&attacked), seed)?;
    let report = AttackReport {
        version: toolbox_version(),
        command: command.into(),
        attack: Some(cfg.name().into()),
        config: Some(cfg),
        defense: pipeline.to_string(),
        bpda,
        model: model_info,
        dataset: loaded.info,
        seed,
        clean_acc: result.clean_acc,
        adv_acc: result.adv_acc,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    emit(&report, args.out.as_deref())
}

fn parse_pipeline(spec: &str) -> CliResult<DefensePipeline> {
    DefensePipeline::parse(spec).map_err(|e| CliError::Usage(format!("bad --defense: {e}")))
}

fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let pipeline = parse_pipeline(&args.defense)?;
    let start = Instant::now();
    let loaded = load_data(&args.data)?;
    let (model, model_info) = load_checked_model(&args.model, &loaded.data)?;
    let seed = args.seed.unwrap_or(0);
    let result = evaluate(&model, &loaded.data, None, Some(&pipeline), seed)?;
    let report = AttackReport {
        version: toolbox_version(),
        command: "eval".into(),
        attack: None,
        config: None,
        defense: pipeline.to_string(),
        bpda: false,
        model: model_info,
        dataset: loaded.info,
        seed,
        clean_acc: result.clean_acc,
        adv_acc: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    emit(&report, args.out.as_deref())
}

/// Runs a parsed command and returns what it prints on stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Attack(a) => attack_report("attack", a, &DefensePipeline::default(), false),
        Command::DefendEval(a) => {
            let pipeline = parse_pipeline(&a.defense)?;
            attack_report("defend-eval", &a.attack, &pipeline, a.bpda)
        }
        Command::Eval(a) => cmd_eval(a),
    }
}

/// Parses `args` (without the program name) and runs them.
pub fn run_args<I, S>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv = std::iter::once(std::ffi::OsString::from("advgrad")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(e.to_string())
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    run(&cli)
}

fn scalar_arg(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Command-line arguments that rerun the evaluation a report describes.
pub fn report_to_args(report: &AttackReport) -> Vec<String> {
    let mut args = vec![
        report.command.clone(),
        "--model".into(),
        report.model.path.clone(),
        "--images".into(),
        report.dataset.images.clone(),
        "--labels".into(),
        report.dataset.labels.clone(),
        "--limit".into(),
        report.dataset.size.to_string(),
        "--seed".into(),
        report.seed.to_string(),
    ];
    if let Some(cfg) = &report.config {
        let Value::Object(obj) = serde_json::to_value(cfg).expect("config serializes") else {
            unreachable!()
        };
        let obj: Map<String, Value> = obj;
        for (k, v) in &obj {
            if k == "name" {
                args.extend(["--attack".into(), scalar_arg(v)]);
            } else {
                args.extend([flag(k), scalar_arg(v)]);
            }
        }
    }
    if report.command != "attack" {
        args.extend(["--defense".into(), report.defense.clone()]);
    }
    if report.bpda {
        args.push("--bpda".into());
    }
    args
}
