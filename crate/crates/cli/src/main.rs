//! `eqgat`: train, evaluate and check EQGAT models from the command line.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eqgat_core::checkpoint::Checkpoint;
use eqgat_core::data::{apply_overrides, load_config, read_xyz, split_dataset, MoleculeRecord, RunConfig};
use eqgat_core::model::{EncoderConfig, Model};
use eqgat_core::testkit::{compact_cloud, model_equivariance};
use eqgat_core::training::{evaluate, loss_gradcheck, prepare_samples, train, TargetNormalizer};
use eqgat_core::EqgatError;
use serde_json::{json, Value};

/// Largest cloud and channel count `gradcheck` accepts without `--force`.
const GRADCHECK_MAX_ATOMS: usize = 10;
const GRADCHECK_MAX_SCALARS: usize = 16;
const GRADCHECK_TOLERANCE: f64 = 1e-6;
const EQUIVARIANCE_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(
    name = "eqgat",
    version,
    about = "Equivariant graph attention for molecular point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named in the config and write a checkpoint.
    Train(TrainArgs),
    /// Report MAE of a checkpoint on a dataset split or an XYZ file.
    Evaluate(EvaluateArgs),
    /// Print one JSON line per molecule of an XYZ file.
    Predict(PredictArgs),
    /// Compare backpropagated loss gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Check rotation equivariance of a fresh or loaded model.
    Equivariance(EquivarianceArgs),
    /// Print parameter counts per component.
    Inspect(ModelArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving the checkpoint, metric log and resolved config.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// XYZ file to score in full instead of a split of the configured dataset.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Split of the configured dataset: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PredictArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// XYZ file with one or more molecules.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Load the model from a checkpoint instead of initializing one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Atoms in the random test cloud.
    #[arg(long, default_value_t = 5)]
    atoms: usize,
    /// Allow clouds and widths beyond the exhaustive-check guard.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EquivarianceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Atoms per random cloud.
    #[arg(long, default_value_t = 20)]
    atoms: usize,
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<EqgatError> for Failure {
    fn from(e: EqgatError) -> Self {
        let code = match e {
            EqgatError::Config(_)
            | EqgatError::Parse { .. }
            | EqgatError::Dataset(_)
            | EqgatError::Checkpoint(_)
            | EqgatError::UnknownAtom { .. }
            | EqgatError::InvalidCloud(_)
            | EqgatError::CoincidentPoints { .. } => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    /// A closed stdout (e.g. piping into `head`) ends the command quietly.
    fn from(e: std::io::Error) -> Self {
        let code = if e.kind() == std::io::ErrorKind::BrokenPipe {
            0
        } else {
            1
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Equivariance(a) => cmd_equivariance(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) if f.code == 0 => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| Failure::usage("this command needs --config"))?;
    Ok(load_config(path)?.with_overrides(&args.overrides)?)
}

/// The model section of `--config` when given, otherwise `default`, with
/// `model.*` overrides applied.
fn model_config(args: &ConfigArgs, default: EncoderConfig) -> Result<EncoderConfig, Failure> {
    if args.config.is_some() {
        return Ok(run_config(args)?.model);
    }
    let mut value = json!({ "model": serde_json::to_value(default).map_err(EqgatError::from)? });
    apply_overrides(&mut value, &args.overrides)?;
    let config: EncoderConfig =
        serde_json::from_value(value["model"].take()).map_err(|e| EqgatError::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

fn load_model(args: &ModelArgs, default: EncoderConfig) -> Result<Model, Failure> {
    match &args.checkpoint {
        Some(path) => Ok(Checkpoint::load(path)?.to_model()?),
        None => Ok(Model::new(model_config(&args.config, default)?, args.seed)?),
    }
}

fn read_dataset(path: &Path) -> Result<Vec<MoleculeRecord>, Failure> {
    if !path.exists() {
        return Err(Failure::usage(format!("dataset not found: {}", path.display())));
    }
    Ok(read_xyz(path)?)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut config = run_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let records = read_dataset(&config.data.path)?;
    let split = split_dataset(&records, config.train.split, config.seed)?;
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let target = &config.data.target;
    let train_set = prepare_samples(&model, &split.train, target)?;
    let val_set = prepare_samples(&model, &split.val, target)?;
    let test_set = prepare_samples(&model, &split.test, target)?;

    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&config).map_err(EqgatError::from)?,
    )?;
    let mut log = fs::File::create(args.out.join("metrics.ndjson"))?;
    let outcome = train(&mut model, &train_set, &val_set, &config.train, config.seed, |record| {
        writeln!(log, "{}", serde_json::to_string(record)?)?;
        Ok(())
    })?;
    let test = evaluate(&model, &test_set, &outcome.normalizer)?;

    let mut checkpoint = Checkpoint::from_model(&model, config.seed, outcome.steps);
    checkpoint.target = Some(target.clone());
    checkpoint.units = Some(config.data.units.clone());
    checkpoint.normalizer = Some(outcome.normalizer);
    checkpoint.save(&args.out.join("checkpoint.json"))?;

    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
        "steps": outcome.steps,
        "final_lr": outcome.final_lr,
        "val": outcome.best_val,
        "test": test,
        "units": config.data.units,
    });
    println!("{summary}");
    Ok(true)
}

fn checkpoint_parts(path: &Path) -> Result<(Checkpoint, Model, TargetNormalizer), Failure> {
    let checkpoint = Checkpoint::load(path)?;
    let model = checkpoint.to_model()?;
    let normalizer = checkpoint.normalizer.unwrap_or_else(TargetNormalizer::identity);
    Ok((checkpoint, model, normalizer))
}

fn cmd_evaluate(args: EvaluateArgs) -> Outcome {
    let (checkpoint, model, normalizer) = checkpoint_parts(&args.checkpoint)?;
    let (records, target, label) = match &args.input {
        Some(path) => {
            let target = match (&checkpoint.target, args.config.config.is_some()) {
                (_, true) => run_config(&args.config)?.data.target,
                (Some(t), false) => t.clone(),
                (None, false) => return Err(Failure::usage("the checkpoint names no target; pass --config")),
            };
            (read_dataset(path)?, target, "input".to_string())
        }
        None => {
            let config = run_config(&args.config)?;
            let records = read_dataset(&config.data.path)?;
            let split = split_dataset(&records, config.train.split, config.seed)?;
            let chosen = match args.split.as_str() {
                "train" => split.train,
                "val" => split.val,
                "test" => split.test,
                "all" => records,
                other => return Err(Failure::usage(format!("unknown split {other:?}"))),
            };
            (chosen, config.data.target, args.split.clone())
        }
    };
    if records.is_empty() {
        return Err(Failure::usage("no molecules to evaluate"));
    }
    let samples = prepare_samples(&model, &records, &target)?;
    let result = evaluate(&model, &samples, &normalizer)?;
    let report = json!({
        "split": label,
        "molecules": samples.len(),
        "target": target,
        "mae_normalized": result.mae_normalized,
        "mae_original_units": result.mae_original_units,
        "units": checkpoint.units.unwrap_or_default(),
    });
    println!("{report}");
    Ok(true)
}

fn cmd_predict(args: PredictArgs) -> Outcome {
    let (checkpoint, model, normalizer) = checkpoint_parts(&args.checkpoint)?;
    let records = read_dataset(&args.input)?;
    if records.is_empty() {
        return Err(Failure::usage(format!(
            "{} contains no molecules",
            args.input.display()
        )));
    }
    let units = checkpoint.units.unwrap_or_default();
    let mut out = std::io::stdout().lock();
    for (index, record) in records.iter().enumerate() {
        let z = model.predict(&record.cloud).map_err(|e| Failure {
            message: format!("molecule {index}: {e}"),
            ..Failure::from(e)
        })?;
        let line = json!({ "index": index, "prediction": normalizer.denormalize(z), "units": units });
        writeln!(out, "{line}")?;
    }
    Ok(true)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Outcome {
    let config = model_config(&args.config, EncoderConfig::tiny())?;
    if !args.force && (args.atoms > GRADCHECK_MAX_ATOMS || config.scalar_channels > GRADCHECK_MAX_SCALARS) {
        return Err(Failure::usage(format!(
            "gradcheck is limited to {GRADCHECK_MAX_ATOMS} atoms and {GRADCHECK_MAX_SCALARS} scalar channels \
             (got {} atoms, {} channels); pass --force to run anyway",
            args.atoms, config.scalar_channels
        )));
    }
    if args.atoms == 0 {
        return Err(Failure::usage("--atoms must be at least 1"));
    }
    let model = Model::new(config, args.seed)?;
    let cloud = compact_cloud(args.seed, &model.config().vocabulary, args.atoms);
    let prepared = model.prepare(&cloud)?;
    let report = loss_gradcheck(&model, &prepared, 0.0, args.step, GRADCHECK_TOLERANCE)?;
    let worst = report
        .worst
        .clone()
        .map(|(name, index)| json!({ "parameter": name, "index": index }));
    let summary = json!({
        "worst_relative_error": report.max_relative_error,
        "worst": worst,
        "components": report.components_checked,
        "components_over_tolerance": report.failures.len(),
        "step": report.step,
        "tolerance": report.tolerance,
        "pass": report.passed(),
    });
    println!("{summary}");
    Ok(report.passed())
}

fn cmd_equivariance(args: EquivarianceArgs) -> Outcome {
    if args.trials == 0 || args.atoms == 0 {
        return Err(Failure::usage("--trials and --atoms must be at least 1"));
    }
    let model = load_model(&args.model, EncoderConfig::qm9())?;
    let report = model_equivariance(&model, args.trials, args.atoms, EQUIVARIANCE_TOLERANCE, args.model.seed)?;
    println!("{}", serde_json::to_string(&report).map_err(EqgatError::from)?);
    Ok(report.pass)
}

fn cmd_inspect(args: ModelArgs) -> Outcome {
    let model = load_model(&args, EncoderConfig::qm9())?;
    let breakdown: serde_json::Map<String, Value> = model
        .parameter_breakdown()
        .into_iter()
        .map(|(k, v)| (k, json!(v)))
        .collect();
    let report = json!({
        "config": model.config(),
        "total_parameters": model.num_parameters(),
        "breakdown": breakdown,
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(EqgatError::from)?);
    Ok(true)
}
