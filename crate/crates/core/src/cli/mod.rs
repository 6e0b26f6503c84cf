//! `lex` command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::{LexError, Result};
use crate::evalkit::{self, sweep, SweepKind};
use crate::imputers::{fit_imputer, ImputerSpec, DEFAULT_COMPONENTS};
use crate::lexmodel::config::RunConfig;
use crate::rng::stream;
use crate::synthgen::{self, gen_replicate, load_dataset, save_dataset, SynthName, Split, X10Sign};
use crate::trainer::{self, TrainOptions};

pub const MANIFEST: &str = "manifest.json";
pub const SEED_ENV: &str = "LEX_SEED";

#[derive(Debug, Parser)]
#[command(name = "lex", version, about = "Latent-variable feature selection: data, imputers, training, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic replicates.
    GenData(GenDataArgs),
    /// Fit an imputation scheme on a train CSV.
    FitImputer(FitImputerArgs),
    /// Train one model from a config file.
    Train(TrainArgs),
    /// Evaluate a trained run on a test CSV.
    Eval(EvalArgs),
    /// Run a rate, constant or lambda sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value = "s3")]
    pub dataset: SynthName,
    #[arg(long, default_value_t = 10_000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 10_000)]
    pub n_test: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub replicates: usize,
    /// Use `exp(+x10)` in the third branch instead of `exp(-x10)`.
    #[arg(long)]
    pub positive_x10: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitImputerArgs {
    /// constant, marginal, gaussian_std, gmm, gmm_means, gmm_dataset,
    /// kmeans_dataset, logistics, logistics_means
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    pub components: usize,
    /// Fill value for `constant`.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub c: f64,
    /// Grid size for the logistics kinds.
    #[arg(long, default_value_t = crate::imputers::DEFAULT_LEVELS)]
    pub levels: u32,
    /// Add uniform dequantisation noise before fitting the gmm kinds.
    #[arg(long)]
    pub dequantize: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use this fitted imputer instead of fitting the configured one.
    #[arg(long)]
    pub imputer: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = evalkit::EVAL_MASKS)]
    pub masks: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub sweep: SweepKind,
    /// Comma-separated values; defaults to the standard grid of the sweep.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Option<Vec<f64>>,
    /// Number of seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Keep per-run checkpoints under `<out>/runs/`.
    #[arg(long)]
    pub keep_runs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::FitImputer(a) => cmd_fit_imputer(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// `--seed`, else `LEX_SEED`, else `fallback`.
pub fn resolve_seed(flag: Option<u64>, fallback: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| LexError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(fallback),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LexError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| LexError::io(path, e))
}

/// Index of everything a command wrote under its output directory.
fn write_manifest(out: &Path, command: &str, files: &[String], extra: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "files": files,
        "details": extra,
    });
    write(&out.join(MANIFEST), &serde_json::to_string_pretty(&doc)?)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    if a.replicates == 0 || a.n_train == 0 || a.n_test == 0 {
        return Err(LexError::Config("replicates, n-train and n-test must be >= 1".into()));
    }
    let seed = resolve_seed(a.seed, 0)?;
    let x10 = if a.positive_x10 { X10Sign::Positive } else { X10Sign::Negative };
    ensure_dir(&a.out)?;
    let mut files = Vec::new();
    let mut reps = Vec::new();
    for r in 0..a.replicates {
        let rep_seed = seed + r as u64;
        let rep = gen_replicate(a.dataset, a.n_train, a.n_test, rep_seed, x10);
        let stem = format!("{}_rep{r}", a.dataset.to_string().to_lowercase());
        let train = format!("{stem}_train.csv");
        let test = format!("{stem}_test.csv");
        save_dataset(&rep.train, &a.out.join(&train))?;
        save_dataset(&rep.test, &a.out.join(&test))?;
        reps.push(json!({"replicate": r, "seed": rep_seed, "train": train, "test": test}));
        files.push(train);
        files.push(test);
    }
    write_manifest(
        &a.out,
        "gen-data",
        &files,
        json!({"dataset": a.dataset.to_string(), "n_train": a.n_train, "n_test": a.n_test, "seed": seed, "replicates": reps}),
    )
}

fn imputer_spec(a: &FitImputerArgs) -> Result<ImputerSpec> {
    let v = match a.kind.as_str() {
        "constant" => json!({"kind": "constant", "c": a.c}),
        "marginal" | "gaussian_std" => json!({"kind": a.kind}),
        "gmm" | "gmm_means" | "gmm_dataset" => json!({"kind": a.kind, "components": a.components, "dequantize": a.dequantize}),
        "kmeans_dataset" => json!({"kind": a.kind, "components": a.components}),
        "logistics" | "logistics_means" => json!({"kind": a.kind, "components": a.components, "levels": a.levels}),
        other => return Err(LexError::Config(format!("unknown imputer kind {other:?}"))),
    };
    serde_json::from_value(v).map_err(|e| LexError::Config(e.to_string()))
}

pub fn cmd_fit_imputer(a: &FitImputerArgs) -> Result<()> {
    let spec = imputer_spec(a)?;
    let seed = resolve_seed(a.seed, 0)?;
    let (train, val, d) = match &a.data {
        Some(p) => {
            let ds = load_dataset(p)?;
            (trainer::train_rows(&ds).x, ds.subset(Split::Val).x, ds.n_features)
        }
        None if !spec.needs_fit() => (Vec::new(), Vec::new(), synthgen::N_FEATURES),
        None => return Err(LexError::Config(format!("--data is required for {}", spec.kind_name()))),
    };
    let (imputer, report) = if spec.needs_fit() {
        fit_imputer(&spec, &train, &val, d, seed)?
    } else {
        (spec.unfitted()?, Default::default())
    };
    ensure_dir(&a.out)?;
    imputer.save(&a.out.join(trainer::IMPUTER_FILE))?;
    write(&a.out.join("fit_report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_manifest(
        &a.out,
        "fit-imputer",
        &[trainer::IMPUTER_FILE.to_string(), "fit_report.json".to_string()],
        json!({"kind": spec.kind_name(), "seed": seed}),
    )
}

/// Reads a config; relative data paths are taken from the config's directory.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json(&read(path)?)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut cfg.dataset.train_path, &mut cfg.dataset.test_path].into_iter().flatten() {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    cfg.train.seed = resolve_seed(a.seed, cfg.train.seed)?;
    ensure_dir(&a.out)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        verbose: a.verbose,
    };
    let (train_ds, test) = trainer::load_or_generate(&cfg)?;
    let (imputer, report) = match &a.imputer {
        Some(p) => (crate::imputers::Imputer::load(p)?, None),
        None => {
            let (i, r) = trainer::fit_configured_imputer(&cfg, &train_ds)?;
            (i, Some(r))
        }
    };
    let mut out = trainer::train(&cfg, &train_ds, Some(&test), imputer, &opts)?;
    out.record.imputer_fit = report;
    let mut files = trainer::save_run(&a.out, &cfg, &out.model, &out.record)?;
    let metrics = out.record.test_metrics;
    if let Some(m) = &metrics {
        write(&a.out.join("metrics.json"), &serde_json::to_string_pretty(m)?)?;
        files.push("metrics.json".into());
    }
    write_manifest(&a.out, "train", &files, json!({"seed": cfg.train.seed, "metrics": metrics}))?;
    if let Some(m) = metrics {
        println!("tpr {:.4}  fpr {:.4}  fdr {:.4}  accuracy {:.4}", m.tpr, m.fpr, m.fdr, m.accuracy);
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, model) = trainer::load_run(&a.run)?;
    let test = load_dataset(&a.data)?;
    let seed = resolve_seed(a.seed, cfg.train.seed)?;
    let m = evalkit::evaluate_model(&model, &test, a.masks, &mut stream(seed, "eval"))?;
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    ensure_dir(&out)?;
    write(&out.join("eval_metrics.json"), &serde_json::to_string_pretty(&m)?)?;
    // the run directory already has a manifest from training
    if a.out.is_some() {
        write_manifest(&out, "eval", &["eval_metrics.json".to_string()], json!({"seed": seed, "data": a.data}))?;
    }
    println!("{}", serde_json::to_string(&m)?);
    Ok(())
}

pub fn default_values(kind: SweepKind) -> Vec<f64> {
    match kind {
        SweepKind::Rates => evalkit::FIG3_RATES.to_vec(),
        SweepKind::Constant => evalkit::FULL_CONSTANTS.to_vec(),
        SweepKind::Lambda => evalkit::LAMBDA_GRID.to_vec(),
    }
}

/// One line per run, failed runs included.
pub fn runs_csv(dataset: &str, runs: &[sweep::SweepRun]) -> String {
    let mut s = String::from("dataset,preset,rate_or_constant_or_lambda,seed,acc,tpr,fpr,fdr,eff_rate,error\n");
    for r in runs {
        let m = r.record.as_ref().and_then(|rec| rec.test_metrics);
        let f = |g: fn(&evalkit::SelectionMetrics) -> f64| m.as_ref().map_or(String::new(), |m| g(m).to_string());
        s.push_str(&format!(
            "{dataset},{},{},{},{},{},{},{},{},{}\n",
            r.arm.name(),
            r.value,
            r.seed,
            f(|m| m.accuracy),
            f(|m| m.tpr),
            f(|m| m.fpr),
            f(|m| m.fdr),
            f(|m| m.effective_rate),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        ));
    }
    s
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    if a.seeds == 0 {
        return Err(LexError::Config("--seeds must be >= 1".into()));
    }
    let first = resolve_seed(a.seed, cfg.train.seed)?;
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|i| first + i).collect();
    let values = a.values.clone().unwrap_or_else(|| default_values(a.sweep));
    ensure_dir(&a.out)?;
    let keep = a.keep_runs.then_some(a.out.as_path());
    let outcome = match a.sweep {
        SweepKind::Rates => evalkit::sweep_rates(&cfg, &values, &seeds, a.jobs, keep)?,
        SweepKind::Constant => evalkit::sweep_constant(&cfg, &values, &seeds, a.jobs, keep)?,
        SweepKind::Lambda => evalkit::sweep_lambda(&cfg, &values, &seeds, a.jobs, keep)?,
    };
    let dataset = cfg.dataset.name.to_string();
    evalkit::write_csv(&outcome.cells, &a.out.join("sweep.csv"))?;
    write(&a.out.join("runs.csv"), &runs_csv(&dataset, &outcome.runs))?;
    write(&a.out.join("runs.json"), &serde_json::to_string_pretty(&outcome.runs)?)?;
    let failed = outcome.runs.iter().filter(|r| r.error.is_some()).count();
    write_manifest(
        &a.out,
        "sweep",
        &["sweep.csv".into(), "runs.csv".into(), "runs.json".into()],
        json!({"sweep": outcome.kind, "values": values, "seeds": seeds, "runs": outcome.runs.len(), "failed": failed}),
    )?;
    println!("{} runs ({failed} failed), {} cells", outcome.runs.len(), outcome.cells.len());
    Ok(())
}
