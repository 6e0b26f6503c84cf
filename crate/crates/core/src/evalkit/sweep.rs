//! Factorial sweeps over selection rate, imputation constant or λ, with
//! per-cell aggregation over seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::imputers::ImputerSpec;
use crate::lexmodel::config::{FrozenSource, Regime, RunConfig, SelectionConfig, SelectionKind};
use crate::maskdist::rate_to_k;
use crate::synthgen::N_FEATURES;
use crate::trainer::{self, RunRecord, TrainOptions};

/// Selection rates 2/11 … 9/11.
pub const FIG3_RATES: [f64; 8] = [
    2.0 / 11.0,
    3.0 / 11.0,
    4.0 / 11.0,
    5.0 / 11.0,
    6.0 / 11.0,
    7.0 / 11.0,
    8.0 / 11.0,
    9.0 / 11.0,
];
pub const FULL_CONSTANTS: [f64; 20] = [
    -10.0, -9.0, -8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0,
];
pub const SHORT_CONSTANTS: [f64; 5] = [-10.0, -1.0, 0.0, 1.0, 9.0];
pub const LAMBDA_GRID: [f64; 10] = [0.01, 0.05, 0.1, 0.3, 0.5, 1.0, 2.0, 5.0, 10.0, 100.0];

pub const CSV_HEADER: &str =
    "dataset,preset,rate_or_constant_or_lambda,seed_count,acc_mean,acc_std,tpr_mean,tpr_std,fpr_mean,fpr_std,fdr_mean,fdr_std,eff_rate_mean";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Rates,
    Constant,
    Lambda,
}

impl std::str::FromStr for SweepKind {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rates" => Ok(SweepKind::Rates),
            "constant" => Ok(SweepKind::Constant),
            "lambda" => Ok(SweepKind::Lambda),
            other => Err(LexError::Config(format!("unknown sweep {other:?} (rates, constant, lambda)"))),
        }
    }
}

/// One imputation/regime variant of the base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// The base config unchanged.
    Base,
    GaussianStd,
    /// Constant imputation, trained jointly.
    Constant,
    /// Constant imputation behind a frozen surrogate predictor.
    SurrogateConstant,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::GaussianStd => "gaussian_std",
            Arm::Constant => "constant",
            Arm::SurrogateConstant => "surrogate_constant",
        }
    }

    /// Rewrites the imputer and regime of `cfg`; `c` is the imputation constant.
    pub fn apply(self, cfg: &mut RunConfig, c: f64) {
        match self {
            Arm::Base => {}
            Arm::GaussianStd => {
                cfg.imputer = ImputerSpec::GaussianStd;
                cfg.regime.kind = Regime::FreeInsitu;
            }
            Arm::Constant => {
                cfg.imputer = ImputerSpec::Constant { c };
                cfg.regime.kind = Regime::FreeInsitu;
            }
            Arm::SurrogateConstant => {
                cfg.imputer = ImputerSpec::Constant { c };
                cfg.regime.kind = Regime::FixedThetaInsitu;
                cfg.regime.frozen_source = FrozenSource::Surrogate;
            }
        }
    }
}

fn subset(k: usize, tau: f64) -> SelectionConfig {
    SelectionConfig {
        mode: SelectionKind::Subset,
        k: Some(k),
        rate: None,
        tau,
        lambda: 0.0,
    }
}

/// The config of one sweep cell and seed.
pub fn cell_config(base: &RunConfig, kind: SweepKind, arm: Arm, value: f64, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.dataset.seed = seed;
    cfg.train.seed = seed;
    let tau = cfg.selection.tau;
    match kind {
        SweepKind::Rates => {
            arm.apply(&mut cfg, 0.0);
            cfg.selection = subset(rate_to_k(value, N_FEATURES), tau);
        }
        SweepKind::Constant => {
            arm.apply(&mut cfg, value);
            if cfg.selection.mode != SelectionKind::Subset {
                cfg.selection = subset(5, tau);
            }
        }
        SweepKind::Lambda => {
            arm.apply(&mut cfg, 0.0);
            cfg.selection = SelectionConfig {
                mode: SelectionKind::Bernoulli,
                k: None,
                rate: None,
                tau,
                lambda: value,
            };
        }
    }
    cfg
}

/// One run of a sweep; failed runs keep their error and are left out of the
/// aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRun {
    pub arm: Arm,
    pub value: f64,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub dataset: String,
    pub preset: String,
    pub value: f64,
    pub seed_count: usize,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub tpr_mean: f64,
    pub tpr_std: f64,
    pub fpr_mean: f64,
    pub fpr_std: f64,
    pub fdr_mean: f64,
    pub fdr_std: f64,
    pub eff_rate_mean: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub kind: SweepKind,
    pub runs: Vec<SweepRun>,
    pub cells: Vec<CellSummary>,
}

impl SweepOutcome {
    pub fn cell(&self, arm: Arm, value: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.preset == arm.name() && c.value == value)
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Folds completed runs into one summary per (arm, value), in first-seen order.
pub fn aggregate(dataset: &str, runs: &[SweepRun]) -> Vec<CellSummary> {
    let mut keys: Vec<(Arm, f64)> = Vec::new();
    for r in runs {
        if !keys.iter().any(|&(a, v)| a == r.arm && v == r.value) {
            keys.push((r.arm, r.value));
        }
    }
    keys.into_iter()
        .map(|(arm, value)| {
            let ms: Vec<_> = runs
                .iter()
                .filter(|r| r.arm == arm && r.value == value)
                .filter_map(|r| r.record.as_ref().and_then(|rec| rec.test_metrics))
                .collect();
            let col = |f: fn(&crate::evalkit::SelectionMetrics) -> f64| mean_std(&ms.iter().map(f).collect::<Vec<_>>());
            let (acc_mean, acc_std) = col(|m| m.accuracy);
            let (tpr_mean, tpr_std) = col(|m| m.tpr);
            let (fpr_mean, fpr_std) = col(|m| m.fpr);
            let (fdr_mean, fdr_std) = col(|m| m.fdr);
            let (eff_rate_mean, _) = col(|m| m.effective_rate);
            CellSummary {
                dataset: dataset.to_string(),
                preset: arm.name().to_string(),
                value,
                seed_count: ms.len(),
                acc_mean,
                acc_std,
                tpr_mean,
                tpr_std,
                fpr_mean,
                fpr_std,
                fdr_mean,
                fdr_std,
                eff_rate_mean,
            }
        })
        .collect()
}

pub fn to_csv(cells: &[CellSummary]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.dataset,
            c.preset,
            c.value,
            c.seed_count,
            c.acc_mean,
            c.acc_std,
            c.tpr_mean,
            c.tpr_std,
            c.fpr_mean,
            c.fpr_std,
            c.fdr_mean,
            c.fdr_std,
            c.eff_rate_mean
        );
    }
    s
}

pub fn write_csv(cells: &[CellSummary], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(cells)).map_err(|e| LexError::io(path, e))
}

/// Runs every (arm, value, seed) combination on up to `jobs` workers.
/// With `out_dir`, each run writes its checkpoints under `runs/`.
pub fn sweep(
    base: &RunConfig,
    kind: SweepKind,
    arms: &[Arm],
    values: &[f64],
    seeds: &[u64],
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<SweepOutcome> {
    let mut plan = Vec::new();
    for &arm in arms {
        for &value in values {
            for &seed in seeds {
                plan.push((arm, value, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| LexError::Config(format!("worker pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        plan.par_iter()
            .map(|&(arm, value, seed)| {
                let cfg = cell_config(base, kind, arm, value, seed);
                let opts = TrainOptions {
                    out_dir: out_dir.map(|d| run_dir(d, arm, value, seed)),
                    verbose: false,
                };
                match trainer::run_config(&cfg, &opts) {
                    Ok(out) => SweepRun {
                        arm,
                        value,
                        seed,
                        record: Some(out.record),
                        error: None,
                    },
                    Err(e) => SweepRun {
                        arm,
                        value,
                        seed,
                        record: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    let cells = aggregate(&base.dataset.name.to_string(), &runs);
    Ok(SweepOutcome { kind, runs, cells })
}

fn run_dir(root: &Path, arm: Arm, value: f64, seed: u64) -> PathBuf {
    root.join("runs").join(format!("{}_{}_{}", arm.name(), value, seed))
}

/// Rate × seed × {gaussian_std, constant 0, surrogate constant 0}.
pub fn sweep_rates(base: &RunConfig, rates: &[f64], seeds: &[u64], jobs: usize, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    for &r in rates {
        let k = rate_to_k(r, N_FEATURES);
        if k == 0 || k > N_FEATURES {
            return Err(LexError::Config(format!("rate {r} maps to k={k}")));
        }
    }
    sweep(base, SweepKind::Rates, &[Arm::GaussianStd, Arm::Constant, Arm::SurrogateConstant], rates, seeds, jobs, out_dir)
}

/// Constant × seed × {constant, surrogate constant}.
pub fn sweep_constant(base: &RunConfig, constants: &[f64], seeds: &[u64], jobs: usize, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    sweep(base, SweepKind::Constant, &[Arm::Constant, Arm::SurrogateConstant], constants, seeds, jobs, out_dir)
}

/// λ × seed with Bernoulli selection and L1.
pub fn sweep_lambda(base: &RunConfig, lambdas: &[f64], seeds: &[u64], jobs: usize, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(LexError::Config("lambda values must be >= 0".into()));
    }
    sweep(base, SweepKind::Lambda, &[Arm::Base], lambdas, seeds, jobs, out_dir)
}
