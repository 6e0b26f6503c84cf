//! Training loops for every regime, run records and checkpoints.

pub mod step;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffnet::{checkpoint, AdamConfig, Mlp, ParamStore};
use crate::error::{LexError, Result};
use crate::evalkit::{self, SelectionMetrics};
use crate::gradest::MovingAverage;
use crate::imputers::{fit_imputer, FitReport, Imputer};
use crate::lexmodel::config::{BaselineConfig, FrozenSource, Regime, RunConfig};
use crate::lexmodel::{
    minibatches, predictor_spec, regime_targets, train_predictor, FrozenPredictor, LexModel, PredictorMasks, RegimeContext,
};
use crate::rng::stream;
use crate::synthgen::{gen_replicate, load_dataset, Dataset, Split};

pub use step::{continuous_relaxation, train_step, StepSettings, StepStats};

pub const CLASSES: usize = 2;

/// Per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of `-bound + penalty` per example.
    pub loss: f64,
    pub selection_rate: f64,
    pub train_accuracy: f64,
}

/// Parameter digests taken before and after the main training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub predictor_before: u64,
    pub predictor_after: u64,
    pub selector_before: u64,
    pub selector_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub git: Option<String>,
    pub config: RunConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub imputer_fit: Option<FitReport>,
    /// Loss trace of predictor pretraining, when the regime needs it.
    pub pretrain_loss: Vec<f64>,
    pub theta_frozen: bool,
    pub epochs: Vec<EpochLog>,
    pub checksums: Checksums,
    pub test_metrics: Option<SelectionMetrics>,
    pub test_majority_rate: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record with wall-clock time cleared, for reproducibility checks.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<RunRecord> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints and abort diagnostics go here when set.
    pub out_dir: Option<PathBuf>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// A model with its regime machinery, ready for the main stage.
pub struct Prepared {
    pub model: LexModel<f32>,
    pub ctx: RegimeContext,
    pub theta_frozen: bool,
    pub pretrain_loss: Vec<f64>,
}

pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: LexModel<f32>,
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.train.lr,
        weight_decay: cfg.train.weight_decay,
        ..AdamConfig::default()
    }
}

fn labels(ds: &Dataset) -> Vec<usize> {
    ds.y.iter().map(|&v| usize::from(v)).collect()
}

/// Builds the model and runs whatever pretraining the regime calls for.
pub fn prepare(cfg: &RunConfig, train: &Dataset, imputer: Imputer) -> Result<Prepared> {
    cfg.validate()?;
    let d = train.n_features;
    let mode = cfg.selection.mask_mode(d)?;
    let seed = cfg.train.seed;
    let mut model = LexModel::<f32>::init(&cfg.model, d, CLASSES, mode, cfg.estimator.tau, imputer, &mut stream(seed, "train.init"))?;
    let adam = adam_config(cfg);
    let y = labels(train);
    let epochs = cfg.regime.pretrain_epochs;
    let batch = cfg.train.batch_size;
    let mut pre_rng = stream(seed, "train.pretrain");
    let mut ctx = RegimeContext::default();
    let mut pretrain_loss = Vec::new();
    let theta_frozen = match cfg.regime.kind {
        Regime::FreeInsitu => false,
        Regime::FixedThetaInsitu => {
            let masks = match cfg.regime.frozen_source {
                FrozenSource::Surrogate => PredictorMasks::Bernoulli(0.5),
                FrozenSource::FullData => PredictorMasks::AllObserved,
            };
            pretrain_loss = train_predictor(&model.predictor, &mut model.store, &model.imputer, masks, &train.x, &y, epochs, batch, &adam, &mut pre_rng)?;
            true
        }
        Regime::SelfPosthoc => {
            pretrain_loss = train_predictor(
                &model.predictor,
                &mut model.store,
                &model.imputer,
                PredictorMasks::AllObserved,
                &train.x,
                &y,
                epochs,
                batch,
                &adam,
                &mut pre_rng,
            )?;
            ctx.frozen = Some(FrozenPredictor {
                mlp: model.predictor.clone(),
                store: model.store.clone(),
            });
            true
        }
        Regime::SurrogatePosthoc => {
            let mut store = ParamStore::new();
            let mlp = Mlp::init(predictor_spec(&cfg.model, d, CLASSES), "external", &mut store, &mut pre_rng)?;
            pretrain_loss = train_predictor(&mlp, &mut store, &model.imputer, PredictorMasks::AllObserved, &train.x, &y, epochs, batch, &adam, &mut pre_rng)?;
            ctx.external = Some(Box::new(FrozenPredictor { mlp, store }));
            false
        }
    };
    Ok(Prepared {
        model,
        ctx,
        theta_frozen,
        pretrain_loss,
    })
}

fn save_checkpoint(store: &ParamStore<f32>, dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    let path = dir.join(name);
    checkpoint::save(store, &path)?;
    Ok(path)
}

/// Main stage: `epochs × ⌈n/batch⌉` steps on `train`.
pub fn fit(cfg: &RunConfig, prep: &mut Prepared, train: &Dataset, opts: &TrainOptions) -> Result<Vec<EpochLog>> {
    let d = train.n_features;
    let n = train.len();
    if cfg.train.batch_size > n {
        return Err(LexError::Config(format!("batch_size {} exceeds {n} training rows", cfg.train.batch_size)));
    }
    prep.ctx.check(cfg.regime.kind)?;
    let seed = cfg.train.seed;
    let mut shuffle = stream(seed, "train.shuffle");
    let mut masks = stream(seed, "train.masks");
    let mut impute = stream(seed, "train.impute");
    let mut targets_rng = stream(seed, "train.targets");
    let adam = adam_config(cfg);
    let settings = StepSettings {
        estimator: &cfg.estimator,
        lambda: cfg.selection.lambda,
        mask_samples: cfg.model.mask_samples,
        imputation_samples: cfg.model.imputation_samples,
        train_theta: !prep.theta_frozen,
        adam: &adam,
    };
    let mut baseline = match cfg.estimator.baseline {
        BaselineConfig::None => None,
        BaselineConfig::MovingAverage { decay } => Some(MovingAverage::new(decay)?),
    };
    let y = labels(train);
    let mut logs = Vec::with_capacity(cfg.train.epochs);
    let mut last_good = prep.model.store.clone();
    let mut xb = Vec::with_capacity(cfg.train.batch_size * d);
    for epoch in 1..=cfg.train.epochs {
        let (mut loss, mut rate, mut correct, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for (step_no, idx) in minibatches(n, cfg.train.batch_size, &mut shuffle).into_iter().enumerate() {
            xb.clear();
            for &i in &idx {
                xb.extend_from_slice(train.row(i));
            }
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let tb = regime_targets(cfg.regime.kind, &prep.ctx, &xb, &yb, &mut targets_rng)?;
            let stats = match train_step(&mut prep.model, &xb, &tb, &settings, &mut baseline, &mut masks, &mut impute) {
                Ok(s) => s,
                Err(LexError::Numerical(msg)) => return Err(abort(&last_good, opts, epoch, step_no, &msg)),
                Err(e) => return Err(e),
            };
            if prep.model.store.ids().any(|id| prep.model.store.tensor(id).data().iter().any(|v| !v.is_finite())) {
                return Err(abort(&last_good, opts, epoch, step_no, "non-finite parameters after update"));
            }
            last_good.clone_from(&prep.model.store);
            loss += stats.objective * idx.len() as f64;
            rate += stats.selection_rate * idx.len() as f64;
            correct += stats.correct;
            steps += idx.len();
        }
        let log = EpochLog {
            epoch,
            loss: loss / steps as f64,
            selection_rate: rate / steps as f64,
            train_accuracy: correct as f64 / steps as f64,
        };
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>4}  loss {:.5}  rate {:.3}  acc {:.4}",
                log.loss, log.selection_rate, log.train_accuracy
            );
        }
        logs.push(log);
        if let Some(dir) = &opts.out_dir {
            if cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0 {
                save_checkpoint(&prep.model.store, dir, &format!("epoch_{epoch:05}.ckpt"))?;
            }
        }
    }
    Ok(logs)
}

fn abort(last_good: &ParamStore<f32>, opts: &TrainOptions, epoch: usize, step: usize, msg: &str) -> LexError {
    let Some(dir) = &opts.out_dir else {
        return LexError::Numerical(format!("epoch {epoch} step {step}: {msg}"));
    };
    let dump = serde_json::json!({ "epoch": epoch, "step": step, "message": msg });
    let written = save_checkpoint(last_good, dir, "last_good.ckpt").and_then(|ckpt| {
        let path = dir.join("abort.json");
        std::fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| LexError::io(&path, e))?;
        Ok(ckpt)
    });
    match written {
        Ok(ckpt) => LexError::Numerical(format!(
            "epoch {epoch} step {step}: {msg}; last good parameters in {}, diagnostics in {}",
            ckpt.display(),
            dir.join("abort.json").display()
        )),
        Err(e) => LexError::Numerical(format!("epoch {epoch} step {step}: {msg}; could not write diagnostics: {e}")),
    }
}

/// Prepares, trains and (given a test set) evaluates one run.
pub fn train(cfg: &RunConfig, train: &Dataset, test: Option<&Dataset>, imputer: Imputer, opts: &TrainOptions) -> Result<TrainOutcome> {
    let started = Instant::now();
    let train_rows = train_rows(train);
    let mut prep = prepare(cfg, &train_rows, imputer)?;
    let pred_before = prep.model.predictor_checksum();
    let sel_before = prep.model.selector_checksum();
    let epochs = fit(cfg, &mut prep, &train_rows, opts)?;
    let checksums = Checksums {
        predictor_before: pred_before,
        predictor_after: prep.model.predictor_checksum(),
        selector_before: sel_before,
        selector_after: prep.model.selector_checksum(),
    };
    if prep.theta_frozen && checksums.predictor_before != checksums.predictor_after {
        return Err(LexError::State("frozen predictor changed during training".into()));
    }
    let test_metrics = match test {
        Some(t) => Some(evalkit::evaluate_model(&prep.model, t, cfg.train.eval_masks, &mut stream(cfg.train.seed, "eval"))?),
        None => None,
    };
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&prep.model.store, dir, "final.ckpt")?;
    }
    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        git: option_env!("LEX_GIT_REV").map(str::to_string),
        config: cfg.clone(),
        n_train: train_rows.len(),
        n_test: test.map_or(0, Dataset::len),
        imputer_fit: None,
        pretrain_loss: prep.pretrain_loss,
        theta_frozen: prep.theta_frozen,
        epochs,
        checksums,
        test_metrics,
        test_majority_rate: test.map(Dataset::majority_rate),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { record, model: prep.model })
}

/// Rows tagged for training; a file without any split tags is used whole.
pub fn train_rows(ds: &Dataset) -> Dataset {
    let t = ds.subset(Split::Train);
    if t.is_empty() {
        ds.clone()
    } else {
        t
    }
}

/// REAL-X's two-stage protocol: a predictor fitted on random masks, then the
/// selector trained against it with the predictor frozen.
pub fn surrogate_pipeline(cfg: &RunConfig, train_ds: &Dataset, test: Option<&Dataset>, imputer: Imputer, opts: &TrainOptions) -> Result<TrainOutcome> {
    if imputer.constant().is_none() {
        return Err(LexError::Config("the surrogate pipeline needs constant imputation".into()));
    }
    let mut cfg = cfg.clone();
    cfg.regime.kind = Regime::FixedThetaInsitu;
    cfg.regime.frozen_source = FrozenSource::Surrogate;
    train(&cfg, train_ds, test, imputer, opts)
}

/// Train and test sets for a config: loaded from its paths, or generated.
pub fn load_or_generate(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let ds = &cfg.dataset;
    match (&ds.train_path, &ds.test_path) {
        (Some(tr), Some(te)) => Ok((load_dataset(tr)?, load_dataset(te)?)),
        (None, None) => {
            let r = gen_replicate(ds.name, ds.n_train, ds.n_test, ds.seed, ds.x10_sign);
            Ok((r.train, r.test))
        }
        _ => Err(LexError::Config("dataset.train_path and dataset.test_path go together".into())),
    }
}

/// Fits the configured imputer on a train file's train and validation rows.
pub fn fit_configured_imputer(cfg: &RunConfig, train_ds: &Dataset) -> Result<(Imputer, FitReport)> {
    let val = train_ds.subset(Split::Val);
    fit_imputer(&cfg.imputer, &train_rows(train_ds).x, &val.x, train_ds.n_features, cfg.train.seed)
}

/// Data, imputer, training and evaluation for one config.
pub fn run_config(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let (train_ds, test) = load_or_generate(cfg)?;
    let (imputer, report) = fit_configured_imputer(cfg, &train_ds)?;
    let mut out = train(cfg, &train_ds, Some(&test), imputer, opts)?;
    out.record.imputer_fit = Some(report);
    Ok(out)
}

pub const CONFIG_FILE: &str = "config.json";
pub const IMPUTER_FILE: &str = "imputer.json";
pub const RECORD_FILE: &str = "run_record.json";
pub const FINAL_CKPT: &str = "final.ckpt";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LexError::io(path, e))
}

/// Writes everything [`load_run`] needs, plus the record. Returns the file names.
pub fn save_run(dir: &Path, cfg: &RunConfig, model: &LexModel<f32>, record: &RunRecord) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| LexError::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_json()?)?;
    model.imputer.save(&dir.join(IMPUTER_FILE))?;
    checkpoint::save(&model.store, &dir.join(FINAL_CKPT))?;
    write_text(&dir.join(RECORD_FILE), &record.to_json()?)?;
    Ok([CONFIG_FILE, IMPUTER_FILE, FINAL_CKPT, RECORD_FILE].map(str::to_string).to_vec())
}

/// Rebuilds a trained model from a run directory.
pub fn load_run(dir: &Path) -> Result<(RunConfig, LexModel<f32>)> {
    let path = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| LexError::io(&path, e))?;
    let cfg = RunConfig::from_json(&text)?;
    let imputer = Imputer::load(&dir.join(IMPUTER_FILE))?;
    let store: ParamStore<f32> = checkpoint::load(&dir.join(FINAL_CKPT))?;
    let model = assemble(&cfg, crate::synthgen::N_FEATURES, imputer, store)?;
    Ok((cfg, model))
}

/// A model around existing parameters.
pub fn assemble(cfg: &RunConfig, d: usize, imputer: Imputer, store: ParamStore<f32>) -> Result<LexModel<f32>> {
    let predictor = Mlp::bind(predictor_spec(&cfg.model, d, CLASSES), crate::lexmodel::PREDICTOR, &store)?;
    let selector = Mlp::bind(crate::lexmodel::selector_spec(&cfg.model, d), crate::lexmodel::SELECTOR, &store)?;
    Ok(LexModel {
        d,
        classes: CLASSES,
        store,
        predictor,
        selector,
        mode: cfg.selection.mask_mode(d)?,
        tau: cfg.estimator.tau,
        imputer,
    })
}
