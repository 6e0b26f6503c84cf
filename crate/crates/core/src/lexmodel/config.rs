//! Run configuration: one JSON document with sections `dataset`, `imputer`,
//! `selection`, `estimator`, `model`, `train`, `regime`, optionally seeded
//! from a named preset.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{LexError, Result};
use crate::imputers::ImputerSpec;
use crate::maskdist::{rate_to_k, MaskMode};
use crate::synthgen::{SynthName, X10Sign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "DatasetConfig::default_name")]
    pub name: SynthName,
    #[serde(default = "DatasetConfig::default_n")]
    pub n_train: usize,
    #[serde(default = "DatasetConfig::default_n")]
    pub n_test: usize,
    /// Base seed of the generated replicate.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub x10_sign: X10Sign,
    /// Load the train/test CSVs instead of generating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
}

impl DatasetConfig {
    fn default_name() -> SynthName {
        SynthName::S3
    }

    fn default_n() -> usize {
        10_000
    }
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: SynthName::S3,
            n_train: 10_000,
            n_test: 10_000,
            seed: 0,
            x10_sign: X10Sign::Negative,
            train_path: None,
            test_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    Bernoulli,
    Subset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub mode: SelectionKind,
    /// Subset size; alternatively `rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// L1 weight on the expected selection size (Bernoulli only).
    #[serde(default)]
    pub lambda: f64,
}

fn default_tau() -> f64 {
    0.5
}

impl SelectionConfig {
    pub fn mask_mode(&self, d: usize) -> Result<MaskMode> {
        let mode = match self.mode {
            SelectionKind::Bernoulli => {
                if self.k.is_some() || self.rate.is_some() {
                    return Err(LexError::Config("selection.k/rate apply to subset mode only".into()));
                }
                MaskMode::Bernoulli
            }
            SelectionKind::Subset => {
                if self.lambda != 0.0 {
                    return Err(LexError::Config("L1 regularization needs bernoulli selection".into()));
                }
                let k = match (self.k, self.rate) {
                    (Some(k), None) => k,
                    (None, Some(r)) => rate_to_k(r, d),
                    (Some(_), Some(_)) => return Err(LexError::Config("give selection.k or selection.rate, not both".into())),
                    (None, None) => return Err(LexError::Config("subset selection needs k or rate".into())),
                };
                MaskMode::Subset { k }
            }
        };
        mode.validate(d)?;
        if !(self.tau > 0.0) {
            return Err(LexError::Config(format!("selection.tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(LexError::Config(format!("selection.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Reinforce,
    PathwiseSt,
    Rebar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaselineConfig {
    None,
    MovingAverage {
        #[serde(default = "default_decay")]
        decay: f64,
    },
}

fn default_decay() -> f64 {
    0.99
}

/// How relaxed masks reach the predictor in pathwise terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelaxedInput {
    /// Continuous for constant imputation, straight-through otherwise.
    #[default]
    Auto,
    StraightThrough,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_baseline")]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub relaxed_input: RelaxedInput,
}

fn default_eta() -> f64 {
    1.0
}

fn default_baseline() -> BaselineConfig {
    BaselineConfig::None
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(LexError::Config(format!("estimator.tau must be positive, got {}", self.tau)));
        }
        if let BaselineConfig::MovingAverage { decay } = self.baseline {
            if !(0.0..1.0).contains(&decay) {
                return Err(LexError::Config(format!("baseline decay {decay} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_predictor")]
    pub predictor_hidden: Vec<usize>,
    #[serde(default = "ModelConfig::default_selector")]
    pub selector_hidden: Vec<usize>,
    /// L: mask importance samples.
    #[serde(default = "ModelConfig::default_l")]
    pub mask_samples: usize,
    /// K: imputation importance samples.
    #[serde(default = "ModelConfig::default_k")]
    pub imputation_samples: usize,
    /// Overrides the selector's output bias at initialisation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector_bias_init: Option<f64>,
}

impl ModelConfig {
    fn default_predictor() -> Vec<usize> {
        vec![200, 200, 200]
    }

    fn default_selector() -> Vec<usize> {
        vec![200, 200]
    }

    fn default_l() -> usize {
        10
    }

    fn default_k() -> usize {
        1
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            predictor_hidden: Self::default_predictor(),
            selector_hidden: Self::default_selector(),
            mask_samples: 10,
            imputation_samples: 1,
            selector_bias_init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_epochs")]
    pub epochs: usize,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "TrainConfig::default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "TrainConfig::default_eval_masks")]
    pub eval_masks: usize,
}

impl TrainConfig {
    fn default_epochs() -> usize {
        200
    }

    fn default_batch() -> usize {
        1000
    }

    fn default_lr() -> f64 {
        1e-4
    }

    fn default_wd() -> f64 {
        1e-3
    }

    fn default_eval_masks() -> usize {
        100
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 1000,
            lr: 1e-4,
            weight_decay: 1e-3,
            seed: 0,
            checkpoint_every: 0,
            eval_masks: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    FreeInsitu,
    FixedThetaInsitu,
    SelfPosthoc,
    SurrogatePosthoc,
}

/// Where a frozen predictor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrozenSource {
    /// Trained on randomly masked, imputed inputs (restricted-predictor surrogate).
    Surrogate,
    /// Trained on fully observed inputs.
    FullData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub kind: Regime,
    /// Source of θ for the fixed-θ regime (self post-hoc always uses full data).
    #[serde(default = "RegimeConfig::default_source")]
    pub frozen_source: FrozenSource,
    /// Epochs for pretraining a frozen predictor or the external model.
    #[serde(default = "RegimeConfig::default_pretrain")]
    pub pretrain_epochs: usize,
}

impl RegimeConfig {
    fn default_source() -> FrozenSource {
        FrozenSource::Surrogate
    }

    fn default_pretrain() -> usize {
        200
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub imputer: ImputerSpec,
    pub selection: SelectionConfig,
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub regime: RegimeConfig,
}

pub const PRESETS: [&str; 5] = ["l2x", "invase", "realx", "lex-gaussian", "lex-gmm"];

/// Sections of a named preset, as JSON.
pub fn preset_value(name: &str) -> Result<Value> {
    let rebar = json!({"kind": "rebar"});
    let v = match name {
        "l2x" => json!({
            "imputer": {"kind": "constant", "c": 0.0},
            "selection": {"mode": "subset", "k": 5},
            "estimator": rebar,
            "regime": {"kind": "surrogate_posthoc"},
        }),
        "invase" => json!({
            "imputer": {"kind": "constant", "c": 0.0},
            "selection": {"mode": "bernoulli", "lambda": 0.1},
            "estimator": rebar,
            "regime": {"kind": "free_insitu"},
        }),
        "realx" => json!({
            "imputer": {"kind": "constant", "c": 0.0},
            "selection": {"mode": "bernoulli", "lambda": 0.1},
            "estimator": rebar,
            "regime": {"kind": "fixed_theta_insitu", "frozen_source": "surrogate"},
        }),
        "lex-gaussian" => json!({
            "imputer": {"kind": "gaussian_std"},
            "selection": {"mode": "subset", "k": 5},
            "estimator": rebar,
            "regime": {"kind": "free_insitu"},
        }),
        "lex-gmm" => json!({
            "imputer": {"kind": "gmm", "components": 10},
            "selection": {"mode": "subset", "k": 5},
            "estimator": rebar,
            "regime": {"kind": "free_insitu"},
        }),
        other => {
            return Err(LexError::Config(format!(
                "unknown preset {other:?} (known: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(v)
}

/// Recursive object merge. Sections whose discriminating key is overridden
/// are replaced wholesale so stale variant fields do not leak through.
fn merge(base: &mut Value, over: &Value, depth: usize) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let replaces = depth == 0
                    && matches!(k.as_str(), "imputer" | "selection")
                    && v.get("kind").or_else(|| v.get("mode")).is_some();
                match b.get_mut(k) {
                    Some(slot) if !replaces => merge(slot, v, depth + 1),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

impl RunConfig {
    /// Parses a config document, expanding `preset` before applying the
    /// document's own sections on top.
    pub fn from_value(doc: Value) -> Result<RunConfig> {
        let mut base = match doc.get("preset") {
            Some(Value::String(p)) => {
                let mut v = preset_value(p)?;
                v["preset"] = Value::String(p.clone());
                v
            }
            Some(other) => return Err(LexError::Config(format!("preset must be a string, got {other}"))),
            None => json!({}),
        };
        merge(&mut base, &doc, 0);
        let cfg: RunConfig = serde_json::from_value(base).map_err(|e| LexError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text).map_err(|e| LexError::Config(e.to_string()))?;
        RunConfig::from_value(v)
    }

    pub fn preset(name: &str) -> Result<RunConfig> {
        RunConfig::from_value(json!({ "preset": name }))
    }

    pub fn validate(&self) -> Result<()> {
        self.estimator.validate()?;
        let d = crate::synthgen::N_FEATURES;
        self.selection.mask_mode(d)?;
        let m = &self.model;
        if m.mask_samples == 0 || m.imputation_samples == 0 {
            return Err(LexError::Config("model.mask_samples and model.imputation_samples must be >= 1".into()));
        }
        if m.predictor_hidden.contains(&0) || m.selector_hidden.contains(&0) {
            return Err(LexError::Config("hidden widths must be positive".into()));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(LexError::Config("train.epochs and train.batch_size must be >= 1".into()));
        }
        if !(t.lr > 0.0) || !(t.weight_decay >= 0.0) {
            return Err(LexError::Config("train.lr must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
