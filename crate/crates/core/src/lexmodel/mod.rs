//! The LEX model: a selector `g_γ` emitting a mask law, an imputer filling
//! unselected features, and a predictor `f_θ` on the imputed input.

pub mod config;

use rand::seq::SliceRandom;
use rand::Rng;

pub use config::{
    BaselineConfig, DatasetConfig, EstimatorConfig, EstimatorKind, FrozenSource, ModelConfig, Regime, RegimeConfig,
    RelaxedInput, RunConfig, SelectionConfig, SelectionKind, TrainConfig, PRESETS,
};

use crate::diffnet::{scalar, AdamConfig, Mlp, MlpSpec, OutputActivation, ParamStore, Real, Tape};
use crate::error::{LexError, Result};
use crate::imputers::Imputer;
use crate::maskdist::{self, MaskMode, MaskSample};

/// Floor on per-sample log-probabilities inside the bound.
pub const LOG_FLOOR: f64 = -30.0;
/// Largest feature count for exact enumeration over masks.
pub const MAX_EXACT_D: usize = 12;

pub const PREDICTOR: &str = "predictor";
pub const SELECTOR: &str = "selector";

pub fn is_selector_param(name: &str) -> bool {
    name.starts_with("selector.")
}

pub fn is_predictor_param(name: &str) -> bool {
    name.starts_with("predictor.")
}

/// Predictor, selector and imputer with their parameters.
#[derive(Debug, Clone)]
pub struct LexModel<T: Real = f32> {
    pub d: usize,
    pub classes: usize,
    pub store: ParamStore<T>,
    pub predictor: Mlp,
    pub selector: Mlp,
    pub mode: MaskMode,
    pub tau: f64,
    pub imputer: Imputer,
}

pub fn predictor_spec(cfg: &ModelConfig, d: usize, classes: usize) -> MlpSpec {
    MlpSpec::new(d, cfg.predictor_hidden.clone(), classes, OutputActivation::Softmax)
}

pub fn selector_spec(cfg: &ModelConfig, d: usize) -> MlpSpec {
    // logits; the mask law applies the sigmoid/softmax
    MlpSpec::new(d, cfg.selector_hidden.clone(), d, OutputActivation::Identity)
}

fn to_t<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::of(v)).collect()
}

impl<T: Real> LexModel<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        d: usize,
        classes: usize,
        mode: MaskMode,
        tau: f64,
        imputer: Imputer,
        rng: &mut R,
    ) -> Result<Self> {
        mode.validate(d)?;
        let mut store = ParamStore::new();
        let predictor = Mlp::init(predictor_spec(cfg, d, classes), PREDICTOR, &mut store, rng)?;
        let selector = Mlp::init(selector_spec(cfg, d), SELECTOR, &mut store, rng)?;
        if let Some(b) = cfg.selector_bias_init {
            let name = format!("{SELECTOR}.l{}.bias", cfg.selector_hidden.len());
            let id = store
                .find(&name)
                .ok_or_else(|| LexError::State(format!("missing {name}")))?;
            store.tensor_mut(id).data_mut().fill(T::of(b));
        }
        Ok(LexModel {
            d,
            classes,
            store,
            predictor,
            selector,
            mode,
            tau,
            imputer,
        })
    }

    /// Selector logits for `rows` inputs.
    pub fn selector_logits(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let out = self.selector.predict(&self.store, &to_t::<T>(x), rows)?;
        Ok(out.into_iter().map(T::as_f64).collect())
    }

    /// Predictive probabilities `Φ(·|f_θ(x))` for `rows` (already imputed) inputs.
    pub fn predict(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let out = self.predictor.predict(&self.store, &to_t::<T>(x), rows)?;
        Ok(out.into_iter().map(T::as_f64).collect())
    }

    pub fn predictor_checksum(&self) -> u64 {
        self.store.checksum("predictor.")
    }

    pub fn selector_checksum(&self) -> u64 {
        self.store.checksum("selector.")
    }
}

fn mean_rows(p: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in p.chunks(cols) {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter().map(|v| v / rows as f64).collect()
}

/// `(1/K) Σ_k Φ(·|f_θ(x̃_k))` with `x̃_k ~ p(·|x, z)`; one exact pass for
/// constant imputation.
pub fn masked_predictive<T: Real, R: Rng + ?Sized>(
    model: &LexModel<T>,
    x: &[f64],
    z: &[u8],
    k_imp: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if k_imp == 0 {
        return Err(LexError::Config("K_imp must be >= 1".into()));
    }
    let k = if model.imputer.constant().is_some() || z.iter().all(|&b| b == 1) { 1 } else { k_imp };
    let d = model.d;
    let mut xs = vec![0.0; k * d];
    for row in xs.chunks_mut(d) {
        model.imputer.impute_into(x, z, rng, row)?;
    }
    let p = model.predict(&xs, k)?;
    Ok(mean_rows(&p, k, model.classes))
}

/// Every mask with non-zero probability under the selector, with its log-probability.
pub fn enumerate_masks(logits: &[f64], mode: MaskMode) -> Result<Vec<(Vec<u8>, f64)>> {
    let d = logits.len();
    if d > MAX_EXACT_D {
        return Err(LexError::Capability(format!("exact enumeration needs D <= {MAX_EXACT_D}, got {d}")));
    }
    let mut out = Vec::new();
    for bits in 0u32..(1 << d) {
        let z: Vec<u8> = (0..d).map(|j| ((bits >> j) & 1) as u8).collect();
        let lp = match mode {
            MaskMode::Bernoulli => maskdist::bernoulli_logprob(logits, &z),
            MaskMode::Subset { k } => {
                if bits.count_ones() as usize != k {
                    continue;
                }
                let set: Vec<usize> = (0..d).filter(|&j| z[j] == 1).collect();
                maskdist::subset_set_logprob(logits, &set)?
            }
        };
        out.push((z, lp));
    }
    Ok(out)
}

/// How [`predictive_mixture`] integrates over masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureMode {
    Exact,
    MonteCarlo { samples: usize },
}

/// `Σ_z p_θ(·|x, z) p_γ(z|x)`.
pub fn predictive_mixture<T: Real, R: Rng + ?Sized>(
    model: &LexModel<T>,
    x: &[f64],
    how: MixtureMode,
    k_imp: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let logits = model.selector_logits(x, 1)?;
    let mut acc = vec![0.0; model.classes];
    match how {
        MixtureMode::Exact => {
            for (z, lp) in enumerate_masks(&logits, model.mode)? {
                let w = lp.exp();
                if w == 0.0 {
                    continue;
                }
                let p = masked_predictive(model, x, &z, k_imp, rng)?;
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += w * v;
                }
            }
        }
        MixtureMode::MonteCarlo { samples } => {
            for _ in 0..samples {
                let s = maskdist::sample(model.mode, &logits, model.tau, rng)?;
                let p = masked_predictive(model, x, &s.hard, k_imp, rng)?;
                for (a, v) in acc.iter_mut().zip(p) {
                    *a += v / samples as f64;
                }
            }
        }
    }
    Ok(acc)
}

/// Draws from one evaluation of the importance-weighted bound.
#[derive(Debug, Clone)]
pub struct IwaeOutput {
    /// Bound per example.
    pub per_example: Vec<f64>,
    /// `-Σ per_example`.
    pub loss: f64,
    /// `L` mask samples per example, example-major.
    pub samples: Vec<MaskSample>,
    /// Log-probability (ordered for subsets) of each sample.
    pub log_q: Vec<f64>,
    /// Selector logits per example.
    pub logits: Vec<f64>,
}

/// `log[(1/(L·K)) Σ_{l,k} p_θ(y|x̃_{l,k})]` per example with `z_l ~ p_γ(·|x)`
/// and `x̃_{l,k} ~ p(·|x, z_l)`.
pub fn iwae_objective<T: Real, R: Rng + ?Sized>(
    model: &LexModel<T>,
    x: &[f64],
    y: &[usize],
    l: usize,
    k_imp: usize,
    rng: &mut R,
) -> Result<IwaeOutput> {
    if l == 0 || k_imp == 0 {
        return Err(LexError::Config("L and K_imp must be >= 1".into()));
    }
    let d = model.d;
    let b = y.len();
    if x.len() != b * d {
        return Err(LexError::Dimension(format!("{} values for {b} rows of width {d}", x.len())));
    }
    let logits = model.selector_logits(x, b)?;
    let mut samples = Vec::with_capacity(b * l);
    let mut log_q = Vec::with_capacity(b * l);
    let mut xs = vec![0.0; b * l * k_imp * d];
    let mut rows = xs.chunks_mut(d);
    for i in 0..b {
        let xi = &x[i * d..(i + 1) * d];
        let li = &logits[i * d..(i + 1) * d];
        for _ in 0..l {
            let s = maskdist::sample(model.mode, li, model.tau, rng)?;
            log_q.push(maskdist::sample_logprob(model.mode, li, &s)?);
            for _ in 0..k_imp {
                let row = rows.next().ok_or_else(|| LexError::State("row buffer exhausted".into()))?;
                model.imputer.impute_into(xi, &s.hard, rng, row)?;
            }
            samples.push(s);
        }
    }
    let probs = model.predict(&xs, b * l * k_imp)?;
    let c = model.classes;
    let inner = l * k_imp;
    let mut per_example = Vec::with_capacity(b);
    for (i, &yi) in y.iter().enumerate() {
        let lp: Vec<f64> = (0..inner)
            .map(|r| probs[(i * inner + r) * c + yi].ln().max(LOG_FLOOR))
            .collect();
        if lp.iter().any(|v| v.is_nan()) {
            return Err(LexError::Numerical(format!("non-finite predictive probability for example {i}")));
        }
        per_example.push(scalar::logsumexp(&lp) - (inner as f64).ln());
    }
    let loss = -per_example.iter().sum::<f64>();
    Ok(IwaeOutput {
        per_example,
        loss,
        samples,
        log_q,
        logits,
    })
}

/// `log p(y|x)` by exact enumeration over masks.
pub fn exact_log_likelihood<T: Real, R: Rng + ?Sized>(model: &LexModel<T>, x: &[f64], y: usize, k_imp: usize, rng: &mut R) -> Result<f64> {
    let p = predictive_mixture(model, x, MixtureMode::Exact, k_imp, rng)?;
    Ok(p[y].ln())
}

/// Penalty on the selection law: `λ Σ_d σ(logit_d)` for L1, zero otherwise.
pub fn regularizer(mode: MaskMode, logits: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(LexError::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    match mode {
        MaskMode::Bernoulli => Ok(lambda * logits.iter().map(|&l| scalar::sigmoid(l)).sum::<f64>()),
        MaskMode::Subset { .. } if lambda > 0.0 => Err(LexError::Config("L1 regularization needs bernoulli selection".into())),
        MaskMode::Subset { .. } => Ok(0.0),
    }
}

/// A classifier producing label probabilities, used to generate targets.
pub trait LabelModel: Send + Sync {
    fn classes(&self) -> usize;
    fn label_probs(&self, x: &[f64], rows: usize) -> Result<Vec<f64>>;
}

/// A predictor network with frozen weights.
#[derive(Debug, Clone)]
pub struct FrozenPredictor {
    pub mlp: Mlp,
    pub store: ParamStore<f32>,
}

impl LabelModel for FrozenPredictor {
    fn classes(&self) -> usize {
        self.mlp.spec().output_dim
    }

    fn label_probs(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let out = self.mlp.predict(&self.store, &to_t::<f32>(x), rows)?;
        Ok(out.into_iter().map(f64::from).collect())
    }
}

/// Frozen models a regime relies on.
#[derive(Default)]
pub struct RegimeContext {
    /// The explained model for self post-hoc training.
    pub frozen: Option<FrozenPredictor>,
    /// `p_m` for surrogate post-hoc training.
    pub external: Option<Box<dyn LabelModel>>,
}

impl RegimeContext {
    pub fn check(&self, regime: Regime) -> Result<()> {
        match regime {
            Regime::SelfPosthoc if self.frozen.is_none() => {
                Err(LexError::Config(format!("{regime:?} needs a frozen predictor")))
            }
            Regime::SurrogatePosthoc if self.external.is_none() => {
                Err(LexError::Config("surrogate post-hoc needs an external model".into()))
            }
            _ => Ok(()),
        }
    }
}

fn sample_labels<R: Rng + ?Sized>(m: &dyn LabelModel, x: &[f64], rows: usize, rng: &mut R) -> Result<Vec<usize>> {
    let p = m.label_probs(x, rows)?;
    Ok(p.chunks(m.classes())
        .map(|row| crate::imputers::categorical(row, rng))
        .collect())
}

/// Training targets for a batch under `regime`.
pub fn regime_targets<R: Rng + ?Sized>(
    regime: Regime,
    ctx: &RegimeContext,
    x: &[f64],
    y: &[usize],
    rng: &mut R,
) -> Result<Vec<usize>> {
    ctx.check(regime)?;
    match regime {
        Regime::FreeInsitu | Regime::FixedThetaInsitu => Ok(y.to_vec()),
        Regime::SelfPosthoc => {
            let f = ctx.frozen.as_ref().ok_or_else(|| LexError::Config("missing frozen predictor".into()))?;
            sample_labels(f, x, y.len(), rng)
        }
        Regime::SurrogatePosthoc => {
            let m = ctx.external.as_deref().ok_or_else(|| LexError::Config("missing external model".into()))?;
            sample_labels(m, x, y.len(), rng)
        }
    }
}

/// Mask law used while fitting a predictor on its own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictorMasks {
    /// Every feature observed.
    AllObserved,
    /// Each feature observed independently with this probability.
    Bernoulli(f64),
}

/// Shuffled minibatch index lists covering `0..n`.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// Fits only the predictor parameters of `store` by minimising the NLL of
/// `Φ(y|f_θ(x̃))` with masks from `masks` and imputation from `imputer`.
/// Returns the mean training loss per epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_predictor<R: Rng + ?Sized>(
    predictor: &Mlp,
    store: &mut ParamStore<f32>,
    imputer: &Imputer,
    masks: PredictorMasks,
    x: &[f64],
    y: &[usize],
    epochs: usize,
    batch: usize,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = predictor.spec().input_dim;
    let n = y.len();
    let prefix = format!("{}.", predictor.prefix());
    let mut trace = Vec::with_capacity(epochs);
    let mut z = vec![1u8; d];
    let mut xt = Vec::new();
    for _ in 0..epochs {
        let mut total = 0.0;
        for idx in minibatches(n, batch, rng) {
            xt.clear();
            xt.resize(idx.len() * d, 0.0f32);
            let mut row = vec![0.0; d];
            for (r, &i) in idx.iter().enumerate() {
                if let PredictorMasks::Bernoulli(p) = masks {
                    for b in z.iter_mut() {
                        *b = u8::from(rng.random::<f64>() < p);
                    }
                }
                imputer.impute_into(&x[i * d..(i + 1) * d], &z, rng, &mut row)?;
                for (o, v) in xt[r * d..(r + 1) * d].iter_mut().zip(&row) {
                    *o = *v as f32;
                }
            }
            let mut tape = Tape::<f32>::new();
            let xv = tape.constant(idx.len(), d, xt.clone())?;
            let logits = predictor.forward_logits(&mut tape, store, xv, true)?;
            let lsm = tape.log_softmax_rows(logits);
            let picked = tape.gather(lsm, idx.iter().map(|&i| y[i]).collect())?;
            let s = tape.sum(picked);
            let loss = tape.scale(s, -1.0 / idx.len() as f32);
            let value = f64::from(tape.scalar(loss));
            if !value.is_finite() {
                return Err(LexError::Numerical(format!("predictor loss {value}")));
            }
            total += value * idx.len() as f64;
            store.zero_grad();
            tape.backward(loss, store)?;
            store.adam_step_where(adam, |name| name.starts_with(&prefix))?;
        }
        trace.push(total / n as f64);
    }
    Ok(trace)
}

/// The restricted-predictor surrogate: masks iid Bernoulli(0.5).
#[allow(clippy::too_many_arguments)]
pub fn restricted_predictor_train<R: Rng + ?Sized>(
    predictor: &Mlp,
    store: &mut ParamStore<f32>,
    imputer: &Imputer,
    x: &[f64],
    y: &[usize],
    epochs: usize,
    batch: usize,
    adam: &AdamConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    train_predictor(predictor, store, imputer, PredictorMasks::Bernoulli(0.5), x, y, epochs, batch, adam, rng)
}
