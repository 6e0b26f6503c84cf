//! One optimisation step: sample masks, impute, evaluate the bound, and
//! assemble a surrogate whose gradient is the configured estimator.

use rand::Rng;

use crate::diffnet::{AdamConfig, Tape, Var};
use crate::error::{LexError, Result};
use crate::gradest::MovingAverage;
use crate::lexmodel::{is_selector_param, LexModel, LOG_FLOOR};
use crate::lexmodel::config::{EstimatorConfig, EstimatorKind, RelaxedInput};
use crate::maskdist::{self, MaskMode, MaskSample};

/// Everything a step needs besides the data.
pub struct StepSettings<'a> {
    pub estimator: &'a EstimatorConfig,
    pub lambda: f64,
    pub mask_samples: usize,
    pub imputation_samples: usize,
    pub train_theta: bool,
    pub adam: &'a AdamConfig,
}

/// What one step observed, before the update.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    /// Mean over the batch of `-bound + penalty`.
    pub objective: f64,
    /// Value of the surrogate that was differentiated.
    pub surrogate: f64,
    pub selection_rate: f64,
    pub correct: usize,
}

/// Whether pathwise terms feed continuous relaxed masks to the predictor.
pub fn continuous_relaxation(est: &EstimatorConfig, constant_imputer: bool) -> bool {
    match est.relaxed_input {
        RelaxedInput::Continuous => true,
        RelaxedInput::StraightThrough => false,
        RelaxedInput::Auto => constant_imputer,
    }
}

/// Fill values and `x − fill` for every (example, mask, imputation) row.
struct Inputs {
    fill: Vec<f32>,
    diff: Vec<f32>,
}

fn build_inputs<R: Rng + ?Sized>(
    model: &LexModel<f32>,
    x: &[f64],
    samples: &[MaskSample],
    l: usize,
    k: usize,
    rng: &mut R,
) -> Result<Inputs> {
    let d = model.d;
    let rows = samples.len() * k;
    let mut fill = Vec::with_capacity(rows * d);
    let mut diff = Vec::with_capacity(rows * d);
    let mut buf = vec![0.0; d];
    for (r, s) in samples.iter().enumerate() {
        let xi = &x[(r / l) * d..(r / l + 1) * d];
        for _ in 0..k {
            model.imputer.fill_into(xi, &s.hard, rng, &mut buf)?;
            for (f, v) in buf.iter().zip(xi) {
                fill.push(*f as f32);
                diff.push((v - f) as f32);
            }
        }
    }
    Ok(Inputs { fill, diff })
}

/// `f_b = log (1/LK) Σ p_θ(y_b | x̃)` for masks `m` (B·L × D) on the tape.
/// Returns the B×1 bound and the per-row log-likelihoods.
fn bound_on_tape(
    tape: &mut Tape<f32>,
    model: &LexModel<f32>,
    inputs: &Inputs,
    m: Var,
    targets: &[usize],
    l: usize,
    k: usize,
    train_theta: bool,
) -> Result<(Var, Var)> {
    let b = targets.len();
    let m = if k > 1 { tape.repeat_rows(m, k) } else { m };
    let gated = tape.mul_const(m, inputs.diff.clone())?;
    let xt = tape.add_const(gated, &inputs.fill)?;
    let logits = model.predictor.forward_logits(tape, &model.store, xt, train_theta)?;
    let lsm = tape.log_softmax_rows(logits);
    let idx: Vec<usize> = targets.iter().flat_map(|&y| std::iter::repeat_n(y, l * k)).collect();
    let picked = tape.gather(lsm, idx)?;
    let picked = tape.clamp_min(picked, LOG_FLOOR as f32);
    let grid = tape.reshape(picked, b, l * k)?;
    let lse = tape.logsumexp_rows(grid);
    Ok((tape.add_scalar(lse, -((l * k) as f32).ln()), picked))
}

fn col_values(tape: &Tape<f32>, v: Var) -> Vec<f64> {
    tape.value(v).iter().map(|&x| f64::from(x)).collect()
}

/// Runs one step on a batch and applies the Adam update.
pub fn train_step<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    model: &mut LexModel<f32>,
    x: &[f64],
    targets: &[usize],
    set: &StepSettings<'_>,
    baseline: &mut Option<MovingAverage>,
    mask_rng: &mut R1,
    impute_rng: &mut R2,
) -> Result<StepStats> {
    let d = model.d;
    let b = targets.len();
    let (l, k) = (set.mask_samples, set.imputation_samples);
    let est = set.estimator;
    let tau = est.tau;
    let mode = model.mode;
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(b, d, x.iter().map(|&v| v as f32).collect())?;
    let sel_logits = model.selector.forward_logits(&mut tape, &model.store, xv, true)?;
    let logit_vals = col_values(&tape, sel_logits);

    let mut samples = Vec::with_capacity(b * l);
    for i in 0..b {
        let li = &logit_vals[i * d..(i + 1) * d];
        for _ in 0..l {
            samples.push(maskdist::sample(mode, li, tau, mask_rng)?);
        }
    }
    let inputs = build_inputs(model, x, &samples, l, k, impute_rng)?;
    let rep = if l > 1 { tape.repeat_rows(sel_logits, l) } else { sel_logits };
    let hard: Vec<f32> = maskdist::stack_hard(&samples);
    let continuous = est.kind == EstimatorKind::Rebar && est.eta != 0.0 && continuous_relaxation(est, model.imputer.constant().is_some());
    let eta = est.eta as f32;

    let mask = match est.kind {
        EstimatorKind::Reinforce => tape.constant(b * l, d, hard.clone())?,
        EstimatorKind::PathwiseSt => {
            let rel = maskdist::relaxed_on_tape(&mut tape, mode, rep, &samples, tau)?;
            tape.straight_through(hard.clone(), rel)?
        }
        EstimatorKind::Rebar if continuous || est.eta == 0.0 => tape.constant(b * l, d, hard.clone())?,
        EstimatorKind::Rebar => {
            let rel = maskdist::relaxed_on_tape(&mut tape, mode, rep, &samples, tau)?;
            let cond = maskdist::conditional_relaxed_on_tape(&mut tape, mode, rep, &samples, tau)?;
            let delta = tape.sub(rel, cond)?;
            let delta = tape.scale(delta, eta);
            tape.straight_through(hard.clone(), delta)?
        }
    };
    let (f_hard, rows) = bound_on_tape(&mut tape, model, &inputs, mask, targets, l, k, set.train_theta)?;
    let f_vals = col_values(&tape, f_hard);

    // train accuracy from the mask-averaged predictive probability of the target
    let row_lp = col_values(&tape, rows);
    let mut correct = 0;
    for i in 0..b {
        let p = row_lp[i * l * k..(i + 1) * l * k].iter().map(|v| v.exp()).sum::<f64>() / (l * k) as f64;
        correct += usize::from(p > 0.5);
    }

    let neg_sum = tape.sum(f_hard);
    let mut loss = tape.scale(neg_sum, -1.0);

    let mut coef: Vec<f64> = f_vals.clone();
    if continuous {
        let rel = maskdist::relaxed_on_tape(&mut tape, mode, rep, &samples, tau)?;
        let (f_rel, _) = bound_on_tape(&mut tape, model, &inputs, rel, targets, l, k, false)?;
        let cond = maskdist::conditional_relaxed_on_tape(&mut tape, mode, rep, &samples, tau)?;
        let (f_cond, _) = bound_on_tape(&mut tape, model, &inputs, cond, targets, l, k, false)?;
        for (c, v) in coef.iter_mut().zip(col_values(&tape, f_cond)) {
            *c -= est.eta * v;
        }
        let diff = tape.sub(f_rel, f_cond)?;
        let diff = tape.sum(diff);
        let diff = tape.scale(diff, -eta);
        loss = tape.add(loss, diff)?;
    } else if est.kind == EstimatorKind::Rebar {
        // straight-through relaxations evaluate to the hard mask
        for c in coef.iter_mut() {
            *c *= 1.0 - est.eta;
        }
    }

    if est.kind != EstimatorKind::PathwiseSt {
        let mean_coef = coef.iter().sum::<f64>() / b as f64;
        let bval = baseline.as_ref().map_or(0.0, MovingAverage::current);
        let weights: Vec<f32> = coef.iter().map(|&c| (c - bval) as f32).collect();
        if let Some(avg) = baseline.as_mut() {
            avg.update(mean_coef);
        }
        let lq = maskdist::logprob_on_tape(&mut tape, mode, rep, &samples)?;
        let lq = tape.reshape(lq, b, l)?;
        let lq = tape.sum_rows(lq);
        let weighted = tape.mul_const(lq, weights)?;
        let s = tape.sum(weighted);
        let s = tape.scale(s, -1.0);
        loss = tape.add(loss, s)?;
    }

    let mut penalty = 0.0;
    if set.lambda > 0.0 {
        if !matches!(mode, MaskMode::Bernoulli) {
            return Err(LexError::Config("L1 regularization needs bernoulli selection".into()));
        }
        let sg = tape.sigmoid(sel_logits);
        let s = tape.sum(sg);
        penalty = f64::from(tape.scalar(s)) * set.lambda;
        let s = tape.scale(s, set.lambda as f32);
        loss = tape.add(loss, s)?;
    }
    let loss = tape.scale(loss, 1.0 / b as f32);
    let surrogate = f64::from(tape.scalar(loss));
    let objective = (-f_vals.iter().sum::<f64>() + penalty) / b as f64;
    if !surrogate.is_finite() || !objective.is_finite() {
        return Err(LexError::Numerical(format!("non-finite loss (objective {objective}, surrogate {surrogate})")));
    }
    model.store.zero_grad();
    tape.backward(loss, &mut model.store)?;
    if set.train_theta {
        model.store.adam_step(set.adam)?;
    } else {
        model.store.adam_step_where(set.adam, is_selector_param)?;
    }
    let selection_rate = match mode {
        MaskMode::Bernoulli => logit_vals.iter().map(|&v| crate::diffnet::scalar::sigmoid(v)).sum::<f64>() / (b * d) as f64,
        MaskMode::Subset { k } => k as f64 / d as f64,
    };
    Ok(StepStats {
        objective,
        surrogate,
        selection_rate,
        correct,
    })
}
