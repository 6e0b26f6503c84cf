//! Selection laws p(z|x): independent Bernoulli and fixed-k subsets.
//!
//! Per-instance functions work in f64. The `*_on_tape` builders recompute
//! the same relaxations for a batch on a [`Tape`] so that gradients reach the
//! selector logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{scalar, Real, Tape, Var};
use crate::error::{LexError, Result};
use crate::rng::{gumbel, logistic, open_unit};

/// Floor applied to `1 - a` before its log in the top-k relaxation.
pub const RELAX_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskMode {
    Bernoulli,
    Subset { k: usize },
}

impl MaskMode {
    pub fn validate(self, d: usize) -> Result<()> {
        match self {
            MaskMode::Subset { k } if k == 0 || k > d => {
                Err(LexError::Config(format!("subset k={k} outside 1..={d}")))
            }
            _ => Ok(()),
        }
    }
}

/// Selection rate to subset size.
pub fn rate_to_k(rate: f64, d: usize) -> usize {
    (rate * d as f64).round() as usize
}

/// One draw from a selection law.
///
/// `noise` is the logistic (Bernoulli) or Gumbel (subset) perturbation that
/// produced `hard` and `relaxed`. `cond_noise` holds the fresh uniforms or
/// Gumbels used to resample the relaxation conditioned on `hard`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub hard: Vec<u8>,
    pub relaxed: Vec<f64>,
    pub noise: Vec<f64>,
    pub cond_noise: Vec<f64>,
    pub order: Option<Vec<usize>>,
}

impl MaskSample {
    pub fn hard_f64(&self) -> Vec<f64> {
        self.hard.iter().map(|&b| f64::from(b)).collect()
    }
}

pub fn bernoulli_sample<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> MaskSample {
    let noise: Vec<f64> = logits.iter().map(|_| logistic(rng)).collect();
    let cond_noise: Vec<f64> = logits.iter().map(|_| open_unit(rng)).collect();
    let relaxed: Vec<f64> = logits
        .iter()
        .zip(&noise)
        .map(|(&l, &v)| scalar::sigmoid((l + v) / tau))
        .collect();
    let hard = relaxed.iter().map(|&r| u8::from(r > 0.5)).collect();
    MaskSample {
        hard,
        relaxed,
        noise,
        cond_noise,
        order: None,
    }
}

/// `log p(z)` for independent Bernoulli(σ(logits)), from logits directly.
pub fn bernoulli_logprob(logits: &[f64], z: &[u8]) -> f64 {
    logits
        .iter()
        .zip(z)
        .map(|(&l, &b)| if b == 1 { -scalar::softplus(-l) } else { -scalar::softplus(l) })
        .sum()
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn top_k_order(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Iterative softmax relaxation of top-k on perturbed scores.
pub fn relaxed_top_k(scores: &[f64], k: usize, tau: f64) -> Vec<f64> {
    let d = scores.len();
    let mut alpha = scores.to_vec();
    let mut out = vec![0.0; d];
    let mut a = vec![0.0; d];
    for _ in 0..k {
        let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
        let mut total = 0.0;
        for (ai, &al) in a.iter_mut().zip(&alpha) {
            *ai = (al / tau - m).exp();
            total += *ai;
        }
        for i in 0..d {
            a[i] /= total;
            out[i] += a[i];
            alpha[i] += (1.0 - a[i]).max(RELAX_FLOOR).ln();
        }
    }
    for v in &mut out {
        *v = v.min(1.0);
    }
    out
}

pub fn subset_sample<R: Rng + ?Sized>(logits: &[f64], k: usize, tau: f64, rng: &mut R) -> Result<MaskSample> {
    let d = logits.len();
    MaskMode::Subset { k }.validate(d)?;
    let noise: Vec<f64> = logits.iter().map(|_| gumbel(rng)).collect();
    let cond_noise: Vec<f64> = logits.iter().map(|_| gumbel(rng)).collect();
    let scores: Vec<f64> = logits.iter().zip(&noise).map(|(l, g)| l + g).collect();
    let order = top_k_order(&scores, k);
    let mut hard = vec![0u8; d];
    for &i in &order {
        hard[i] = 1;
    }
    Ok(MaskSample {
        hard,
        relaxed: relaxed_top_k(&scores, k, tau),
        noise,
        cond_noise,
        order: Some(order),
    })
}

/// Plackett–Luce log-probability of drawing `order` as the first picks.
pub fn subset_logprob_ordered(logits: &[f64], order: &[usize]) -> Result<f64> {
    let d = logits.len();
    let mut taken = vec![false; d];
    let mut total = 0.0;
    for &o in order {
        if o >= d || taken[o] {
            return Err(LexError::Contract(format!("order {order:?} is not a set of distinct indices < {d}")));
        }
        let rest: Vec<f64> = (0..d).filter(|&i| !taken[i]).map(|i| logits[i]).collect();
        total += logits[o] - scalar::logsumexp(&rest);
        taken[o] = true;
    }
    Ok(total)
}

/// Log-probability that sequential sampling without replacement picks
/// exactly `set` (in any order), by dynamic programming over its subsets.
pub fn subset_set_logprob(logits: &[f64], set: &[usize]) -> Result<f64> {
    let k = set.len();
    if k > 20 {
        return Err(LexError::Capability(format!("set probability for k={k} > 20")));
    }
    let mut seen = vec![false; logits.len()];
    for &i in set {
        if i >= logits.len() || seen[i] {
            return Err(LexError::Contract(format!("{set:?} is not a set of distinct indices")));
        }
        seen[i] = true;
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    // f[T] = P(first |T| picks are exactly T)
    let mut f = vec![0.0; 1 << k];
    let mut mass = vec![0.0; 1 << k];
    f[0] = 1.0;
    for t in 1usize..(1 << k) {
        let low = t.trailing_zeros() as usize;
        mass[t] = mass[t & (t - 1)] + w[set[low]];
        let mut acc = 0.0;
        for (j, &i) in set.iter().enumerate() {
            if t & (1 << j) != 0 {
                let prev = t ^ (1 << j);
                acc += f[prev] * w[i] / (total - mass[prev]);
            }
        }
        f[t] = acc;
    }
    Ok(f[(1 << k) - 1].ln())
}

pub fn sample<R: Rng + ?Sized>(mode: MaskMode, logits: &[f64], tau: f64, rng: &mut R) -> Result<MaskSample> {
    match mode {
        MaskMode::Bernoulli => Ok(bernoulli_sample(logits, tau, rng)),
        MaskMode::Subset { k } => subset_sample(logits, k, tau, rng),
    }
}

/// Log-probability of a sample under its law (ordered for subsets).
pub fn sample_logprob(mode: MaskMode, logits: &[f64], s: &MaskSample) -> Result<f64> {
    match mode {
        MaskMode::Bernoulli => Ok(bernoulli_logprob(logits, &s.hard)),
        MaskMode::Subset { .. } => {
            let order = s
                .order
                .as_ref()
                .ok_or_else(|| LexError::Contract("subset sample without order".into()))?;
            subset_logprob_ordered(logits, order)
        }
    }
}

/// Number of hard draws behind a Monte Carlo subset selection map.
pub const EXPECTED_SELECTION_DRAWS: usize = 100;

/// `E[Z|x]`: exact for Bernoulli, a 100-draw mean for subsets.
pub fn expected_selection<R: Rng + ?Sized>(logits: &[f64], mode: MaskMode, rng: &mut R) -> Result<Vec<f64>> {
    match mode {
        MaskMode::Bernoulli => Ok(logits.iter().map(|&l| scalar::sigmoid(l)).collect()),
        MaskMode::Subset { k } => {
            let mut acc = vec![0.0; logits.len()];
            for _ in 0..EXPECTED_SELECTION_DRAWS {
                let s = subset_sample(logits, k, 1.0, rng)?;
                for (a, &h) in acc.iter_mut().zip(&s.hard) {
                    *a += f64::from(h);
                }
            }
            Ok(acc.into_iter().map(|a| a / EXPECTED_SELECTION_DRAWS as f64).collect())
        }
    }
}

/// Bernoulli relaxation resampled given `hard`, from fresh uniforms `u`.
pub fn bernoulli_conditional_relaxed(logits: &[f64], hard: &[u8], u: &[f64], tau: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(hard)
        .zip(u)
        .map(|((&l, &b), &u)| {
            let z = if b == 1 {
                scalar::softplus(l + u.ln()) - (1.0 - u).ln()
            } else {
                u.ln() - scalar::softplus(-l + (1.0 - u).ln())
            };
            scalar::sigmoid(z / tau)
        })
        .collect()
}

/// Perturbed scores resampled given the realised top-k `order`.
pub fn subset_conditional_scores(logits: &[f64], order: &[usize], g: &[f64]) -> Vec<f64> {
    let d = logits.len();
    let mut remaining = vec![true; d];
    let mut scores = vec![0.0; d];
    let mut t = f64::INFINITY;
    for (j, &o) in order.iter().enumerate() {
        let rest: Vec<f64> = (0..d).filter(|&i| remaining[i]).map(|i| logits[i]).collect();
        let top = scalar::logsumexp(&rest) + g[o];
        t = if j == 0 { top } else { -scalar::logaddexp(-t, -top) };
        scores[o] = t;
        remaining[o] = false;
    }
    for i in (0..d).filter(|&i| remaining[i]) {
        scores[i] = -scalar::logaddexp(-t, -(logits[i] + g[i]));
    }
    scores
}

pub fn conditional_relaxed(mode: MaskMode, logits: &[f64], s: &MaskSample, tau: f64) -> Result<Vec<f64>> {
    match mode {
        MaskMode::Bernoulli => Ok(bernoulli_conditional_relaxed(logits, &s.hard, &s.cond_noise, tau)),
        MaskMode::Subset { k } => {
            let order = s
                .order
                .as_ref()
                .ok_or_else(|| LexError::Contract("subset sample without order".into()))?;
            let scores = subset_conditional_scores(logits, order, &s.cond_noise);
            Ok(relaxed_top_k(&scores, k, tau))
        }
    }
}

fn stack<T: Real>(samples: &[MaskSample], f: impl Fn(&MaskSample) -> &[f64]) -> Vec<T> {
    samples.iter().flat_map(|s| f(s).iter().map(|&v| T::of(v))).collect()
}

/// Stacked hard masks of a batch of samples, row-major.
pub fn stack_hard<T: Real>(samples: &[MaskSample]) -> Vec<T> {
    samples
        .iter()
        .flat_map(|s| s.hard.iter().map(|&b| if b == 1 { T::one() } else { T::zero() }))
        .collect()
}

fn order_of(s: &MaskSample) -> Result<&[usize]> {
    s.order
        .as_deref()
        .ok_or_else(|| LexError::Contract("subset sample without order".into()))
}

fn check_batch(tape_dims: (usize, usize), samples: &[MaskSample]) -> Result<()> {
    let (r, c) = tape_dims;
    if samples.len() != r || samples.iter().any(|s| s.hard.len() != c) {
        return Err(LexError::Dimension(format!(
            "{} samples for {r}x{c} logits",
            samples.len()
        )));
    }
    Ok(())
}

/// Top-k relaxation of an r×D score matrix on the tape.
pub fn relaxed_top_k_on_tape<T: Real>(tape: &mut Tape<T>, scores: Var, k: usize, tau: f64) -> Result<Var> {
    let inv_tau = T::of(1.0 / tau);
    let mut alpha = scores;
    let mut out: Option<Var> = None;
    for j in 0..k {
        let scaled = tape.scale(alpha, inv_tau);
        let a = tape.softmax_rows(scaled);
        out = Some(match out {
            None => a,
            Some(o) => tape.add(o, a)?,
        });
        if j + 1 < k {
            let na = tape.neg(a);
            let rest = tape.add_scalar(na, T::one());
            let rest = tape.clamp_min(rest, T::of(RELAX_FLOOR));
            let lr = tape.log(rest);
            alpha = tape.add(alpha, lr)?;
        }
    }
    let out = out.ok_or_else(|| LexError::Config("subset k must be positive".into()))?;
    // min(out, 1) as 1 - max(1 - out, 0)
    let n = tape.neg(out);
    let gap = tape.add_scalar(n, T::one());
    let gap = tape.clamp_min(gap, T::zero());
    let n = tape.neg(gap);
    Ok(tape.add_scalar(n, T::one()))
}

/// Relaxed masks coupled to `samples`, as a function of the logits.
pub fn relaxed_on_tape<T: Real>(tape: &mut Tape<T>, mode: MaskMode, logits: Var, samples: &[MaskSample], tau: f64) -> Result<Var> {
    check_batch(tape.dims(logits), samples)?;
    let noise: Vec<T> = stack(samples, |s| &s.noise);
    let perturbed = tape.add_const(logits, &noise)?;
    match mode {
        MaskMode::Bernoulli => {
            let scaled = tape.scale(perturbed, T::of(1.0 / tau));
            Ok(tape.sigmoid(scaled))
        }
        MaskMode::Subset { k } => relaxed_top_k_on_tape(tape, perturbed, k, tau),
    }
}

/// Relaxed masks resampled conditionally on the hard outcome.
pub fn conditional_relaxed_on_tape<T: Real>(
    tape: &mut Tape<T>,
    mode: MaskMode,
    logits: Var,
    samples: &[MaskSample],
    tau: f64,
) -> Result<Var> {
    let (r, d) = tape.dims(logits);
    check_batch((r, d), samples)?;
    match mode {
        MaskMode::Bernoulli => {
            // logs taken in f64: u near 1 rounds to 1 in f32
            let noise = || samples.iter().flat_map(|s| s.cond_noise.iter().copied());
            let log_u: Vec<T> = noise().map(|u| T::of(u.ln())).collect();
            let log_1mu: Vec<T> = noise().map(|u| T::of((-u).ln_1p())).collect();
            let hard: Vec<T> = stack_hard(samples);
            let soft: Vec<T> = hard.iter().map(|&h| T::one() - h).collect();
            // hard = 1: softplus(l + log u) - log(1 - u)
            let a = tape.add_const(logits, &log_u)?;
            let a = tape.softplus(a);
            let neg_log_1mu: Vec<T> = log_1mu.iter().map(|&v| -v).collect();
            let a = tape.add_const(a, &neg_log_1mu)?;
            let a = tape.mul_const(a, hard)?;
            // hard = 0: log u - softplus(-l + log(1 - u))
            let nl = tape.neg(logits);
            let b = tape.add_const(nl, &log_1mu)?;
            let b = tape.softplus(b);
            let b = tape.neg(b);
            let b = tape.add_const(b, &log_u)?;
            let b = tape.mul_const(b, soft)?;
            let z = tape.add(a, b)?;
            let z = tape.scale(z, T::of(1.0 / tau));
            Ok(tape.sigmoid(z))
        }
        MaskMode::Subset { k } => {
            let g: Vec<T> = stack(samples, |s| &s.cond_noise);
            let mut remaining = vec![T::one(); r * d];
            let mut t: Option<Var> = None;
            let mut scores: Option<Var> = None;
            for j in 0..k {
                let lse = tape.masked_logsumexp_rows(logits, remaining.clone())?;
                let picks = samples.iter().map(|s| order_of(s).map(|o| o[j])).collect::<Result<Vec<_>>>()?;
                let gj: Vec<T> = picks.iter().enumerate().map(|(i, &o)| g[i * d + o]).collect();
                let top = tape.add_const(lse, &gj)?;
                let tj = match t {
                    None => top,
                    Some(prev) => {
                        let a = tape.neg(prev);
                        let b = tape.neg(top);
                        let m = tape.logaddexp(a, b)?;
                        tape.neg(m)
                    }
                };
                let mut onehot = vec![T::zero(); r * d];
                for (i, &o) in picks.iter().enumerate() {
                    onehot[i * d + o] = T::one();
                    remaining[i * d + o] = T::zero();
                }
                let wide = tape.broadcast_col(tj, d)?;
                let placed = tape.mul_const(wide, onehot)?;
                scores = Some(match scores {
                    None => placed,
                    Some(s) => tape.add(s, placed)?,
                });
                t = Some(tj);
            }
            let (t, scores) = match (t, scores) {
                (Some(t), Some(s)) => (t, s),
                _ => return Err(LexError::Config("subset k must be positive".into())),
            };
            if remaining.iter().any(|&m| m > T::zero()) {
                let wide = tape.broadcast_col(t, d)?;
                let a = tape.neg(wide);
                let pert = tape.add_const(logits, &g)?;
                let b = tape.neg(pert);
                let m = tape.logaddexp(a, b)?;
                let below = tape.neg(m);
                let below = tape.mul_const(below, remaining)?;
                let full = tape.add(scores, below)?;
                relaxed_top_k_on_tape(tape, full, k, tau)
            } else {
                relaxed_top_k_on_tape(tape, scores, k, tau)
            }
        }
    }
}

/// Per-row log-probability of the samples (r×1).
pub fn logprob_on_tape<T: Real>(tape: &mut Tape<T>, mode: MaskMode, logits: Var, samples: &[MaskSample]) -> Result<Var> {
    let (r, d) = tape.dims(logits);
    check_batch((r, d), samples)?;
    match mode {
        MaskMode::Bernoulli => {
            // z·l − softplus(l)
            let z: Vec<T> = stack_hard(samples);
            let zl = tape.mul_const(logits, z)?;
            let sp = tape.softplus(logits);
            let diff = tape.sub(zl, sp)?;
            Ok(tape.sum_rows(diff))
        }
        MaskMode::Subset { k } => {
            let mut remaining = vec![T::one(); r * d];
            let mut total: Option<Var> = None;
            for j in 0..k {
                let idx = samples.iter().map(|s| order_of(s).map(|o| o[j])).collect::<Result<Vec<_>>>()?;
                let picked = tape.gather(logits, idx.clone())?;
                let lse = tape.masked_logsumexp_rows(logits, remaining.clone())?;
                let term = tape.sub(picked, lse)?;
                total = Some(match total {
                    None => term,
                    Some(t) => tape.add(t, term)?,
                });
                for (i, o) in idx.into_iter().enumerate() {
                    remaining[i * d + o] = T::zero();
                }
            }
            total.ok_or_else(|| LexError::Config("subset k must be positive".into()))
        }
    }
}
