//! Monte Carlo gradients of `E_{z~p_γ}[f(z)]` with respect to the selector
//! logits: score function, straight-through pathwise, and REBAR.
//!
//! These act on one instance's logits with an objective given in closed form;
//! the trainer builds the same estimators as tape surrogates over a batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{scalar, Tape};
use crate::error::{LexError, Result};
use crate::maskdist::{self, MaskMode, MaskSample};
use crate::rng::{gumbel, open_unit};

/// An objective on (hard or relaxed) masks with its gradient in the mask.
pub trait MaskObjective {
    fn value(&self, z: &[f64]) -> f64;
    fn grad(&self, z: &[f64]) -> Vec<f64>;
}

/// `f(z) = zᵀAz + bᵀz + c` with `A` row-major.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn random<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut u = || rng.random::<f64>() * 2.0 - 1.0;
        Quadratic {
            a: (0..d * d).map(|_| u()).collect(),
            b: (0..d).map(|_| u()).collect(),
            c: u(),
        }
    }

    pub fn linear(b: Vec<f64>, c: f64) -> Self {
        let d = b.len();
        Quadratic { a: vec![0.0; d * d], b, c }
    }
}

impl MaskObjective for Quadratic {
    fn value(&self, z: &[f64]) -> f64 {
        let d = z.len();
        let mut v = self.c;
        for i in 0..d {
            v += self.b[i] * z[i];
            for j in 0..d {
                v += z[i] * self.a[i * d + j] * z[j];
            }
        }
        v
    }

    fn grad(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..d)
            .map(|i| self.b[i] + (0..d).map(|j| (self.a[i * d + j] + self.a[j * d + i]) * z[j]).sum::<f64>())
            .collect()
    }
}

/// `∇_l log p(z)` at a sample: `z − σ(l)` for Bernoulli, the ordered
/// Plackett–Luce score for subsets.
pub fn score_grad(mode: MaskMode, logits: &[f64], s: &MaskSample) -> Result<Vec<f64>> {
    match mode {
        MaskMode::Bernoulli => Ok(logits
            .iter()
            .zip(&s.hard)
            .map(|(&l, &z)| f64::from(z) - scalar::sigmoid(l))
            .collect()),
        MaskMode::Subset { .. } => {
            let order = s
                .order
                .as_ref()
                .ok_or_else(|| LexError::Contract("subset sample without order".into()))?;
            let d = logits.len();
            let mut remaining = vec![true; d];
            let mut g = vec![0.0; d];
            for &o in order {
                let lse = scalar::logsumexp(&(0..d).filter(|&i| remaining[i]).map(|i| logits[i]).collect::<Vec<_>>());
                for i in (0..d).filter(|&i| remaining[i]) {
                    g[i] -= (logits[i] - lse).exp();
                }
                g[o] += 1.0;
                remaining[o] = false;
            }
            Ok(g)
        }
    }
}

/// `J(l)ᵀ·cot` where `J` is the Jacobian of the relaxed mask coupled to `s`
/// (or of its conditional resample when `conditional`).
pub fn relaxed_vjp(mode: MaskMode, logits: &[f64], s: &MaskSample, tau: f64, cot: &[f64], conditional: bool) -> Result<Vec<f64>> {
    match mode {
        MaskMode::Bernoulli => {
            let d = logits.len();
            let mut out = Vec::with_capacity(d);
            for i in 0..d {
                let l = logits[i];
                let (w, dw) = if !conditional {
                    (l + s.noise[i], 1.0)
                } else {
                    let u = s.cond_noise[i];
                    if s.hard[i] == 1 {
                        (scalar::softplus(l + u.ln()) - (1.0 - u).ln(), scalar::sigmoid(l + u.ln()))
                    } else {
                        (u.ln() - scalar::softplus(-l + (1.0 - u).ln()), scalar::sigmoid(-l + (1.0 - u).ln()))
                    }
                };
                let r = scalar::sigmoid(w / tau);
                out.push(cot[i] * r * (1.0 - r) / tau * dw);
            }
            Ok(out)
        }
        MaskMode::Subset { .. } => {
            let d = logits.len();
            let mut tape = Tape::<f64>::new();
            let l = tape.variable(1, d, logits.to_vec())?;
            let one = std::slice::from_ref(s);
            let r = if conditional {
                maskdist::conditional_relaxed_on_tape(&mut tape, mode, l, one, tau)?
            } else {
                maskdist::relaxed_on_tape(&mut tape, mode, l, one, tau)?
            };
            let w = tape.mul_const(r, cot.to_vec())?;
            let loss = tape.sum(w);
            tape.backward(loss, &mut crate::diffnet::ParamStore::new())?;
            Ok(tape.grad(l).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; d]))
        }
    }
}

fn check(logits: &[f64], samples: &[MaskSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(LexError::Contract("estimator needs at least one sample".into()));
    }
    if samples.iter().any(|s| s.hard.len() != logits.len()) {
        return Err(LexError::Dimension("sample width differs from logits".into()));
    }
    Ok(())
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// `(g − b) Σ_l ∇log p(z_l)` with `g` the mean objective over the samples.
pub fn reinforce_grad(obj: &dyn MaskObjective, mode: MaskMode, logits: &[f64], samples: &[MaskSample], baseline: f64) -> Result<Vec<f64>> {
    check(logits, samples)?;
    let g = samples.iter().map(|s| obj.value(&s.hard_f64())).sum::<f64>() / samples.len() as f64;
    let mut out = vec![0.0; logits.len()];
    for s in samples {
        axpy(&mut out, g - baseline, &score_grad(mode, logits, s)?);
    }
    Ok(out)
}

/// Forward on hard masks, backward through the relaxed Jacobian.
pub fn pathwise_st_grad(obj: &dyn MaskObjective, mode: MaskMode, logits: &[f64], samples: &[MaskSample], tau: f64) -> Result<Vec<f64>> {
    check(logits, samples)?;
    let inv = 1.0 / samples.len() as f64;
    let mut out = vec![0.0; logits.len()];
    for s in samples {
        let cot = obj.grad(&s.hard_f64());
        axpy(&mut out, inv, &relaxed_vjp(mode, logits, s, tau, &cot, false)?);
    }
    Ok(out)
}

/// REBAR, averaged over the samples:
/// `[f(z) − η f(c̃) − b]∇log p(z) + η∇f(z̃) − η∇f(c̃)` with `z̃` the coupled
/// relaxation and `c̃` its resample given `z`. With `straight_through` the
/// relaxed terms are evaluated at `z` and differentiated through the
/// relaxations.
#[allow(clippy::too_many_arguments)]
pub fn rebar_grad(
    obj: &dyn MaskObjective,
    mode: MaskMode,
    logits: &[f64],
    samples: &[MaskSample],
    tau: f64,
    eta: f64,
    baseline: f64,
    straight_through: bool,
) -> Result<Vec<f64>> {
    check(logits, samples)?;
    if eta == 0.0 {
        return reinforce_per_sample(obj, mode, logits, samples, baseline);
    }
    let inv = 1.0 / samples.len() as f64;
    let mut out = vec![0.0; logits.len()];
    for s in samples {
        let hard = s.hard_f64();
        let fz = obj.value(&hard);
        let (rel, cond) = if straight_through {
            (hard.clone(), hard.clone())
        } else {
            (s.relaxed.clone(), maskdist::conditional_relaxed(mode, logits, s, tau)?)
        };
        let fc = obj.value(&cond);
        axpy(&mut out, inv * (fz - eta * fc - baseline), &score_grad(mode, logits, s)?);
        axpy(&mut out, inv * eta, &relaxed_vjp(mode, logits, s, tau, &obj.grad(&rel), false)?);
        axpy(&mut out, -inv * eta, &relaxed_vjp(mode, logits, s, tau, &obj.grad(&cond), true)?);
    }
    Ok(out)
}

/// Score-function estimator with each sample weighted by its own objective;
/// equals [`reinforce_grad`] for a single sample.
pub fn reinforce_per_sample(obj: &dyn MaskObjective, mode: MaskMode, logits: &[f64], samples: &[MaskSample], baseline: f64) -> Result<Vec<f64>> {
    check(logits, samples)?;
    let inv = 1.0 / samples.len() as f64;
    let mut out = vec![0.0; logits.len()];
    for s in samples {
        let f = obj.value(&s.hard_f64());
        axpy(&mut out, inv * (f - baseline), &score_grad(mode, logits, s)?);
    }
    Ok(out)
}

/// A relaxed mask drawn from fresh noise conditioned on the hard outcome of `s`.
pub fn conditional_relaxed_sample<R: Rng + ?Sized>(mode: MaskMode, logits: &[f64], s: &MaskSample, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut fresh = s.clone();
    fresh.cond_noise = match mode {
        MaskMode::Bernoulli => logits.iter().map(|_| open_unit(rng)).collect(),
        MaskMode::Subset { .. } => logits.iter().map(|_| gumbel(rng)).collect(),
    };
    maskdist::conditional_relaxed(mode, logits, &fresh, tau)
}

/// `∇_l E[f(z)]` by enumerating every mask, for small `D`.
pub fn exact_grad(obj: &dyn MaskObjective, mode: MaskMode, logits: &[f64]) -> Result<Vec<f64>> {
    match mode {
        MaskMode::Bernoulli => {
            let mut g = vec![0.0; logits.len()];
            for (z, lp) in crate::lexmodel::enumerate_masks(logits, mode)? {
                let zf: Vec<f64> = z.iter().map(|&b| f64::from(b)).collect();
                let w = lp.exp() * obj.value(&zf);
                for (i, gi) in g.iter_mut().enumerate() {
                    *gi += w * (zf[i] - scalar::sigmoid(logits[i]));
                }
            }
            Ok(g)
        }
        MaskMode::Subset { .. } => {
            // central differences of the exact expectation
            let h = 1e-5;
            let mut l = logits.to_vec();
            let mut g = vec![0.0; logits.len()];
            for i in 0..logits.len() {
                l[i] = logits[i] + h;
                let up = exact_expectation(obj, mode, &l)?;
                l[i] = logits[i] - h;
                let dn = exact_expectation(obj, mode, &l)?;
                l[i] = logits[i];
                g[i] = (up - dn) / (2.0 * h);
            }
            Ok(g)
        }
    }
}

pub fn exact_expectation(obj: &dyn MaskObjective, mode: MaskMode, logits: &[f64]) -> Result<f64> {
    let mut e = 0.0;
    for (z, lp) in crate::lexmodel::enumerate_masks(logits, mode)? {
        let zf: Vec<f64> = z.iter().map(|&b| f64::from(b)).collect();
        e += lp.exp() * obj.value(&zf);
    }
    Ok(e)
}

/// Exponential moving average of the objective, used as a REINFORCE baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MovingAverage {
    pub decay: f64,
    pub value: Option<f64>,
}

impl MovingAverage {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(LexError::Config(format!("baseline decay {decay} outside [0, 1)")));
        }
        Ok(MovingAverage { decay, value: None })
    }

    /// Baseline for the current step; zero before the first update.
    pub fn current(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }

    pub fn update(&mut self, x: f64) {
        self.value = Some(match self.value {
            None => x,
            Some(v) => self.decay * v + (1.0 - self.decay) * x,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mean_and_se(draws: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = draws.len() as f64;
        let d = draws[0].len();
        let mean: Vec<f64> = (0..d).map(|i| draws.iter().map(|g| g[i]).sum::<f64>() / n).collect();
        let se = (0..d)
            .map(|i| (draws.iter().map(|g| (g[i] - mean[i]).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt())
            .collect();
        (mean, se)
    }

    #[test]
    fn constant_objective_with_matching_baseline_is_zero() {
        let obj = Quadratic::linear(vec![0.0; 4], 2.5);
        let logits = [0.3, -1.0, 2.0, 0.0];
        let mut rng = seeded(1);
        for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 2 }] {
            let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
            let g = reinforce_grad(&obj, mode, &logits, &[s], 2.5).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn score_grad_matches_tape_logprob() {
        let logits = [0.3, -1.0, 2.0, 0.5, -0.2];
        let mut rng = seeded(2);
        for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 3 }] {
            let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
            let mut tape = Tape::<f64>::new();
            let l = tape.variable(1, 5, logits.to_vec()).unwrap();
            let lp = maskdist::logprob_on_tape(&mut tape, mode, l, std::slice::from_ref(&s)).unwrap();
            let loss = tape.sum(lp);
            tape.backward(loss, &mut crate::diffnet::ParamStore::new()).unwrap();
            let want = tape.grad(l).unwrap();
            let got = score_grad(mode, &logits, &s).unwrap();
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bernoulli_vjp_matches_tape() {
        let logits = [0.3, -1.0, 2.0, 0.5];
        let cot = [0.7, -0.1, 1.3, 0.4];
        let mut rng = seeded(3);
        let mode = MaskMode::Bernoulli;
        for _ in 0..20 {
            let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
            for cond in [false, true] {
                let mut tape = Tape::<f64>::new();
                let l = tape.variable(1, 4, logits.to_vec()).unwrap();
                let one = std::slice::from_ref(&s);
                let r = if cond {
                    maskdist::conditional_relaxed_on_tape(&mut tape, mode, l, one, 0.5).unwrap()
                } else {
                    maskdist::relaxed_on_tape(&mut tape, mode, l, one, 0.5).unwrap()
                };
                let w = tape.mul_const(r, cot.to_vec()).unwrap();
                let loss = tape.sum(w);
                tape.backward(loss, &mut crate::diffnet::ParamStore::new()).unwrap();
                let want = tape.grad(l).unwrap();
                let got = relaxed_vjp(mode, &logits, &s, 0.5, &cot, cond).unwrap();
                for (a, b) in got.iter().zip(want) {
                    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn linear_objective_st_equals_relaxed_path() {
        let obj = Quadratic::linear(vec![1.0, -2.0, 0.5, 3.0], 0.1);
        let logits = [0.3, -1.0, 2.0, 0.5];
        let mut rng = seeded(4);
        for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 2 }] {
            let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
            let st = pathwise_st_grad(&obj, mode, &logits, std::slice::from_ref(&s), 0.5).unwrap();
            let rel = relaxed_vjp(mode, &logits, &s, 0.5, &obj.grad(&s.relaxed), false).unwrap();
            assert_eq!(st, rel);
        }
    }

    #[test]
    fn pathwise_saturates_as_tau_shrinks() {
        let obj = Quadratic::random(4, &mut seeded(5));
        let logits = [0.3, -1.0, 2.0, 0.5];
        let mut rng = seeded(6);
        let mut tiny = 0;
        for _ in 0..1000 {
            let s = maskdist::sample(MaskMode::Bernoulli, &logits, 1e-4, &mut rng).unwrap();
            let g = pathwise_st_grad(&obj, MaskMode::Bernoulli, &logits, &[s], 1e-4).unwrap();
            tiny += usize::from(g.iter().all(|v| v.abs() < 1e-6));
        }
        // almost every draw lands far from the threshold
        assert!(tiny >= 990, "{tiny}");
    }

    #[test]
    fn rebar_eta_zero_is_reinforce_bitwise() {
        let obj = Quadratic::random(4, &mut seeded(7));
        let logits = [0.3, -1.0, 2.0, 0.5];
        let mut rng = seeded(8);
        for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 2 }] {
            let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
            let one = std::slice::from_ref(&s);
            let a = rebar_grad(&obj, mode, &logits, one, 0.5, 0.0, 0.3, false).unwrap();
            let b = reinforce_grad(&obj, mode, &logits, one, 0.3).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn estimators_unbiased_on_small_problems() {
        let n = 100_000;
        for (mode, d) in [(MaskMode::Bernoulli, 4), (MaskMode::Subset { k: 2 }, 4)] {
            let obj = Quadratic::random(d, &mut seeded(9));
            let logits: Vec<f64> = (0..d).map(|i| 0.7 * i as f64 - 1.0).collect();
            let exact = exact_grad(&obj, mode, &logits).unwrap();
            let mut rng = seeded(10);
            let mut rf = Vec::with_capacity(n);
            let mut rb = Vec::with_capacity(n);
            for _ in 0..n {
                let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
                let one = std::slice::from_ref(&s);
                rf.push(reinforce_grad(&obj, mode, &logits, one, 0.0).unwrap());
                rb.push(rebar_grad(&obj, mode, &logits, one, 0.5, 1.0, 0.0, false).unwrap());
            }
            for draws in [&rf, &rb] {
                let (m, se) = mean_and_se(draws);
                for i in 0..d {
                    let z = (m[i] - exact[i]) / se[i];
                    assert!(z.abs() < 4.0, "{mode:?} coord {i}: z={z}");
                }
            }
        }
    }

    #[test]
    fn st_points_along_exact_gradient() {
        let logits = [0.3, -0.6, 0.9, 0.1];
        let mut cosines = Vec::new();
        for seed in 0..5 {
            let obj = Quadratic::random(4, &mut seeded(100 + seed));
            let exact = exact_grad(&obj, MaskMode::Bernoulli, &logits).unwrap();
            let mut rng = seeded(200 + seed);
            let mut mean = vec![0.0; 4];
            let n = 20_000;
            for _ in 0..n {
                let s = maskdist::sample(MaskMode::Bernoulli, &logits, 0.5, &mut rng).unwrap();
                axpy(&mut mean, 1.0 / n as f64, &pathwise_st_grad(&obj, MaskMode::Bernoulli, &logits, &[s], 0.5).unwrap());
            }
            let dot: f64 = mean.iter().zip(&exact).map(|(a, b)| a * b).sum();
            let na = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            cosines.push(dot / (na * nb));
        }
        assert!(cosines.iter().all(|&c| c > 0.5), "{cosines:?}");
    }

    #[test]
    fn saturated_logits_give_finite_gradients() {
        let obj = Quadratic::random(4, &mut seeded(11));
        let logits = [30.0, -30.0, 30.0, -30.0];
        let mut rng = seeded(12);
        for mode in [MaskMode::Bernoulli, MaskMode::Subset { k: 2 }] {
            for _ in 0..200 {
                let s = maskdist::sample(mode, &logits, 0.5, &mut rng).unwrap();
                let one = std::slice::from_ref(&s);
                for g in [
                    reinforce_grad(&obj, mode, &logits, one, 0.0).unwrap(),
                    pathwise_st_grad(&obj, mode, &logits, one, 0.5).unwrap(),
                    rebar_grad(&obj, mode, &logits, one, 0.5, 1.0, 0.0, false).unwrap(),
                    rebar_grad(&obj, mode, &logits, one, 0.5, 1.0, 0.0, true).unwrap(),
                ] {
                    assert!(g.iter().all(|v| v.is_finite()), "{mode:?} {g:?}");
                }
            }
        }
    }

    #[test]
    fn conditional_sample_couples_and_saturates() {
        let mut rng = seeded(13);
        let logits = [0.4, -0.3, 80.0];
        for _ in 0..1000 {
            let s = maskdist::bernoulli_sample(&logits, 0.5, &mut rng);
            let c = conditional_relaxed_sample(MaskMode::Bernoulli, &logits, &s, 0.5, &mut rng).unwrap();
            for (h, r) in s.hard.iter().zip(&c) {
                assert_eq!(*h == 1, *r > 0.5);
            }
            assert!(c[2] > 1.0 - 1e-12);
        }
    }

    #[test]
    fn moving_average_baseline() {
        assert!(MovingAverage::new(1.0).is_err());
        let mut b = MovingAverage::new(0.5).unwrap();
        assert_eq!(b.current(), 0.0);
        b.update(4.0);
        b.update(2.0);
        assert_eq!(b.current(), 3.0);
    }
}
