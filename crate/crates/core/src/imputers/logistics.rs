use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmm::categorical;
use super::kmeans::fit_kmeans;
use crate::diffnet::scalar::{logsumexp, softplus};
use crate::error::{LexError, Result};
use crate::rng::open_unit;

pub const SCALE_FLOOR: f64 = 1e-3;
pub const DEFAULT_LEVELS: u32 = 255;

/// Mixture of per-dimension discretized logistics on the grid `0..=levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticsParams {
    pub k: usize,
    pub d: usize,
    pub levels: u32,
    pub weights: Vec<f64>,
    /// k×d.
    pub centers: Vec<f64>,
    /// k×d.
    pub scales: Vec<f64>,
}

fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(exp(a) - exp(b))` for `a >= b`.
fn log_diff_exp(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// Log-mass of grid value `x` under a logistic discretized to unit bins,
/// with the outer bins extended to ±∞.
pub fn discretized_logistic_logpmf(x: u32, mu: f64, s: f64, levels: u32) -> Result<f64> {
    if x > levels {
        return Err(LexError::Contract(format!("value {x} outside grid 0..={levels}")));
    }
    let xf = f64::from(x);
    let hi = if x == levels { f64::INFINITY } else { (xf + 0.5 - mu) / s };
    let lo = if x == 0 { f64::NEG_INFINITY } else { (xf - 0.5 - mu) / s };
    Ok(bin_logmass(lo, hi))
}

/// `log(σ(hi) − σ(lo))`, using upper-tail complements when both are positive.
fn bin_logmass(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        // σ(hi) − σ(lo) = σ(−lo) − σ(−hi)
        let b = if hi == f64::INFINITY { f64::NEG_INFINITY } else { log_sigmoid(-hi) };
        log_diff_exp(log_sigmoid(-lo), b)
    } else {
        let b = if lo == f64::NEG_INFINITY { f64::NEG_INFINITY } else { log_sigmoid(lo) };
        let a = if hi == f64::INFINITY { 0.0 } else { log_sigmoid(hi) };
        log_diff_exp(a, b)
    }
}

/// Draws a grid value: a continuous logistic draw rounded and clipped, which
/// has exactly the discretized pmf.
pub fn sample_discretized_logistic<R: Rng + ?Sized>(mu: f64, s: f64, levels: u32, rng: &mut R) -> u32 {
    let u = open_unit(rng);
    let v = mu + s * (u.ln() - (1.0 - u).ln());
    v.round().clamp(0.0, f64::from(levels)) as u32
}

fn grid_value(v: f64, levels: u32) -> u32 {
    v.round().clamp(0.0, f64::from(levels)) as u32
}

impl LogisticsParams {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.d..(k + 1) * self.d]
    }

    fn component_logmass(&self, k: usize, x: &[f64], mask: Option<&[u8]>) -> f64 {
        (0..self.d)
            .filter(|&j| mask.is_none_or(|m| m[j] == 1))
            .map(|j| {
                let i = k * self.d + j;
                let v = grid_value(x[j], self.levels);
                discretized_logistic_logpmf(v, self.centers[i], self.scales[i], self.levels)
                    .unwrap_or(f64::NEG_INFINITY)
            })
            .sum()
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        let t: Vec<f64> = (0..self.k)
            .map(|k| self.weights[k].ln() + self.component_logmass(k, x, None))
            .collect();
        logsumexp(&t)
    }

    /// `p(k | x_obs)`; observed values are rounded onto the grid.
    pub fn component_posterior(&self, x: &[f64], z: &[u8]) -> Vec<f64> {
        if z.iter().all(|&b| b == 0) {
            return self.weights.clone();
        }
        let t: Vec<f64> = (0..self.k)
            .map(|k| self.weights[k].ln() + self.component_logmass(k, x, Some(z)))
            .collect();
        let lse = logsumexp(&t);
        t.iter().map(|v| (v - lse).exp()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogisticsFitReport {
    /// Mean per-row training log-likelihood after each epoch.
    pub loglik_trace: Vec<f64>,
    pub heldout_loglik: Option<f64>,
    pub epochs: usize,
}

/// Maximises Σ_v counts[v]·log pmf(v | μ, s) by gradient ascent on (μ, log s)
/// with backtracking.
fn fit_bin_counts(counts: &[f64], levels: u32, mu: &mut f64, s: &mut f64) {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return;
    }
    let objective = |mu: f64, ls: f64| -> f64 {
        let s = ls.exp();
        counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0.0)
            .map(|(v, &c)| c * discretized_logistic_logpmf(v as u32, mu, s, levels).unwrap_or(f64::NEG_INFINITY))
            .sum::<f64>()
            / total
    };
    let mut ls = s.max(SCALE_FLOOR).ln();
    let mut f = objective(*mu, ls);
    let h = 1e-5;
    for _ in 0..50 {
        let gm = (objective(*mu + h, ls) - objective(*mu - h, ls)) / (2.0 * h);
        let gs = (objective(*mu, ls + h) - objective(*mu, ls - h)) / (2.0 * h);
        if !(gm.is_finite() && gs.is_finite()) || gm.abs() + gs.abs() < 1e-9 {
            break;
        }
        let mut step = 1.0 / (1.0 + gm.abs() + gs.abs());
        let mut moved = false;
        for _ in 0..30 {
            let nm = *mu + step * gm * s.max(1.0);
            let nl = (ls + step * gs).max(SCALE_FLOOR.ln());
            let nf = objective(nm, nl);
            if nf > f {
                *mu = nm;
                ls = nl;
                f = nf;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            break;
        }
        *s = ls.exp();
    }
    *s = ls.exp().max(SCALE_FLOOR);
}

/// Stochastic EM from a k-means start.
pub fn fit_logistics<R: Rng + ?Sized>(
    x: &[f64],
    d: usize,
    k: usize,
    levels: u32,
    epochs: usize,
    heldout: Option<&[f64]>,
    rng: &mut R,
) -> Result<(LogisticsParams, LogisticsFitReport)> {
    if x.iter().any(|&v| v.fract() != 0.0 || v < 0.0 || v > f64::from(levels)) {
        return Err(LexError::Contract(format!("logistics data must lie on the grid 0..={levels}")));
    }
    let n = if d == 0 { 0 } else { x.len() / d };
    let mut distinct: Vec<&[f64]> = x.chunks(d.max(1)).collect();
    distinct.sort_by(|a, b| a.iter().zip(*b).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if k == 0 || k > distinct.len() {
        return Err(LexError::Config(format!("K={k} exceeds {} distinct rows", distinct.len())));
    }
    let km = fit_kmeans(x, d, k, 50, rng)?;
    let mut assign = km.assignment.clone();
    let mut params = LogisticsParams {
        k,
        d,
        levels,
        weights: vec![1.0 / k as f64; k],
        centers: km.centers.clone(),
        scales: vec![1.0; k * d],
    };
    let mut report = LogisticsFitReport::default();
    let bins = levels as usize + 1;
    let mut logs = vec![0.0; k];
    for epoch in 0..epochs.max(1) {
        if epoch > 0 {
            // stochastic E-step: sample an assignment per row
            for (i, row) in x.chunks(d).enumerate() {
                for (c, l) in logs.iter_mut().enumerate() {
                    *l = params.weights[c].ln() + params.component_logmass(c, row, None);
                }
                let lse = logsumexp(&logs);
                let p: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
                assign[i] = categorical(&p, rng);
            }
        }
        let mut counts = vec![0.0; k * d * bins];
        let mut nk = vec![0.0; k];
        for (row, &c) in x.chunks(d).zip(&assign) {
            nk[c] += 1.0;
            for j in 0..d {
                counts[(c * d + j) * bins + row[j] as usize] += 1.0;
            }
        }
        for c in 0..k {
            if nk[c] == 0.0 {
                continue;
            }
            params.weights[c] = nk[c] / n as f64;
            for j in 0..d {
                let i = c * d + j;
                let hist = &counts[i * bins..(i + 1) * bins];
                if epoch == 0 {
                    // moment-matched start: logistic variance is s²π²/3
                    let m = hist.iter().enumerate().map(|(v, &h)| v as f64 * h).sum::<f64>() / nk[c];
                    let var = hist.iter().enumerate().map(|(v, &h)| h * (v as f64 - m).powi(2)).sum::<f64>() / nk[c];
                    params.centers[i] = m;
                    params.scales[i] = (var.sqrt() * 3f64.sqrt() / std::f64::consts::PI).max(SCALE_FLOOR);
                }
                fit_bin_counts(hist, levels, &mut params.centers[i], &mut params.scales[i]);
            }
        }
        let s: f64 = params.weights.iter().sum();
        for w in &mut params.weights {
            *w /= s;
        }
        let ll = x.chunks(d).map(|r| params.loglik(r)).sum::<f64>() / n as f64;
        report.loglik_trace.push(ll);
        report.epochs = epoch + 1;
    }
    report.heldout_loglik = heldout
        .filter(|h| !h.is_empty())
        .map(|h| h.chunks(d).map(|r| params.loglik(r)).sum::<f64>() / (h.len() / d) as f64);
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn pmf_sums_to_one() {
        for (mu, s) in [(127.5, 10.0), (3.0, 0.2), (-40.0, 5.0), (300.0, 50.0)] {
            let total: f64 = (0..=255).map(|v| discretized_logistic_logpmf(v, mu, s, 255).unwrap().exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{mu} {s} {total}");
        }
    }

    #[test]
    fn out_of_grid_is_contract_error() {
        assert!(matches!(discretized_logistic_logpmf(256, 0.0, 1.0, 255), Err(LexError::Contract(_))));
    }

    #[test]
    fn cold_scale_concentrates_on_nearest_bins() {
        let a = discretized_logistic_logpmf(127, 127.5, 1e-3, 255).unwrap().exp();
        let b = discretized_logistic_logpmf(128, 127.5, 1e-3, 255).unwrap().exp();
        assert!((a + b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn logpmf_matches_direct_form() {
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut rng = seeded(1);
        for _ in 0..200 {
            let mu = rng.random_range(-10.0..265.0);
            let s = rng.random_range(0.5..30.0);
            let x: u32 = rng.random_range(1..255);
            let (hi, lo) = ((x as f64 + 0.5 - mu) / s, (x as f64 - 0.5 - mu) / s);
            // complement form avoids cancellation in the upper tail
            let direct = if lo > 0.0 { sig(-lo) - sig(-hi) } else { sig(hi) - sig(lo) }.ln();
            let got = discretized_logistic_logpmf(x, mu, s, 255).unwrap();
            if direct.is_finite() && direct > -20.0 {
                assert!((got - direct).abs() < 1e-9, "{mu} {s} {x}");
            }
        }
    }

    #[test]
    fn sampler_matches_pmf() {
        let mut rng = seeded(2);
        let (mu, s, levels) = (4.3, 1.5, 10);
        let n = 100_000;
        let mut counts = vec![0usize; 11];
        for _ in 0..n {
            counts[sample_discretized_logistic(mu, s, levels, &mut rng) as usize] += 1;
        }
        for (v, &c) in counts.iter().enumerate() {
            let p = discretized_logistic_logpmf(v as u32, mu, s, levels).unwrap().exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 5.0 * se + 1e-4);
        }
    }

    #[test]
    fn single_component_fits_histogram() {
        let mut rng = seeded(3);
        let levels = 20;
        let x: Vec<f64> = (0..5000)
            .map(|_| f64::from(sample_discretized_logistic(9.0, 2.0, levels, &mut rng)))
            .collect();
        let (p, report) = fit_logistics(&x, 1, 1, levels, 3, None, &mut seeded(4)).unwrap();
        let mut hist = vec![0.0; 21];
        for v in &x {
            hist[*v as usize] += 1.0 / x.len() as f64;
        }
        let tv: f64 = (0..=levels)
            .map(|v| (hist[v as usize] - discretized_logistic_logpmf(v, p.centers[0], p.scales[0], levels).unwrap().exp()).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.1, "tv {tv}");
        assert!((p.centers[0] - 9.0).abs() < 0.5);
        assert_eq!(report.loglik_trace.len(), 3);
    }

    #[test]
    fn repeated_row_has_mode_there() {
        let x = vec![7.0, 3.0].repeat(50);
        let (p, _) = fit_logistics(&x, 2, 1, 10, 2, None, &mut seeded(5)).unwrap();
        for (j, want) in [7u32, 3].iter().enumerate() {
            let mode = (0..=10)
                .max_by(|&a, &b| {
                    let pa = discretized_logistic_logpmf(a, p.centers[j], p.scales[j], 10).unwrap();
                    let pb = discretized_logistic_logpmf(b, p.centers[j], p.scales[j], 10).unwrap();
                    pa.total_cmp(&pb)
                })
                .unwrap();
            assert_eq!(mode, *want);
        }
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        assert!(matches!(fit_logistics(&[0.5, 1.0], 1, 1, 10, 1, None, &mut seeded(0)), Err(LexError::Contract(_))));
        assert!(matches!(fit_logistics(&[1.0, 1.0], 1, 2, 10, 1, None, &mut seeded(0)), Err(LexError::Config(_))));
    }
}
