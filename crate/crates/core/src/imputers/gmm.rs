use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::fit_kmeans;
use crate::diffnet::scalar::logsumexp;
use crate::error::{LexError, Result};

pub const VARIANCE_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub k: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    /// k×d.
    pub means: Vec<f64>,
    /// k×d.
    pub variances: Vec<f64>,
}

fn log_normal(x: f64, mu: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mu) * (x - mu) / var)
}

impl GmmParams {
    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.d..(k + 1) * self.d]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.d..(k + 1) * self.d]
    }

    /// `log N(x | μ_k, Σ_k)` over coordinates where `mask` is 1 (all when None).
    pub fn component_logdensity(&self, k: usize, x: &[f64], mask: Option<&[u8]>) -> f64 {
        let mu = self.mean(k);
        let var = self.variance(k);
        (0..self.d)
            .filter(|&j| mask.is_none_or(|m| m[j] == 1))
            .map(|j| log_normal(x[j], mu[j], var[j]))
            .sum()
    }

    pub fn loglik(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.k)
            .map(|k| self.weights[k].ln() + self.component_logdensity(k, x, None))
            .collect();
        logsumexp(&terms)
    }

    /// `p(k | x_obs)` using only coordinates with `z = 1`.
    pub fn component_posterior(&self, x: &[f64], z: &[u8]) -> Vec<f64> {
        if z.iter().all(|&b| b == 0) {
            return self.weights.clone();
        }
        let logs: Vec<f64> = (0..self.k)
            .map(|k| self.weights[k].ln() + self.component_logdensity(k, x, Some(z)))
            .collect();
        let lse = logsumexp(&logs);
        logs.iter().map(|l| (l - lse).exp()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GmmFitReport {
    /// Mean per-row log-likelihood before each M-step.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations at which an empty component was re-seeded.
    pub reseed_iterations: Vec<usize>,
}

/// Samples a categorical index from probabilities.
pub(crate) fn categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let mut u = rng.random::<f64>() * p.iter().sum::<f64>();
    for (i, &w) in p.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(p.len() - 1)
}

/// EM for a diagonal GMM, initialised from k-means++/Lloyd.
pub fn fit_gmm_em<R: Rng + ?Sized>(
    x: &[f64],
    d: usize,
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut R,
) -> Result<(GmmParams, GmmFitReport)> {
    let n = if d == 0 { 0 } else { x.len() / d };
    if k == 0 || n < k {
        return Err(LexError::Config(format!("gmm needs 1 <= K <= n, got K={k}, n={n}")));
    }
    let km = fit_kmeans(x, d, k, 20, rng)?;
    // hard responsibilities from the k-means partition
    let mut resp = vec![0.0; n * k];
    for (i, &c) in km.assignment.iter().enumerate() {
        resp[i * k + c] = 1.0;
    }
    let mut params = GmmParams {
        k,
        d,
        weights: vec![1.0 / k as f64; k],
        means: km.centers.clone(),
        variances: vec![1.0; k * d],
    };
    let mut report = GmmFitReport::default();
    m_step(x, &resp, &mut params, &mut report, 0);
    let mut prev = f64::NEG_INFINITY;
    for it in 0..max_iter {
        let ll = e_step(x, &params, &mut resp);
        report.loglik_trace.push(ll);
        report.iterations = it + 1;
        if (ll - prev).abs() < tol * ll.abs().max(1.0) {
            report.converged = true;
            break;
        }
        prev = ll;
        m_step(x, &resp, &mut params, &mut report, it + 1);
    }
    Ok((params, report))
}

fn e_step(x: &[f64], p: &GmmParams, resp: &mut [f64]) -> f64 {
    let k = p.k;
    let mut total = 0.0;
    let mut logs = vec![0.0; k];
    for (row, r) in x.chunks(p.d).zip(resp.chunks_mut(k)) {
        for (c, l) in logs.iter_mut().enumerate() {
            *l = p.weights[c].ln() + p.component_logdensity(c, row, None);
        }
        let lse = logsumexp(&logs);
        total += lse;
        for (ri, l) in r.iter_mut().zip(&logs) {
            *ri = (l - lse).exp();
        }
    }
    total / (x.len() / p.d) as f64
}

fn m_step(x: &[f64], resp: &[f64], p: &mut GmmParams, report: &mut GmmFitReport, iteration: usize) {
    let (k, d) = (p.k, p.d);
    let n = x.len() / d;
    let mut nk = vec![0.0; k];
    let mut sums = vec![0.0; k * d];
    for (row, r) in x.chunks(d).zip(resp.chunks(k)) {
        for c in 0..k {
            nk[c] += r[c];
            for j in 0..d {
                sums[c * d + j] += r[c] * row[j];
            }
        }
    }
    let mut empty = Vec::new();
    for c in 0..k {
        if nk[c] < 1e-8 {
            empty.push(c);
            continue;
        }
        for j in 0..d {
            p.means[c * d + j] = sums[c * d + j] / nk[c];
        }
    }
    let mut sq = vec![0.0; k * d];
    for (row, r) in x.chunks(d).zip(resp.chunks(k)) {
        for c in 0..k {
            for j in 0..d {
                let dv = row[j] - p.means[c * d + j];
                sq[c * d + j] += r[c] * dv * dv;
            }
        }
    }
    for c in 0..k {
        if nk[c] < 1e-8 {
            continue;
        }
        p.weights[c] = nk[c] / n as f64;
        for j in 0..d {
            p.variances[c * d + j] = (sq[c * d + j] / nk[c]).max(VARIANCE_FLOOR);
        }
    }
    if !empty.is_empty() {
        // re-seed each empty component at the worst-explained row
        for &c in &empty {
            let far = (0..n)
                .min_by(|&a, &b| {
                    p.loglik(&x[a * d..(a + 1) * d])
                        .total_cmp(&p.loglik(&x[b * d..(b + 1) * d]))
                })
                .unwrap_or(0);
            p.means[c * d..(c + 1) * d].copy_from_slice(&x[far * d..(far + 1) * d]);
            for j in 0..d {
                p.variances[c * d + j] = 1.0;
            }
            p.weights[c] = 1.0 / n as f64;
        }
        let s: f64 = p.weights.iter().sum();
        for w in &mut p.weights {
            *w /= s;
        }
        report.reseed_iterations.push(iteration);
    }
}

/// Per-component categorical law over validation rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ResampleTableRaw", into = "ResampleTableRaw")]
pub struct ResampleTable {
    pub rows: Vec<Vec<f64>>,
    /// Components whose densities all underflowed and fell back to uniform.
    pub uniform_fallbacks: Vec<usize>,
    cdf: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ResampleTableRaw {
    rows: Vec<Vec<f64>>,
    #[serde(default)]
    uniform_fallbacks: Vec<usize>,
}

impl TryFrom<ResampleTableRaw> for ResampleTable {
    type Error = String;

    fn try_from(r: ResampleTableRaw) -> std::result::Result<Self, String> {
        if r.rows.iter().any(|row| row.is_empty()) {
            return Err("resample table row is empty".into());
        }
        Ok(ResampleTable::from_rows(r.rows, r.uniform_fallbacks))
    }
}

impl From<ResampleTable> for ResampleTableRaw {
    fn from(t: ResampleTable) -> Self {
        ResampleTableRaw {
            rows: t.rows,
            uniform_fallbacks: t.uniform_fallbacks,
        }
    }
}

impl ResampleTable {
    fn from_rows(rows: Vec<Vec<f64>>, uniform_fallbacks: Vec<usize>) -> Self {
        let cdf = rows
            .iter()
            .map(|r| {
                r.iter()
                    .scan(0.0, |acc, &p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect()
            })
            .collect();
        ResampleTable {
            rows,
            uniform_fallbacks,
            cdf,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> usize {
        let cdf = &self.cdf[k];
        let u = rng.random::<f64>() * cdf[cdf.len() - 1];
        cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
    }
}

/// `table[k][i] ∝ N(x_val_i | μ_k, Σ_k)`.
pub fn build_resample_table(params: &GmmParams, x_val: &[f64]) -> Result<ResampleTable> {
    let d = params.d;
    if x_val.is_empty() {
        return Err(LexError::Config("resample table needs a non-empty validation set".into()));
    }
    let mut rows = Vec::with_capacity(params.k);
    let mut fallbacks = Vec::new();
    for k in 0..params.k {
        let logs: Vec<f64> = x_val.chunks(d).map(|r| params.component_logdensity(k, r, None)).collect();
        let lse = logsumexp(&logs);
        if lse.is_finite() {
            rows.push(logs.iter().map(|l| (l - lse).exp()).collect());
        } else {
            fallbacks.push(k);
            rows.push(vec![1.0 / logs.len() as f64; logs.len()]);
        }
    }
    Ok(ResampleTable::from_rows(rows, fallbacks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::StandardNormal;

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = seeded(1);
        let x: Vec<f64> = (0..300).map(|_| rng.sample::<f64, _>(StandardNormal) * 2.0 + 1.0).collect();
        let (p, _) = fit_gmm_em(&x, 3, 1, 50, 1e-8, &mut seeded(2)).unwrap();
        for j in 0..3 {
            let col: Vec<f64> = x.chunks(3).map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|c| (c - m) * (c - m)).sum::<f64>() / col.len() as f64;
            assert!((p.means[j] - m).abs() < 1e-10);
            assert!((p.variances[j] - v).abs() < 1e-10);
        }
        assert_eq!(p.weights, vec![1.0]);
    }

    #[test]
    fn separated_clusters_and_monotone_trace() {
        let mut rng = seeded(3);
        let x: Vec<f64> = (0..2000)
            .map(|i| if i % 2 == 0 { -5.0 } else { 5.0 } + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let (p, report) = fit_gmm_em(&x, 1, 2, 200, 1e-10, &mut seeded(4)).unwrap();
        let mut means = p.means.clone();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.2 && (means[1] - 5.0).abs() < 0.2, "{means:?}");
        for w in report.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8);
        }
    }

    #[test]
    fn posterior_cases() {
        let p = GmmParams {
            k: 2,
            d: 1,
            weights: vec![0.3, 0.7],
            means: vec![-1.0, 2.0],
            variances: vec![0.5, 2.0],
        };
        assert_eq!(p.component_posterior(&[0.4], &[0]), vec![0.3, 0.7]);
        let post = p.component_posterior(&[0.4], &[1]);
        let dens = |mu: f64, var: f64| (-(0.4 - mu) * (0.4 - mu) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        let a = 0.3 * dens(-1.0, 0.5);
        let b = 0.7 * dens(2.0, 2.0);
        assert!((post[0] - a / (a + b)).abs() < 1e-10);
        let one = GmmParams {
            k: 1,
            d: 1,
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![1.0],
        };
        assert_eq!(one.component_posterior(&[3.0], &[1]), vec![1.0]);
    }

    #[test]
    fn resample_table_rows() {
        let p = GmmParams {
            k: 1,
            d: 1,
            weights: vec![1.0],
            means: vec![0.0],
            variances: vec![1.0],
        };
        let t = build_resample_table(&p, &[0.5]).unwrap();
        assert_eq!(t.rows, vec![vec![1.0]]);
        let t = build_resample_table(&p, &[0.5, 2.0]).unwrap();
        assert!(t.rows[0][0] > t.rows[0][1]);
        assert!((t.rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let far = GmmParams { means: vec![1e200], ..p };
        let t = build_resample_table(&far, &[0.5, 2.0]).unwrap();
        assert_eq!(t.uniform_fallbacks, vec![0]);
        assert_eq!(t.rows[0], vec![0.5, 0.5]);
    }

    #[test]
    fn resample_table_json_round_trip() {
        let t = ResampleTable::from_rows(vec![vec![0.25, 0.75]], vec![]);
        let s = serde_json::to_string(&t).unwrap();
        let back: ResampleTable = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        let mut rng = seeded(5);
        let ones = (0..10_000).filter(|_| back.sample(0, &mut rng) == 1).count();
        assert!((ones as f64 / 10_000.0 - 0.75).abs() < 0.02);
    }
}
