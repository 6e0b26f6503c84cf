use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansFit {
    pub k: usize,
    pub d: usize,
    /// k×d, row-major.
    pub centers: Vec<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_trace: Vec<f64>,
    pub reseeds: usize,
}

impl KMeansFit {
    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.d..(k + 1) * self.d]
    }

    /// Nearest center over all coordinates.
    pub fn nearest(&self, x: &[f64]) -> usize {
        nearest(&self.centers, self.d, x, None)
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center, optionally measuring only where `mask` is 1.
pub(crate) fn nearest(centers: &[f64], d: usize, x: &[f64], mask: Option<&[u8]>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.chunks(d).enumerate() {
        let dist: f64 = match mask {
            None => sq_dist(c, x),
            Some(m) => c
                .iter()
                .zip(x)
                .zip(m)
                .filter(|(_, &m)| m == 1)
                .map(|((a, b), _)| (a - b) * (a - b))
                .sum(),
        };
        if dist < best.0 {
            best = (dist, k);
        }
    }
    best.1
}

/// k-means++ seeding.
fn seed_centers<R: Rng + ?Sized>(x: &[f64], d: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = x.len() / d;
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&x[first * d..(first + 1) * d]);
    let mut dist: Vec<f64> = x.chunks(d).map(|r| sq_dist(r, &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let row = &x[pick * d..(pick + 1) * d];
        centers.extend_from_slice(row);
        for (dv, r) in dist.iter_mut().zip(x.chunks(d)) {
            *dv = dv.min(sq_dist(r, row));
        }
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds. Empty clusters are re-seeded at
/// the point farthest from its current center.
pub fn fit_kmeans<R: Rng + ?Sized>(x: &[f64], d: usize, k: usize, max_iter: usize, rng: &mut R) -> Result<KMeansFit> {
    let n = if d == 0 { 0 } else { x.len() / d };
    if k == 0 || n < k {
        return Err(LexError::Config(format!("kmeans needs 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut centers = seed_centers(x, d, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut wcss_trace = Vec::new();
    let mut reseeds = 0;
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut wcss = 0.0;
        for (i, row) in x.chunks(d).enumerate() {
            let c = nearest(&centers, d, row, None);
            wcss += sq_dist(row, &centers[c * d..(c + 1) * d]);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        wcss_trace.push(wcss);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &c) in x.chunks(d).zip(&assignment) {
            counts[c] += 1;
            for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(row) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(&x[a * d..(a + 1) * d], &centers[assignment[a] * d..(assignment[a] + 1) * d]);
                        let db = sq_dist(&x[b * d..(b + 1) * d], &centers[assignment[b] * d..(assignment[b] + 1) * d]);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                centers[c * d..(c + 1) * d].copy_from_slice(&x[far * d..(far + 1) * d]);
                reseeds += 1;
            } else {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    Ok(KMeansFit {
        k,
        d,
        centers,
        assignment,
        wcss_trace,
        reseeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn single_cluster_center_is_mean() {
        let x = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let fit = fit_kmeans(&x, 2, 1, 50, &mut seeded(1)).unwrap();
        assert!((fit.centers[0] - 3.0).abs() < 1e-12);
        assert!((fit.centers[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered_and_wcss_decreases() {
        let mut rng = seeded(2);
        let mut x = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = if i % 2 == 0 { -5.0 } else { 5.0 };
            x.push(c + rng.random_range(-1.0..1.0));
            x.push(rng.random_range(-1.0..1.0));
            truth.push(i % 2);
        }
        let fit = fit_kmeans(&x, 2, 2, 100, &mut seeded(3)).unwrap();
        let same = truth.iter().zip(&fit.assignment).filter(|(a, b)| a == b).count();
        assert!(same == 200 || same == 0);
        for w in fit.wcss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn too_many_clusters() {
        assert!(matches!(fit_kmeans(&[1.0, 2.0], 1, 3, 10, &mut seeded(0)), Err(LexError::Config(_))));
    }
}
