//! Selection quality (TPR/FPR/FDR against the ground-truth mask),
//! mask-averaged accuracy, and the sweep harnesses.

pub mod sweep;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::Real;
use crate::error::{LexError, Result};
use crate::lexmodel::LexModel;
use crate::maskdist::{self, MaskMode};
use crate::rng::seeded;
use crate::synthgen::Dataset;

pub use sweep::{
    aggregate, sweep_constant, sweep_lambda, sweep_rates, write_csv, Arm, CellSummary, SweepKind, SweepOutcome, SweepRun,
    CSV_HEADER, FIG3_RATES, FULL_CONSTANTS, LAMBDA_GRID, SHORT_CONSTANTS,
};

/// Masks drawn per instance when evaluating.
pub const EVAL_MASKS: usize = 100;
/// Instances per predictor call during evaluation.
const EVAL_CHUNK: usize = 64;

/// Mean selection quality over a test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tpr: f64,
    pub fpr: f64,
    pub fdr: f64,
    /// Argmax of the mask-averaged predictive distribution.
    pub accuracy: f64,
    /// Mean over masks of the per-mask argmax accuracy.
    pub accuracy_per_mask: f64,
    /// Mean of `E[Z|x]` over features and instances.
    pub effective_rate: f64,
    pub n_mask_samples: usize,
    pub n_instances: usize,
}

/// Selection counts of one mask against the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskCounts {
    pub selected: usize,
    pub true_pos: usize,
    pub false_pos: usize,
    pub relevant: usize,
    pub irrelevant: usize,
}

pub fn mask_counts(z: &[u8], z_star: &[u8]) -> Result<MaskCounts> {
    if z.len() != z_star.len() {
        return Err(LexError::Contract(format!("mask of length {} against truth of length {}", z.len(), z_star.len())));
    }
    let mut c = MaskCounts {
        selected: 0,
        true_pos: 0,
        false_pos: 0,
        relevant: 0,
        irrelevant: 0,
    };
    for (&a, &t) in z.iter().zip(z_star) {
        let a = a != 0;
        let t = t != 0;
        c.selected += usize::from(a);
        c.relevant += usize::from(t);
        c.irrelevant += usize::from(!t);
        c.true_pos += usize::from(a && t);
        c.false_pos += usize::from(a && !t);
    }
    Ok(c)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// `(tpr, fpr, fdr)`; rates with an empty denominator are 0.
pub fn mask_metrics(z: &[u8], z_star: &[u8]) -> Result<(f64, f64, f64)> {
    let c = mask_counts(z, z_star)?;
    Ok((ratio(c.true_pos, c.relevant), ratio(c.false_pos, c.irrelevant), ratio(c.false_pos, c.selected)))
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn instance_seed(base: u64, x: &[f64], y: u8) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for v in x {
        h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h ^ u64::from(y)).wrapping_mul(0x0000_0100_0000_01b3)
}

/// Draws `n_masks` selections per test instance and averages the per-mask
/// rates, then averages over instances. Each instance's draws come from a
/// stream keyed on its content, so the result does not depend on row order.
pub fn evaluate_model<T: Real, R: Rng + ?Sized>(model: &LexModel<T>, test: &Dataset, n_masks: usize, rng: &mut R) -> Result<SelectionMetrics> {
    if n_masks == 0 {
        return Err(LexError::Config("n_masks must be >= 1".into()));
    }
    if test.n_features != model.d {
        return Err(LexError::Dimension(format!("test set has {} features, model {}", test.n_features, model.d)));
    }
    let base: u64 = rng.random();
    let n = test.len();
    let d = model.d;
    let c = model.classes;
    let mut sums = [0.0f64; 6];
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let rows = end - start;
        let logits = model.selector_logits(&test.x[start * d..end * d], rows)?;
        let mut xs = vec![0.0; rows * n_masks * d];
        let mut per_instance = Vec::with_capacity(rows);
        for r in 0..rows {
            let i = start + r;
            let x = test.row(i);
            let li = &logits[r * d..(r + 1) * d];
            let mut irng = seeded(instance_seed(base, x, test.y[i]));
            let (mut tpr, mut fpr, mut fdr) = (0.0, 0.0, 0.0);
            for m in 0..n_masks {
                let s = maskdist::sample(model.mode, li, model.tau, &mut irng)?;
                let (a, b, e) = mask_metrics(&s.hard, test.mask(i))?;
                tpr += a;
                fpr += b;
                fdr += e;
                let at = (r * n_masks + m) * d;
                model.imputer.impute_into(x, &s.hard, &mut irng, &mut xs[at..at + d])?;
            }
            let eff = match model.mode {
                MaskMode::Bernoulli => maskdist::expected_selection(li, model.mode, &mut irng)?.iter().sum::<f64>() / d as f64,
                MaskMode::Subset { k } => k as f64 / d as f64,
            };
            per_instance.push([tpr, fpr, fdr, eff]);
        }
        let probs = model.predict(&xs, rows * n_masks)?;
        for (r, [tpr, fpr, fdr, eff]) in per_instance.into_iter().enumerate() {
            let y = usize::from(test.y[start + r]);
            let mut mean = vec![0.0; c];
            let mut hits = 0usize;
            for m in 0..n_masks {
                let p = &probs[(r * n_masks + m) * c..(r * n_masks + m + 1) * c];
                hits += usize::from(argmax(p) == y);
                for (a, v) in mean.iter_mut().zip(p) {
                    *a += v;
                }
            }
            let k = n_masks as f64;
            sums[0] += tpr / k;
            sums[1] += fpr / k;
            sums[2] += fdr / k;
            sums[3] += f64::from(u8::from(argmax(&mean) == y));
            sums[4] += hits as f64 / k;
            sums[5] += eff;
        }
        start = end;
    }
    let nf = n.max(1) as f64;
    Ok(SelectionMetrics {
        tpr: sums[0] / nf,
        fpr: sums[1] / nf,
        fdr: sums[2] / nf,
        accuracy: sums[3] / nf,
        accuracy_per_mask: sums[4] / nf,
        effective_rate: sums[5] / nf,
        n_mask_samples: n_masks,
        n_instances: n,
    })
}
