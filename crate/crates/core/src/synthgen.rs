//! Synthetic S1/S2/S3 switching datasets with per-row ground-truth masks.
//!
//! Every feature is iid standard normal. Feature 11 routes each row to one of
//! three link functions, and `y ~ Bernoulli(1 / (1 + f(x)))`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};
use crate::rng;

pub const N_FEATURES: usize = 11;

/// Exponent arguments are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynthName {
    S1,
    S2,
    S3,
}

impl FromStr for SynthName {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "s1" => Ok(SynthName::S1),
            "s2" => Ok(SynthName::S2),
            "s3" => Ok(SynthName::S3),
            other => Err(LexError::Config(format!("unknown dataset {other:?}"))),
        }
    }
}

impl fmt::Display for SynthName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SynthName::S1 => "S1",
            SynthName::S2 => "S2",
            SynthName::S3 => "S3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = LexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(LexError::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// How the `e^{x_{-10}}` term of the third link function is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X10Sign {
    /// `exp(-x_10)`.
    #[default]
    Negative,
    /// `exp(x_10)`, for sensitivity checks.
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchValues {
    pub f_a: f64,
    pub f_b: f64,
    pub f_c: f64,
}

fn clamped_exp(a: f64) -> f64 {
    a.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

/// The three link functions at `x` (0-based storage of 1-based features).
pub fn branch_functions(x: &[f64], x10: X10Sign) -> BranchValues {
    let f_a = clamped_exp(x[0] * x[1]);
    let f_b = clamped_exp(x[2..6].iter().map(|v| v * v).sum::<f64>() - 4.0);
    let e10 = match x10 {
        X10Sign::Negative => clamped_exp(-x[9]),
        X10Sign::Positive => clamped_exp(x[9]),
    };
    let f_c = clamped_exp(-10.0 * (0.2 * x[6]).sin() + x[7].abs() + x[8] + e10 - 2.4);
    BranchValues { f_a, f_b, f_c }
}

/// `f(x)` for the named dataset, routed on the sign of feature 11.
pub fn link(name: SynthName, x: &[f64], x10: X10Sign) -> f64 {
    let b = branch_functions(x, x10);
    let negative = x[10] < 0.0;
    match (name, negative) {
        (SynthName::S1, true) | (SynthName::S2, true) => b.f_a,
        (SynthName::S1, false) | (SynthName::S3, true) => b.f_b,
        (SynthName::S2, false) | (SynthName::S3, false) => b.f_c,
    }
}

/// Probability that `y = 1`.
pub fn label_probability(name: SynthName, x: &[f64], x10: X10Sign) -> f64 {
    1.0 / (1.0 + link(name, x, x10))
}

/// Features the generating branch reads, plus the routing feature 11.
pub fn ground_truth_mask(x: &[f64], name: SynthName) -> [u8; N_FEATURES] {
    const A: &[usize] = &[0, 1];
    const B: &[usize] = &[2, 3, 4, 5];
    const C: &[usize] = &[6, 7, 8, 9];
    let negative = x[10] < 0.0;
    let used = match (name, negative) {
        (SynthName::S1, true) | (SynthName::S2, true) => A,
        (SynthName::S1, false) | (SynthName::S3, true) => B,
        (SynthName::S2, false) | (SynthName::S3, false) => C,
    };
    let mut m = [0u8; N_FEATURES];
    for &i in used {
        m[i] = 1;
    }
    m[10] = 1;
    m
}

/// Tabular dataset: row-major features, binary labels, ground-truth masks
/// and a split tag per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: Option<SynthName>,
    pub seed: u64,
    pub n_features: usize,
    pub x: Vec<f64>,
    pub y: Vec<u8>,
    pub z_star: Vec<u8>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn empty(name: Option<SynthName>, seed: u64, n_features: usize) -> Self {
        Dataset {
            name,
            seed,
            n_features,
            x: Vec::new(),
            y: Vec::new(),
            z_star: Vec::new(),
            split: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn mask(&self, i: usize) -> &[u8] {
        &self.z_star[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn push(&mut self, x: &[f64], y: u8, z_star: &[u8], split: Split) {
        debug_assert_eq!(x.len(), self.n_features);
        self.x.extend_from_slice(x);
        self.y.push(y);
        self.z_star.extend_from_slice(z_star);
        self.split.push(split);
    }

    /// Rows carrying the given split tag, in order.
    pub fn subset(&self, split: Split) -> Dataset {
        let mut out = Dataset::empty(self.name, self.seed, self.n_features);
        for i in (0..self.len()).filter(|&i| self.split[i] == split) {
            out.push(self.row(i), self.y[i], self.mask(i), split);
        }
        out
    }

    /// Re-tags the trailing `fraction` of rows as validation rows.
    pub fn carve_validation(&mut self, fraction: f64) {
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let start = self.len() - n_val.min(self.len());
        for s in &mut self.split[start..] {
            *s = Split::Val;
        }
    }

    /// Fraction of the majority label.
    pub fn majority_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let ones = self.y.iter().filter(|&&v| v == 1).count() as f64 / self.len() as f64;
        ones.max(1.0 - ones)
    }
}

/// Draws `n` rows of a synthetic dataset, all tagged `split`.
pub fn gen_synthetic(name: SynthName, n: usize, seed: u64, split: Split, x10: X10Sign) -> Dataset {
    let mut feat = rng::stream(seed, "synth.features");
    let mut lab = rng::stream(seed, "synth.labels");
    let mut ds = Dataset::empty(Some(name), seed, N_FEATURES);
    let mut x = [0.0; N_FEATURES];
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = feat.sample(StandardNormal);
        }
        let p = label_probability(name, &x, x10);
        let y = u8::from(lab.random::<f64>() < p);
        ds.push(&x, y, &ground_truth_mask(&x, name), split);
    }
    ds
}

/// One generated replicate: a train file (with its trailing 20% tagged as
/// validation) and an independent test file.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub train: Dataset,
    pub test: Dataset,
}

pub const VALIDATION_FRACTION: f64 = 0.2;

pub fn gen_replicate(name: SynthName, n_train: usize, n_test: usize, seed: u64, x10: X10Sign) -> Replicate {
    let mut train = gen_synthetic(name, n_train, seed, Split::Train, x10);
    train.carve_validation(VALIDATION_FRACTION);
    // test rows come from a disjoint seed space
    let test = gen_synthetic(name, n_test, seed ^ 0x7e57_0000_0000_0000, Split::Test, x10);
    Replicate { train, test }
}

fn header(d: usize) -> String {
    let xs = (1..=d).map(|i| format!("x{i}"));
    let zs = (1..=d).map(|i| format!("z{i}"));
    xs.chain(std::iter::once("y".to_string()))
        .chain(zs)
        .chain(std::iter::once("split".to_string()))
        .collect::<Vec<_>>()
        .join(",")
}

/// CSV text: a `#` metadata line, the header, then one line per row with
/// 17-significant-digit floats.
pub fn to_csv(ds: &Dataset) -> String {
    let name = ds.name.map_or("custom".to_string(), |n| n.to_string());
    let mut out = format!("# dataset={name} seed={}\n{}\n", ds.seed, header(ds.n_features));
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        fields.push(ds.y[i].to_string());
        fields.extend(ds.mask(i).iter().map(|m| m.to_string()));
        fields.push(ds.split[i].as_str().to_string());
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Parses [`to_csv`] output. The metadata line is optional; the feature
/// count comes from the header.
pub fn parse_csv(text: &str, origin: &Path) -> Result<Dataset> {
    let err = |line: usize, message: String| LexError::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut name = None;
    let mut seed = 0;
    let mut lines = text.lines().enumerate().peekable();
    if let Some((_, l)) = lines.peek() {
        if let Some(meta) = l.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("dataset", "custom")) => {}
                    Some(("dataset", v)) => name = Some(v.parse().map_err(|e: LexError| err(1, e.to_string()))?),
                    Some(("seed", v)) => seed = v.parse().map_err(|_| err(1, format!("bad seed {v:?}")))?,
                    _ => return Err(err(1, format!("unrecognized metadata {kv:?}"))),
                }
            }
            lines.next();
        }
    }
    let (hline, head) = lines.next().ok_or_else(|| err(1, "missing header".into()))?;
    let cols: Vec<&str> = head.split(',').collect();
    if cols.len() < 4 || (cols.len() - 2) % 2 != 0 {
        return Err(err(hline + 1, format!("header has {} columns", cols.len())));
    }
    let d = (cols.len() - 2) / 2;
    if head != header(d) {
        return Err(err(hline + 1, format!("expected header {:?}", header(d))));
    }
    let mut ds = Dataset::empty(name, seed, d);
    let mut x = vec![0.0; d];
    let mut z = vec![0u8; d];
    for (ln, line) in lines {
        let ln = ln + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(err(ln, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        for j in 0..d {
            x[j] = f[j]
                .parse()
                .map_err(|_| err(ln, format!("field x{}: bad float {:?}", j + 1, f[j])))?;
        }
        let y = match f[d] {
            "0" => 0,
            "1" => 1,
            v => return Err(err(ln, format!("field y: expected 0 or 1, found {v:?}"))),
        };
        for j in 0..d {
            z[j] = match f[d + 1 + j] {
                "0" => 0,
                "1" => 1,
                v => return Err(err(ln, format!("field z{}: expected 0 or 1, found {v:?}", j + 1))),
            };
        }
        let split = f[2 * d + 1]
            .parse()
            .map_err(|e: LexError| err(ln, format!("field split: {e}")))?;
        ds.push(&x, y, &z, split);
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv(ds)).map_err(|e| LexError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| LexError::io(path, e))?;
    parse_csv(&text, path)
}
