//! Conditional samplers `p(x̃ | x, z)` that fill unobserved coordinates.
//!
//! Every scheme keeps `x̃_d = x_d` where `z_d = 1`.

mod gmm;
mod kmeans;
mod logistics;

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use gmm::{build_resample_table, fit_gmm_em, GmmFitReport, GmmParams, ResampleTable, VARIANCE_FLOOR};
pub use kmeans::{fit_kmeans, KMeansFit};
pub(crate) use gmm::categorical;
pub use logistics::{
    discretized_logistic_logpmf, fit_logistics, sample_discretized_logistic, LogisticsFitReport, LogisticsParams,
    DEFAULT_LEVELS, SCALE_FLOOR,
};

use crate::error::{LexError, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_COMPONENTS: usize = 10;
pub const EM_MAX_ITER: usize = 200;
pub const EM_TOL: f64 = 1e-5;
pub const LOGISTICS_EPOCHS: usize = 20;

fn default_components() -> usize {
    DEFAULT_COMPONENTS
}

fn default_levels() -> u32 {
    DEFAULT_LEVELS
}

/// Which imputation scheme to fit, with its settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImputerSpec {
    Constant {
        #[serde(default)]
        c: f64,
    },
    Marginal,
    GaussianStd,
    Gmm {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        dequantize: bool,
    },
    GmmMeans {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        dequantize: bool,
    },
    GmmDataset {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default)]
        dequantize: bool,
    },
    KmeansDataset {
        #[serde(default = "default_components")]
        components: usize,
    },
    Logistics {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_levels")]
        levels: u32,
    },
    LogisticsMeans {
        #[serde(default = "default_components")]
        components: usize,
        #[serde(default = "default_levels")]
        levels: u32,
    },
}

impl ImputerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ImputerSpec::Constant { .. } => "constant",
            ImputerSpec::Marginal => "marginal",
            ImputerSpec::GaussianStd => "gaussian_std",
            ImputerSpec::Gmm { .. } => "gmm",
            ImputerSpec::GmmMeans { .. } => "gmm_means",
            ImputerSpec::GmmDataset { .. } => "gmm_dataset",
            ImputerSpec::KmeansDataset { .. } => "kmeans_dataset",
            ImputerSpec::Logistics { .. } => "logistics",
            ImputerSpec::LogisticsMeans { .. } => "logistics_means",
        }
    }

    pub fn needs_fit(&self) -> bool {
        !matches!(self, ImputerSpec::Constant { .. } | ImputerSpec::GaussianStd)
    }

    /// The imputer for schemes with nothing to fit; a state error otherwise.
    pub fn unfitted(&self) -> Result<Imputer> {
        match *self {
            ImputerSpec::Constant { c } => Ok(Imputer::Constant { c }),
            ImputerSpec::GaussianStd => Ok(Imputer::GaussianStd),
            _ => Err(LexError::State(format!("{} imputer has not been fitted", self.kind_name()))),
        }
    }
}

/// A fitted imputer; immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Imputer {
    Constant {
        c: f64,
    },
    GaussianStd,
    Marginal {
        d: usize,
        rows: Vec<f64>,
    },
    Gmm {
        params: GmmParams,
    },
    GmmMeans {
        params: GmmParams,
    },
    GmmDataset {
        params: GmmParams,
        table: ResampleTable,
        rows: Vec<f64>,
    },
    KmeansDataset {
        d: usize,
        centers: Vec<f64>,
        rows: Vec<f64>,
        /// Validation row indices per cluster.
        clusters: Vec<Vec<usize>>,
    },
    Logistics {
        params: LogisticsParams,
    },
    LogisticsMeans {
        params: LogisticsParams,
    },
}

/// Fit diagnostics emitted next to a fitted imputer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub kind: String,
    pub n_train: usize,
    pub n_val: usize,
    pub loglik_trace: Vec<f64>,
    pub heldout_loglik: Option<f64>,
    pub converged: Option<bool>,
    pub reseed_iterations: Vec<usize>,
    pub resample_uniform_fallbacks: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ImputerFile {
    version: u32,
    #[serde(flatten)]
    imputer: Imputer,
}

fn check_rows(x: &[f64], d: usize, what: &str) -> Result<usize> {
    if d == 0 || x.len() % d != 0 {
        return Err(LexError::Dimension(format!("{what}: {} values for width {d}", x.len())));
    }
    Ok(x.len() / d)
}

fn dequantized<R: Rng + ?Sized>(x: &[f64], on: bool, rng: &mut R) -> Vec<f64> {
    if on {
        x.iter().map(|v| v + rng.random::<f64>()).collect()
    } else {
        x.to_vec()
    }
}

/// Fits `spec` on `train` rows; dataset-resampling schemes draw from `val`.
pub fn fit_imputer(spec: &ImputerSpec, train: &[f64], val: &[f64], d: usize, seed: u64) -> Result<(Imputer, FitReport)> {
    let n_train = check_rows(train, d, "train")?;
    let n_val = if val.is_empty() { 0 } else { check_rows(val, d, "validation")? };
    let mut rng = rng::stream(seed, "imputer.fit");
    let mut report = FitReport {
        kind: spec.kind_name().to_string(),
        n_train,
        n_val,
        ..FitReport::default()
    };
    let need_val = || {
        if n_val == 0 {
            Err(LexError::Config(format!("{} imputer needs validation rows", spec.kind_name())))
        } else {
            Ok(())
        }
    };
    let gmm = |components: usize, dequantize: bool, rng: &mut rng::LexRng, report: &mut FitReport| -> Result<GmmParams> {
        let data = dequantized(train, dequantize, rng);
        let (p, r) = fit_gmm_em(&data, d, components, EM_MAX_ITER, EM_TOL, rng)?;
        report.loglik_trace = r.loglik_trace;
        report.converged = Some(r.converged);
        report.reseed_iterations = r.reseed_iterations;
        if n_val > 0 {
            report.heldout_loglik = Some(val.chunks(d).map(|row| p.loglik(row)).sum::<f64>() / n_val as f64);
        }
        Ok(p)
    };
    let imputer = match *spec {
        ImputerSpec::Constant { c } => Imputer::Constant { c },
        ImputerSpec::GaussianStd => Imputer::GaussianStd,
        ImputerSpec::Marginal => {
            need_val()?;
            Imputer::Marginal { d, rows: val.to_vec() }
        }
        ImputerSpec::Gmm { components, dequantize } => Imputer::Gmm {
            params: gmm(components, dequantize, &mut rng, &mut report)?,
        },
        ImputerSpec::GmmMeans { components, dequantize } => Imputer::GmmMeans {
            params: gmm(components, dequantize, &mut rng, &mut report)?,
        },
        ImputerSpec::GmmDataset { components, dequantize } => {
            need_val()?;
            let params = gmm(components, dequantize, &mut rng, &mut report)?;
            let table = build_resample_table(&params, val)?;
            report.resample_uniform_fallbacks = table.uniform_fallbacks.clone();
            Imputer::GmmDataset {
                params,
                table,
                rows: val.to_vec(),
            }
        }
        ImputerSpec::KmeansDataset { components } => {
            need_val()?;
            let fit = fit_kmeans(train, d, components, EM_MAX_ITER, &mut rng)?;
            report.loglik_trace = fit.wcss_trace.clone();
            let mut clusters = vec![Vec::new(); components];
            for (i, row) in val.chunks(d).enumerate() {
                clusters[fit.nearest(row)].push(i);
            }
            Imputer::KmeansDataset {
                d,
                centers: fit.centers,
                rows: val.to_vec(),
                clusters,
            }
        }
        ImputerSpec::Logistics { components, levels } | ImputerSpec::LogisticsMeans { components, levels } => {
            let held = (n_val > 0).then_some(val);
            let (params, r) = fit_logistics(train, d, components, levels, LOGISTICS_EPOCHS, held, &mut rng)?;
            report.loglik_trace = r.loglik_trace;
            report.heldout_loglik = r.heldout_loglik;
            if matches!(spec, ImputerSpec::Logistics { .. }) {
                Imputer::Logistics { params }
            } else {
                Imputer::LogisticsMeans { params }
            }
        }
    };
    Ok((imputer, report))
}

impl Imputer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Imputer::Constant { .. } => "constant",
            Imputer::GaussianStd => "gaussian_std",
            Imputer::Marginal { .. } => "marginal",
            Imputer::Gmm { .. } => "gmm",
            Imputer::GmmMeans { .. } => "gmm_means",
            Imputer::GmmDataset { .. } => "gmm_dataset",
            Imputer::KmeansDataset { .. } => "kmeans_dataset",
            Imputer::Logistics { .. } => "logistics",
            Imputer::LogisticsMeans { .. } => "logistics_means",
        }
    }

    /// The fill value when imputation is a single deterministic constant.
    pub fn constant(&self) -> Option<f64> {
        match *self {
            Imputer::Constant { c } => Some(c),
            _ => None,
        }
    }

    /// Feature width the imputer was fitted for, when it has one.
    pub fn width(&self) -> Option<usize> {
        match self {
            Imputer::Constant { .. } | Imputer::GaussianStd => None,
            Imputer::Marginal { d, .. } | Imputer::KmeansDataset { d, .. } => Some(*d),
            Imputer::Gmm { params } | Imputer::GmmMeans { params } | Imputer::GmmDataset { params, .. } => Some(params.d),
            Imputer::Logistics { params } | Imputer::LogisticsMeans { params } => Some(params.d),
        }
    }

    /// Writes a full draw from the scheme's conditional law given the
    /// observed coordinates into `out`. Observed coordinates are drawn too;
    /// [`Imputer::impute_into`] overwrites them with `x`.
    pub fn fill_into<R: Rng + ?Sized>(&self, x: &[f64], z: &[u8], rng: &mut R, out: &mut [f64]) -> Result<()> {
        let d = x.len();
        if z.len() != d || out.len() != d || self.width().is_some_and(|w| w != d) {
            return Err(LexError::Dimension(format!(
                "impute: x has {d} values, z {}, out {}, imputer width {:?}",
                z.len(),
                out.len(),
                self.width()
            )));
        }
        match self {
            Imputer::Constant { c } => {
                for j in 0..d {
                    out[j] = *c;
                }
            }
            Imputer::GaussianStd => {
                for j in 0..d {
                    out[j] = rng.sample(StandardNormal);
                }
            }
            Imputer::Marginal { rows, .. } => {
                let n = rows.len() / d;
                let r = rng.random_range(0..n);
                for j in 0..d {
                    out[j] = rows[r * d + j];
                }
            }
            Imputer::Gmm { params } => {
                let k = gmm::categorical(&params.component_posterior(x, z), rng);
                let (mu, var) = (params.mean(k), params.variance(k));
                for j in 0..d {
                    out[j] = mu[j] + var[j].sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Imputer::GmmMeans { params } => {
                let k = gmm::categorical(&params.component_posterior(x, z), rng);
                let mu = params.mean(k);
                for j in 0..d {
                    out[j] = mu[j];
                }
            }
            Imputer::GmmDataset { params, table, rows } => {
                let k = gmm::categorical(&params.component_posterior(x, z), rng);
                let r = table.sample(k, rng);
                for j in 0..d {
                    out[j] = rows[r * d + j];
                }
            }
            Imputer::KmeansDataset { centers, rows, clusters, .. } => {
                // nearest center on observed coordinates; ties broken uniformly
                let dist: Vec<f64> = centers
                    .chunks(d)
                    .map(|c| (0..d).filter(|&j| z[j] == 1).map(|j| (c[j] - x[j]).powi(2)).sum())
                    .collect();
                let best = dist.iter().copied().fold(f64::INFINITY, f64::min);
                let ties: Vec<usize> = (0..dist.len()).filter(|&k| dist[k] == best).collect();
                let k = *ties.choose(rng).unwrap_or(&0);
                let n = rows.len() / d;
                let r = match clusters[k].choose(rng) {
                    Some(&r) => r,
                    None => rng.random_range(0..n),
                };
                for j in 0..d {
                    out[j] = rows[r * d + j];
                }
            }
            Imputer::Logistics { params } => {
                let k = gmm::categorical(&params.component_posterior(x, z), rng);
                for j in 0..d {
                    let i = k * d + j;
                    out[j] = f64::from(sample_discretized_logistic(params.centers[i], params.scales[i], params.levels, rng));
                }
            }
            Imputer::LogisticsMeans { params } => {
                let k = gmm::categorical(&params.component_posterior(x, z), rng);
                let mu = params.center(k);
                for j in 0..d {
                    out[j] = mu[j];
                }
            }
        }
        Ok(())
    }

    /// Writes `x̃` into `out`: observed coordinates copied, the rest imputed.
    pub fn impute_into<R: Rng + ?Sized>(&self, x: &[f64], z: &[u8], rng: &mut R, out: &mut [f64]) -> Result<()> {
        if z.iter().all(|&b| b == 1) && z.len() == x.len() && out.len() == x.len() {
            out.copy_from_slice(x);
            return Ok(());
        }
        self.fill_into(x, z, rng, out)?;
        for ((o, &v), &b) in out.iter_mut().zip(x).zip(z) {
            if b == 1 {
                *o = v;
            }
        }
        Ok(())
    }

    pub fn impute<R: Rng + ?Sized>(&self, x: &[f64], z: &[u8], rng: &mut R) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.impute_into(x, z, rng, &mut out)?;
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ImputerFile {
            version: FORMAT_VERSION,
            imputer: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Imputer> {
        let file: ImputerFile = serde_json::from_str(text)?;
        if file.version != FORMAT_VERSION {
            return Err(LexError::Config(format!("imputer format version {} unsupported", file.version)));
        }
        Ok(file.imputer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| LexError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Imputer> {
        let text = fs::read_to_string(path).map_err(|e| LexError::io(path, e))?;
        Imputer::from_json(&text)
    }
}
