//! Bootstrap critical values and p-values.
//!
//! Replication j draws from its own substream keyed by `(seed, j)`, so the
//! replicate values do not depend on how many replications run, in what
//! order, or on how many threads.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::mean;
use crate::model::{Dataset, FittedModel, LeastSquares, ModelSpec};
use crate::rng::{substream, StreamRng};
use crate::statistic::{wicm_unchecked, IcmKernel, KernelWeight, WeightVector};

/// Distribution of the smoothing noise z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of bootstrap replications B.
    #[serde(rename = "B")]
    pub replications: usize,
    /// Smoothing bandwidth v_n.
    pub v_n: f64,
    #[serde(default)]
    pub noise: Noise,
    pub seed: u64,
    pub alpha: f64,
}

impl BootstrapConfig {
    pub const DEFAULT_REPLICATIONS: usize = 500;
    pub const DEFAULT_V_N: f64 = 0.2;
    pub const DEFAULT_ALPHA: f64 = 0.05;

    pub fn new(seed: u64) -> Self {
        Self {
            replications: Self::DEFAULT_REPLICATIONS,
            v_n: Self::DEFAULT_V_N,
            noise: Noise::Gaussian,
            seed,
            alpha: Self::DEFAULT_ALPHA,
        }
    }

    pub fn with_replications(mut self, b: usize) -> Self {
        self.replications = b;
        self
    }

    pub fn with_v_n(mut self, v_n: f64) -> Self {
        self.v_n = v_n;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::InvalidInput("bootstrap needs B >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.v_n >= 0.0 && self.v_n.is_finite()) {
            return Err(Error::InvalidInput(format!("v_n must be finite and >= 0, got {}", self.v_n)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TestMethod {
    Wicm,
    Icm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    /// Replicates in replication order.
    pub boot_stats: Vec<f64>,
    pub p_value: f64,
    pub critical_value: f64,
    pub config: BootstrapConfig,
    pub method: TestMethod,
}

impl TestOutcome {
    fn assemble(statistic: f64, boot_stats: Vec<f64>, config: &BootstrapConfig, method: TestMethod) -> Self {
        Self {
            statistic,
            p_value: p_value(statistic, &boot_stats),
            critical_value: critical_value(&boot_stats, config.alpha),
            boot_stats,
            config: config.clone(),
            method,
        }
    }

    /// statistic ≥ critical value.
    pub fn reject(&self) -> bool {
        self.statistic >= self.critical_value
    }
}

/// (1 + #{b : boot_b ≥ statistic}) / (B + 1).
pub fn p_value(statistic: f64, boot_stats: &[f64]) -> f64 {
    let exceed = boot_stats.iter().filter(|&&b| b >= statistic).count();
    (1 + exceed) as f64 / (boot_stats.len() + 1) as f64
}

/// The ⌈(1−α)B⌉-th order statistic of the replicates.
pub fn critical_value(boot_stats: &[f64], alpha: f64) -> f64 {
    let b = boot_stats.len();
    assert!(b >= 1, "critical value needs at least one replicate");
    let mut sorted = boot_stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Guard against (1−α)B landing a rounding error above an integer.
    let k = (((1.0 - alpha) * b as f64) - 1e-9).ceil().clamp(1.0, b as f64) as usize;
    sorted[k - 1]
}

/// Smooth residual bootstrap for a fixed dataset, fit and weight vector.
pub struct SmoothBootstrap<'a> {
    solver: LeastSquares<'a>,
    fit: &'a FittedModel,
    centered_residuals: Vec<f64>,
    cfg: BootstrapConfig,
}

impl<'a> SmoothBootstrap<'a> {
    pub fn new(data: &'a Dataset, spec: &'a ModelSpec, fit: &'a FittedModel, cfg: &BootstrapConfig) -> Result<Self> {
        cfg.validate()?;
        if fit.residuals.len() != data.n() {
            return Err(Error::DimensionMismatch {
                what: "fit residuals vs rows",
                expected: data.n(),
                found: fit.residuals.len(),
            });
        }
        let solver = LeastSquares::new(data, spec)?;
        let e_bar = mean(&fit.residuals);
        let centered_residuals = fit.residuals.iter().map(|e| e - e_bar).collect();
        Ok(Self {
            solver,
            fit,
            centered_residuals,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &BootstrapConfig {
        &self.cfg
    }

    /// ε*_{i,j} = ε̃*_{i,j} + v_n z_{i,j}, with ε̃* resampled from the centered
    /// residuals.
    pub fn draw_errors(&self, replication: usize) -> Vec<f64> {
        let mut rng: StreamRng = substream(self.cfg.seed, &[replication as u64]);
        let n = self.centered_residuals.len();
        let v_n = self.cfg.v_n;
        (0..n)
            .map(|_| {
                let idx = rng.random_range(0..n);
                let z: f64 = rng.sample(StandardNormal);
                self.centered_residuals[idx] + v_n * z
            })
            .collect()
    }

    /// Refit to Y* = m(X, β̂) + ε*, warm-started at β̂.
    pub fn refit(&self, replication: usize) -> Result<FittedModel> {
        let y_star: Vec<f64> = self
            .fit
            .fitted
            .iter()
            .zip(self.draw_errors(replication))
            .map(|(m, e)| m + e)
            .collect();
        self.solver
            .fit(&y_star, Some(&self.fit.beta_hat))
            .map_err(|e| Error::Replication {
                replication,
                source: Box::new(e),
            })
    }

    /// WICM* for every replication, in replication order.
    pub fn replicate_statistics(&self, w: &WeightVector, kernel: &KernelWeight) -> Result<Vec<f64>> {
        (0..self.cfg.replications)
            .into_par_iter()
            .map(|j| {
                let refit = self.refit(j)?;
                Ok(wicm_unchecked(w.centered(), &refit.residuals, kernel))
            })
            .collect()
    }
}

/// WICM test with smooth-residual-bootstrap calibration and the Gaussian φ.
pub fn smooth_residual_bootstrap(
    data: &Dataset,
    spec: &ModelSpec,
    fit: &FittedModel,
    w: &WeightVector,
    cfg: &BootstrapConfig,
) -> Result<TestOutcome> {
    smooth_residual_bootstrap_with_kernel(data, spec, fit, w, &KernelWeight::gaussian(), cfg)
}

pub fn smooth_residual_bootstrap_with_kernel(
    data: &Dataset,
    spec: &ModelSpec,
    fit: &FittedModel,
    w: &WeightVector,
    kernel: &KernelWeight,
    cfg: &BootstrapConfig,
) -> Result<TestOutcome> {
    if w.len() != data.n() {
        return Err(Error::DimensionMismatch {
            what: "weights vs rows",
            expected: data.n(),
            found: w.len(),
        });
    }
    let boot = SmoothBootstrap::new(data, spec, fit, cfg)?;
    let statistic = wicm_unchecked(w.centered(), &fit.residuals, kernel);
    let boot_stats = boot.replicate_statistics(w, kernel)?;
    Ok(TestOutcome::assemble(statistic, boot_stats, cfg, TestMethod::Wicm))
}

/// Mammen two-point multiplier: mean 0, variance 1, third moment 1.
pub fn mammen<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let s5 = 5f64.sqrt();
    let p_low = (s5 + 1.0) / (2.0 * s5);
    if rng.random::<f64>() < p_low {
        -(s5 - 1.0) / 2.0
    } else {
        (s5 + 1.0) / 2.0
    }
}

/// ICM test with wild-bootstrap calibration. `cfg.v_n` is ignored.
pub fn wild_bootstrap_icm(
    data: &Dataset,
    spec: &ModelSpec,
    fit: &FittedModel,
    cfg: &BootstrapConfig,
) -> Result<TestOutcome> {
    cfg.validate()?;
    let solver = LeastSquares::new(data, spec)?;
    let kernel = IcmKernel::new(data);
    let statistic = kernel.statistic(&fit.residuals)?;
    let boot_stats = (0..cfg.replications)
        .into_par_iter()
        .map(|j| {
            let mut rng: StreamRng = substream(cfg.seed, &[j as u64]);
            let y_star: Vec<f64> = fit
                .fitted
                .iter()
                .zip(&fit.residuals)
                .map(|(m, e)| m + e * mammen(&mut rng))
                .collect();
            let refit = solver
                .fit(&y_star, Some(&fit.beta_hat))
                .map_err(|e| Error::Replication {
                    replication: j,
                    source: Box::new(e),
                })?;
            kernel.statistic(&refit.residuals)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TestOutcome::assemble(statistic, boot_stats, cfg, TestMethod::Icm))
}
