//! Data-generating processes and the Monte Carlo size/power engine.
//!
//! Every replication of every grid cell draws its data from the substream
//! `(master_seed, cell, replication, 0)` and its bootstrap from a seed
//! derived from `(master_seed, cell, replication, 1)`. Rejections are counted
//! per cell, so the result does not depend on the worker count.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{smooth_residual_bootstrap, wild_bootstrap_icm, BootstrapConfig};
use crate::error::{Error, Result};
use crate::model::{fit_least_squares, make_linear_model, Dataset, ModelSpec};
use crate::rng::{derive_key, substream, StreamRng};
use crate::weights::{directional_weight, sdr_weight, DirectionalAlternative};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    H1,
    H2,
    H3,
    H4,
    #[serde(rename = "linear_null")]
    LinearNull,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::H1 => "H1",
            Family::H2 => "H2",
            Family::H3 => "H3",
            Family::H4 => "H4",
            Family::LinearNull => "linear_null",
        }
    }

    /// Departure shape of the family, also the default directional class.
    pub fn shape(&self) -> Shape {
        match self {
            Family::H1 | Family::LinearNull => Shape::Cosine,
            Family::H2 => Shape::Quadratic,
            Family::H3 => Shape::Cubic,
            Family::H4 => Shape::H4,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H1" => Ok(Family::H1),
            "H2" => Ok(Family::H2),
            "H3" => Ok(Family::H3),
            "H4" => Ok(Family::H4),
            "linear_null" => Ok(Family::LinearNull),
            _ => Err(Error::InvalidInput(format!("unknown family {s:?}"))),
        }
    }
}

/// Predictor covariance: Σ₁ = I or Σ₂ = (2^{−|i−j|}).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma {
    #[default]
    Identity,
    Geometric,
}

impl Sigma {
    pub fn as_str(&self) -> &'static str {
        match self {
            Sigma::Identity => "identity",
            Sigma::Geometric => "geometric",
        }
    }

    pub fn matrix(&self, p: usize) -> DMatrix<f64> {
        match self {
            Sigma::Identity => DMatrix::identity(p, p),
            Sigma::Geometric => DMatrix::from_fn(p, p, |i, j| 0.5f64.powi(i.abs_diff(j) as i32)),
        }
    }

    /// Lower-triangular square root, `None` for the identity.
    fn factor(&self, p: usize) -> Option<DMatrix<f64>> {
        match self {
            Sigma::Identity => None,
            Sigma::Geometric => Some(
                self.matrix(p)
                    .cholesky()
                    .expect("geometric covariance is positive definite")
                    .l(),
            ),
        }
    }
}

impl fmt::Display for Sigma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sigma {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Sigma::Identity),
            "geometric" => Ok(Sigma::Geometric),
            _ => Err(Error::InvalidInput(format!("unknown sigma {s:?}"))),
        }
    }
}

/// Scaling of β₁: unit norm (the default) or raw 0/1 entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Beta1Scale {
    #[default]
    Unit,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "WICM1")]
    Wicm1,
    #[serde(rename = "WICM2")]
    Wicm2,
    #[serde(rename = "ICM")]
    Icm,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Wicm1 => "WICM1",
            Method::Wicm2 => "WICM2",
            Method::Icm => "ICM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "WICM1" => Ok(Method::Wicm1),
            "WICM2" => Ok(Method::Wicm2),
            "ICM" => Ok(Method::Icm),
            _ => Err(Error::InvalidInput(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// cos(0.6π u)
    Cosine,
    /// u²
    Quadratic,
    /// u³ + cos(π u) + v·u
    Cubic,
    /// |x₂| + x₃³ − x₄² + x₅³ + x₆x₇ + cos(πx₈) + sin(0.5πx₉x₁₀)
    H4,
}

impl Shape {
    pub fn as_str(&self) -> &'static str {
        match self {
            Shape::Cosine => "cosine",
            Shape::Quadratic => "quadratic",
            Shape::Cubic => "cubic",
            Shape::H4 => "h4",
        }
    }

    /// Value at index values u = primary⊤x, v = secondary⊤x and raw x.
    pub fn eval(&self, u: f64, v: f64, x: &[f64]) -> f64 {
        use std::f64::consts::PI;
        match self {
            Shape::Cosine => (0.6 * PI * u).cos(),
            Shape::Quadratic => u * u,
            Shape::Cubic => u.powi(3) + (PI * u).cos() + v * u,
            Shape::H4 => {
                x[1].abs() + x[2].powi(3) - x[3] * x[3] + x[4].powi(3) + x[5] * x[6]
                    + (PI * x[7]).cos()
                    + (0.5 * PI * x[8] * x[9]).sin()
            }
        }
    }

    pub fn min_dim(&self) -> usize {
        match self {
            Shape::H4 => 10,
            _ => 1,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Shape::Cosine),
            "quadratic" => Ok(Shape::Quadratic),
            "cubic" => Ok(Shape::Cubic),
            "h4" => Ok(Shape::H4),
            _ => Err(Error::InvalidInput(format!("unknown shape {s:?} (expected cosine|quadratic|cubic|h4)"))),
        }
    }
}

/// Index vectors fed to a shape in WICM1: the LS-fitted direction
/// β̂/‖β̂‖ for every index, or the DGP's own β₀/β₁.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexChoice {
    #[default]
    Fitted,
    Oracle,
}

impl IndexChoice {
    pub fn as_str(&self) -> &'static str {
        match self {
            IndexChoice::Fitted => "fitted",
            IndexChoice::Oracle => "oracle",
        }
    }
}

/// A named departure shape with fixed index vectors. As a directional class
/// it is s(x, θ) = θ_L⊤x + θ_a·shape(x), linear in θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeAlternative {
    pub shape: Shape,
    pub primary: Vec<f64>,
    pub secondary: Vec<f64>,
}

impl ShapeAlternative {
    pub fn new(shape: Shape, primary: Vec<f64>, secondary: Vec<f64>) -> Result<Self> {
        if primary.len() != secondary.len() {
            return Err(Error::DimensionMismatch {
                what: "secondary index length",
                expected: primary.len(),
                found: secondary.len(),
            });
        }
        if primary.len() < shape.min_dim() {
            return Err(Error::InvalidInput(format!(
                "shape {shape} needs at least {} predictors, got {}",
                shape.min_dim(),
                primary.len()
            )));
        }
        Ok(Self {
            shape,
            primary,
            secondary,
        })
    }

    pub fn dim(&self) -> usize {
        self.primary.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let u = x.iter().zip(&self.primary).map(|(a, b)| a * b).sum();
        let v = x.iter().zip(&self.secondary).map(|(a, b)| a * b).sum();
        self.shape.eval(u, v, x)
    }

    /// Both indices set to the unit direction of `beta`.
    pub fn along(shape: Shape, beta: &[f64]) -> Result<Self> {
        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(Error::InvalidInput("index direction has zero or non-finite norm".into()));
        }
        let u: Vec<f64> = beta.iter().map(|b| b / norm).collect();
        Self::new(shape, u.clone(), u)
    }

    pub fn label(&self) -> String {
        format!("linear+{}", self.shape)
    }

    pub fn directional(&self) -> DirectionalAlternative {
        self.directional_with_intercept(false)
    }

    /// The class with an extra constant feature, for null models that
    /// carry an intercept.
    pub fn directional_with_intercept(&self, intercept: bool) -> DirectionalAlternative {
        let d = self.dim();
        let q = d + 1 + usize::from(intercept);
        let this = self.clone();
        let label = if intercept {
            format!("{}+intercept", self.label())
        } else {
            self.label()
        };
        DirectionalAlternative::new(ModelSpec::from_features(label, q, move |x, out| {
            out[..d].copy_from_slice(x);
            out[d] = this.value(x);
            if intercept {
                out[d + 1] = 1.0;
            }
        }))
    }
}

/// One data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgp {
    pub family: Family,
    pub a: f64,
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub sigma: Sigma,
    #[serde(default)]
    pub beta1_scale: Beta1Scale,
}

impl Dgp {
    pub fn new(family: Family, a: f64, n: usize, p: usize) -> Self {
        Self {
            family,
            a,
            n,
            p,
            sigma: Sigma::Identity,
            beta1_scale: Beta1Scale::Unit,
        }
    }

    pub fn with_sigma(mut self, sigma: Sigma) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_beta1_scale(mut self, scale: Beta1Scale) -> Self {
        self.beta1_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.p < 1 {
            return Err(Error::InvalidInput(format!("need n >= 1 and p >= 1 (n = {}, p = {})", self.n, self.p)));
        }
        if !self.a.is_finite() {
            return Err(Error::InvalidInput("departure magnitude a must be finite".into()));
        }
        match self.family {
            Family::H4 if self.p < 10 => Err(Error::InvalidInput(format!("H4 needs p >= 10, got {}", self.p))),
            Family::H2 | Family::H3 if self.p < 2 => {
                Err(Error::InvalidInput(format!("{} needs p >= 2, got {}", self.family, self.p)))
            }
            _ => Ok(()),
        }
    }

    /// β₀ = (1, …, 1)⊤/√p.
    pub fn beta0(&self) -> Vec<f64> {
        vec![1.0 / (self.p as f64).sqrt(); self.p]
    }

    /// β₁: the first ⌊p/2⌋ entries nonzero, unit norm unless raw scaling.
    pub fn beta1(&self) -> Vec<f64> {
        let k = self.p / 2;
        let value = match self.beta1_scale {
            Beta1Scale::Unit => 1.0 / (k as f64).sqrt(),
            Beta1Scale::Raw => 1.0,
        };
        (0..self.p).map(|j| if j < k { value } else { 0.0 }).collect()
    }

    /// Null-model coefficients: β₀, or e₁ for H4.
    pub fn null_coefficients(&self) -> Vec<f64> {
        match self.family {
            Family::H4 => (0..self.p).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect(),
            _ => self.beta0(),
        }
    }

    /// The family's departure shape with the true index vectors.
    pub fn true_alternative(&self) -> ShapeAlternative {
        self.alternative(self.family.shape())
    }

    /// A shape evaluated at this DGP's index vectors: β₀ for the cosine,
    /// β₁ (primary) and β₀ (secondary) otherwise.
    pub fn alternative(&self, shape: Shape) -> ShapeAlternative {
        let (primary, secondary) = match shape {
            Shape::Cosine => (self.beta0(), vec![0.0; self.p]),
            _ => (self.beta1(), self.beta0()),
        };
        ShapeAlternative {
            shape,
            primary,
            secondary,
        }
    }

    /// Departure term S(x) multiplying a; zero for the linear null.
    pub fn departure(&self, x: &[f64]) -> f64 {
        match self.family {
            Family::LinearNull => 0.0,
            _ => self.true_alternative().value(x),
        }
    }

    /// E(Y | X = x).
    pub fn signal(&self, x: &[f64]) -> f64 {
        let linear: f64 = x.iter().zip(self.null_coefficients()).map(|(a, b)| a * b).sum();
        if self.a == 0.0 {
            linear
        } else {
            linear + self.a * self.departure(x)
        }
    }
}

/// X drawn row-major from N(0, Σ), then ε.
fn draw_design(n: usize, p: usize, sigma: Sigma, rng: &mut StreamRng) -> (Vec<f64>, Vec<f64>) {
    let z: Vec<f64> = (0..n * p).map(|_| rng.sample(StandardNormal)).collect();
    let x = match sigma.factor(p) {
        None => z,
        Some(l) => {
            let mut x = vec![0.0; n * p];
            for i in 0..n {
                let zi = &z[i * p..(i + 1) * p];
                for r in 0..p {
                    x[i * p + r] = (0..=r).map(|c| l[(r, c)] * zi[c]).sum();
                }
            }
            x
        }
    };
    let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    (x, eps)
}

pub fn generate(dgp: &Dgp, rng: &mut StreamRng) -> Result<Dataset> {
    dgp.validate()?;
    let (n, p) = (dgp.n, dgp.p);
    let (x, eps) = draw_design(n, p, dgp.sigma, rng);
    let y: Vec<f64> = (0..n).map(|i| dgp.signal(&x[i * p..(i + 1) * p]) + eps[i]).collect();
    Dataset::from_row_major(n, p, x, y)
}

type Departure = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Local departure r_n·S(X) with r_n = n^{−α} and S empirically centered.
#[derive(Clone)]
pub struct LocalAlternativeSpec {
    s: Departure,
    pub rate_exponent: f64,
}

impl fmt::Debug for LocalAlternativeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalAlternativeSpec")
            .field("rate_exponent", &self.rate_exponent)
            .finish_non_exhaustive()
    }
}

impl LocalAlternativeSpec {
    pub fn new<F>(s: F, rate_exponent: f64) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        if !(0.0..=0.5).contains(&rate_exponent) {
            return Err(Error::InvalidInput(format!("rate exponent must lie in [0, 1/2], got {rate_exponent}")));
        }
        Ok(Self {
            s: Arc::new(s),
            rate_exponent,
        })
    }

    pub fn rate(&self, n: usize) -> f64 {
        (n as f64).powf(-self.rate_exponent)
    }

    /// S at the sample rows, minus its sample mean.
    pub fn centered_values(&self, x: &[f64], n: usize, p: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|i| (self.s)(&x[i * p..(i + 1) * p])).collect();
        let m = raw.iter().sum::<f64>() / n as f64;
        raw.into_iter().map(|v| v - m).collect()
    }
}

/// A local-alternative draw together with its null errors and the centered
/// departure values, for drift diagnostics.
#[derive(Debug, Clone)]
pub struct LocalDraw {
    pub data: Dataset,
    pub errors: Vec<f64>,
    pub departure: Vec<f64>,
}

/// y = β₀⊤X + n^{−α}·S(X) + ε on the linear-null design.
pub fn generate_local(base: &Dgp, alt: &LocalAlternativeSpec, rng: &mut StreamRng) -> Result<Dataset> {
    Ok(generate_local_draw(base, alt, rng)?.data)
}

pub fn generate_local_draw(base: &Dgp, alt: &LocalAlternativeSpec, rng: &mut StreamRng) -> Result<LocalDraw> {
    if base.family != Family::LinearNull {
        return Err(Error::InvalidInput(format!(
            "local alternatives are built on the linear null, got {}",
            base.family
        )));
    }
    base.validate()?;
    let (n, p) = (base.n, base.p);
    let (x, eps) = draw_design(n, p, base.sigma, rng);
    let departure = alt.centered_values(&x, n, p);
    let r_n = alt.rate(n);
    let beta0 = base.beta0();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let lin: f64 = x[i * p..(i + 1) * p].iter().zip(&beta0).map(|(a, b)| a * b).sum();
            lin + r_n * departure[i] + eps[i]
        })
        .collect();
    Ok(LocalDraw {
        data: Dataset::from_row_major(n, p, x, y)?,
        errors: eps,
        departure,
    })
}

/// One grid cell: a DGP, a test, and optionally a directional class other
/// than the family's own shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dgp: Dgp,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<Shape>,
    #[serde(default)]
    pub index: IndexChoice,
}

impl Cell {
    pub fn new(dgp: Dgp, method: Method) -> Self {
        Self {
            dgp,
            method,
            alternative: None,
            index: IndexChoice::Fitted,
        }
    }

    pub fn with_alternative(mut self, shape: Shape) -> Self {
        self.alternative = Some(shape);
        self
    }

    pub fn with_index(mut self, index: IndexChoice) -> Self {
        self.index = index;
        self
    }

    pub fn shape(&self) -> Shape {
        self.alternative.unwrap_or(self.dgp.family.shape())
    }

    /// Directional class for WICM1 given the null fit.
    pub fn shape_alternative(&self, beta_hat: &[f64]) -> Result<ShapeAlternative> {
        match self.index {
            IndexChoice::Oracle => Ok(self.dgp.alternative(self.shape())),
            IndexChoice::Fitted => ShapeAlternative::along(self.shape(), beta_hat),
        }
    }

    /// Directional class used by WICM1, as recorded in the output.
    pub fn alternative_label(&self) -> String {
        match self.method {
            Method::Wicm1 => match self.shape() {
                Shape::H4 => "linear+h4".into(),
                shape => format!("linear+{shape}({})", self.index.as_str()),
            },
            Method::Wicm2 => "cse-mere-basis".into(),
            Method::Icm => "none".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        if let (Method::Wicm1, Some(shape)) = (self.method, self.alternative) {
            if self.dgp.p < shape.min_dim() {
                return Err(Error::InvalidInput(format!("shape {shape} needs p >= {}", shape.min_dim())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyConfig {
    pub grid: Vec<Cell>,
    pub reps: usize,
    /// B, v_n and α; the seed field is unused, per-replication seeds are
    /// derived from `master_seed`.
    pub bootstrap: BootstrapConfig,
    pub master_seed: u64,
}

impl SimStudyConfig {
    pub const DEFAULT_REPS: usize = 200;
    pub const DEFAULT_BOOTSTRAP: usize = 199;

    pub fn validate(&self) -> Result<()> {
        self.validate_top()?;
        self.grid.iter().try_for_each(Cell::validate)
    }

    pub fn alpha(&self) -> f64 {
        self.bootstrap.alpha
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub family: Family,
    pub a: f64,
    pub n: usize,
    pub p: usize,
    pub sigma: Sigma,
    pub method: Method,
    pub reps: usize,
    #[serde(rename = "B")]
    pub bootstrap: usize,
    pub alpha: f64,
    /// `None` when the cell failed; see `error`.
    pub rejections: Option<usize>,
    pub seed: u64,
    pub alternative: String,
    pub error: Option<String>,
    /// Wall-clock seconds; not part of the flat output.
    #[serde(skip)]
    pub runtime: f64,
}

impl SimRow {
    pub fn rejection_rate(&self) -> Option<f64> {
        self.rejections.map(|k| k as f64 / self.reps as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub rows: Vec<SimRow>,
    pub seed: u64,
}

/// Whether one replication of a cell rejects at level α.
pub fn run_replication(cell: &Cell, cfg: &SimStudyConfig, cell_index: usize, rep: usize) -> Result<bool> {
    let path = [cell_index as u64, rep as u64];
    let mut rng = substream(cfg.master_seed, &[path[0], path[1], 0]);
    let data = generate(&cell.dgp, &mut rng)?;
    let spec = make_linear_model(cell.dgp.p, false);
    let fit = fit_least_squares(&data, &spec, None)?;
    let boot_cfg = BootstrapConfig {
        seed: derive_key(cfg.master_seed, &[path[0], path[1], 1]),
        ..cfg.bootstrap.clone()
    };
    let outcome = match cell.method {
        Method::Wicm1 => {
            let alt = cell.shape_alternative(&fit.beta_hat)?.directional();
            let w = directional_weight(&data, &fit, &spec, &alt)?;
            smooth_residual_bootstrap(&data, &spec, &fit, &w, &boot_cfg)?
        }
        Method::Wicm2 => {
            let (w, _) = sdr_weight(&data, &fit, &spec)?;
            smooth_residual_bootstrap(&data, &spec, &fit, &w, &boot_cfg)?
        }
        Method::Icm => wild_bootstrap_icm(&data, &spec, &fit, &boot_cfg)?,
    };
    Ok(outcome.reject())
}

fn run_cell(cell: &Cell, cfg: &SimStudyConfig, index: usize) -> SimRow {
    let start = Instant::now();
    let outcome: Result<usize> = cell.validate().and_then(|_| {
        let hits = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                run_replication(cell, cfg, index, r).map_err(|e| Error::Replication {
                    replication: r,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(hits.into_iter().filter(|&h| h).count())
    });
    let (rejections, error) = match outcome {
        Ok(k) => (Some(k), None),
        Err(e) => (None, Some(e.to_string())),
    };
    SimRow {
        family: cell.dgp.family,
        a: cell.dgp.a,
        n: cell.dgp.n,
        p: cell.dgp.p,
        sigma: cell.dgp.sigma,
        method: cell.method,
        reps: cfg.reps,
        bootstrap: cfg.bootstrap.replications,
        alpha: cfg.alpha(),
        rejections,
        seed: cfg.master_seed,
        alternative: cell.alternative_label(),
        error,
        runtime: start.elapsed().as_secs_f64(),
    }
}

/// Runs every cell on the current rayon pool. A failing cell is reported in
/// its row and does not affect the others.
pub fn run_study(cfg: &SimStudyConfig) -> Result<SimResult> {
    cfg.validate_top()?;
    let rows = cfg.grid.iter().enumerate().map(|(i, cell)| run_cell(cell, cfg, i)).collect();
    Ok(SimResult {
        rows,
        seed: cfg.master_seed,
    })
}

/// Runs on a dedicated pool of `workers` threads.
pub fn run_study_with_workers(cfg: &SimStudyConfig, workers: usize) -> Result<SimResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))?;
    pool.install(|| run_study(cfg))
}

impl SimStudyConfig {
    /// Checks that do not depend on individual cells.
    fn validate_top(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(Error::InvalidInput("reps must be >= 1".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::InvalidInput("grid is empty".into()));
        }
        self.bootstrap.validate()
    }
}

/// Study file format: grid entries are expanded over every listed `a` and
/// every `(n, p)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub bootstrap: BootstrapSpec,
    pub grid: Vec<GridEntry>,
}

fn default_reps() -> usize {
    SimStudyConfig::DEFAULT_REPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    #[serde(rename = "B", default = "default_b")]
    pub replications: usize,
    #[serde(default = "default_v_n")]
    pub v_n: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_b() -> usize {
    SimStudyConfig::DEFAULT_BOOTSTRAP
}
fn default_v_n() -> f64 {
    BootstrapConfig::DEFAULT_V_N
}
fn default_alpha() -> f64 {
    BootstrapConfig::DEFAULT_ALPHA
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        Self {
            replications: default_b(),
            v_n: default_v_n(),
            alpha: default_alpha(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    pub fn values(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridEntry {
    pub family: Family,
    pub method: Method,
    #[serde(default)]
    pub sigma: Sigma,
    pub a: OneOrMany,
    pub dims: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<Shape>,
    #[serde(default)]
    pub index: IndexChoice,
    #[serde(default)]
    pub beta1_scale: Beta1Scale,
}

impl StudySpec {
    /// Expands the grid. `master_seed` must be set, here or by the caller.
    pub fn expand(&self) -> Result<SimStudyConfig> {
        let master_seed = self
            .master_seed
            .ok_or_else(|| Error::InvalidInput("master_seed is required".into()))?;
        let mut grid = Vec::new();
        for (k, entry) in self.grid.iter().enumerate() {
            let a_values = entry.a.values();
            if a_values.is_empty() || entry.dims.is_empty() {
                return Err(Error::InvalidInput(format!("grid[{k}]: `a` and `dims` must be non-empty")));
            }
            for &a in &a_values {
                for &[n, p] in &entry.dims {
                    let dgp = Dgp::new(entry.family, a, n, p)
                        .with_sigma(entry.sigma)
                        .with_beta1_scale(entry.beta1_scale);
                    let cell = Cell {
                        dgp,
                        method: entry.method,
                        alternative: entry.alternative,
                        index: entry.index,
                    };
                    cell.validate().map_err(|e| Error::InvalidInput(format!("grid[{k}]: {e}")))?;
                    grid.push(cell);
                }
            }
        }
        let cfg = SimStudyConfig {
            grid,
            reps: self.reps,
            bootstrap: BootstrapConfig::new(0)
                .with_replications(self.bootstrap.replications)
                .with_v_n(self.bootstrap.v_n)
                .with_alpha(self.bootstrap.alpha),
            master_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Paper,
    Flat,
}

pub const FLAT_COLUMNS: [&str; 13] = [
    "family",
    "a",
    "n",
    "p",
    "sigma",
    "method",
    "reps",
    "B",
    "alpha",
    "rejection_rate",
    "seed",
    "alternative",
    "error",
];

pub fn emit_table(result: &SimResult, layout: Layout) -> String {
    match layout {
        Layout::Flat => emit_flat(result),
        Layout::Paper => emit_paper(result),
    }
}

fn emit_flat(result: &SimResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(FLAT_COLUMNS).expect("in-memory write");
    for r in &result.rows {
        let rate = r.rejection_rate().map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            r.family.to_string(),
            r.a.to_string(),
            r.n.to_string(),
            r.p.to_string(),
            r.sigma.to_string(),
            r.method.to_string(),
            r.reps.to_string(),
            r.bootstrap.to_string(),
            r.alpha.to_string(),
            rate,
            r.seed.to_string(),
            r.alternative.clone(),
            r.error.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn field<T: FromStr>(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::InvalidInput(format!("line {line}: cannot parse {} from {raw:?}", FLAT_COLUMNS[idx])))
}

/// Inverse of the flat layout. Runtimes are not stored and come back as zero.
pub fn parse_flat(text: &str) -> Result<SimResult> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::InvalidInput(format!("flat table header: {e}")))?
        .clone();
    if headers.iter().ne(FLAT_COLUMNS.iter().copied()) {
        return Err(Error::InvalidInput(format!("unexpected flat table header {headers:?}")));
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::InvalidInput(format!("line {line}: {e}")))?;
        let reps: usize = field(&rec, 6, line)?;
        let rate = rec.get(9).unwrap_or("");
        let rejections = if rate.is_empty() {
            None
        } else {
            let v: f64 = field(&rec, 9, line)?;
            Some((v * reps as f64).round() as usize)
        };
        let error = rec.get(12).filter(|s| !s.is_empty()).map(str::to_owned);
        rows.push(SimRow {
            family: field(&rec, 0, line)?,
            a: field(&rec, 1, line)?,
            n: field(&rec, 2, line)?,
            p: field(&rec, 3, line)?,
            sigma: field(&rec, 4, line)?,
            method: field(&rec, 5, line)?,
            reps,
            bootstrap: field(&rec, 7, line)?,
            alpha: field(&rec, 8, line)?,
            rejections,
            seed: field(&rec, 10, line)?,
            alternative: rec.get(11).unwrap_or("").to_owned(),
            error,
            runtime: 0.0,
        });
    }
    let seed = rows.first().map_or(0, |r| r.seed);
    Ok(SimResult { rows, seed })
}

/// One block per (family, σ): methods × a-values down, (n, p) across.
fn emit_paper(result: &SimResult) -> String {
    let mut blocks: Vec<((Family, Sigma), Vec<&SimRow>)> = Vec::new();
    for r in &result.rows {
        let key = (r.family, r.sigma);
        match blocks.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r),
            None => blocks.push((key, vec![r])),
        }
    }
    let mut out = String::new();
    for (idx, ((family, sigma), rows)) in blocks.iter().enumerate() {
        if idx > 0 {
            out.push('\n');
        }
        let mut dims: Vec<(usize, usize)> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in rows {
            if !dims.contains(&(r.n, r.p)) {
                dims.push((r.n, r.p));
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let first = rows[0];
        let _ = writeln!(
            out,
            "Empirical sizes and powers for model {family} (Sigma {sigma}, alpha = {}, reps = {}, B = {})",
            first.alpha, first.reps, first.bootstrap
        );
        let mut line1 = format!("{:<8}{:>6}", "", "a");
        let mut line2 = format!("{:<8}{:>6}", "", "");
        for (n, p) in &dims {
            let _ = write!(line1, "{:>9}", format!("n={n}"));
            let _ = write!(line2, "{:>9}", format!("p={p}"));
        }
        let rule = "-".repeat(line1.len());
        let _ = writeln!(out, "{rule}\n{line1}\n{line2}\n{rule}");
        for m in &methods {
            let mut a_values: Vec<f64> = Vec::new();
            let mut cells: BTreeMap<(u64, usize, usize), &SimRow> = BTreeMap::new();
            for r in rows.iter().filter(|r| r.method == *m) {
                if !a_values.contains(&r.a) {
                    a_values.push(r.a);
                }
                cells.insert((r.a.to_bits(), r.n, r.p), r);
            }
            for (k, a) in a_values.iter().enumerate() {
                let label = if k == 0 { m.as_str() } else { "" };
                let _ = write!(out, "{label:<8}{a:>6.1}");
                for (n, p) in &dims {
                    let text = match cells.get(&(a.to_bits(), *n, *p)) {
                        Some(r) => match r.rejection_rate() {
                            Some(v) => format!("{v:.3}"),
                            None => "fail".into(),
                        },
                        None => "-".into(),
                    };
                    let _ = write!(out, "{text:>9}");
                }
                out.push('\n');
            }
            let _ = writeln!(out, "{rule}");
        }
    }
    out
}
