//! Datasets, parametric mean-function families and least-squares fitting.
//!
//! A [`ModelSpec`] wraps any [`MeanFunction`]: a map `m(x, β)` with its
//! gradient `ṁ(x, β)` in β. Families that are linear in β (ordinary linear
//! regression, or any fixed feature expansion) are fitted by a direct
//! SVD-based solve; everything else goes through damped Gauss–Newton with a
//! halving line search.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{dot, pseudo_inverse};

/// Relative gradient tolerance: stop when ‖∇SSR‖ ≤ GRAD_TOL·(1 + SSR).
pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 200;
const MAX_HALVINGS: usize = 60;

/// n observations of a d-dimensional predictor row and a scalar response.
///
/// Rows are stored row-major behind an `Arc`, so datasets that share
/// predictors (bootstrap resamples) are cheap to build.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    d: usize,
    x: Arc<[f64]>,
    y: Vec<f64>,
}

impl Dataset {
    /// Builds a dataset from row-major predictor values.
    pub fn from_row_major(n: usize, d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidInput("dataset needs at least one row".into()));
        }
        if d == 0 {
            return Err(Error::InvalidInput("dataset needs at least one predictor".into()));
        }
        if x.len() != n * d {
            return Err(Error::DimensionMismatch {
                what: "predictor values",
                expected: n * d,
                found: x.len(),
            });
        }
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                what: "response length",
                expected: n,
                found: y.len(),
            });
        }
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite predictor at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite response at row {pos}")));
        }
        Ok(Self {
            n,
            d,
            x: x.into(),
            y,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::InvalidInput(format!(
                "row {bad} has {} predictors, expected {d}",
                rows[bad].len()
            )));
        }
        Self::from_row_major(rows.len(), d, rows.concat(), y)
    }

    pub fn from_matrix(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let mut flat = Vec::with_capacity(x.len());
        for row in x.row_iter() {
            flat.extend(row.iter());
        }
        Self::from_row_major(x.nrows(), x.ncols(), flat, y.to_vec())
    }

    /// Same predictors, new response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "response length",
                expected: self.n,
                found: y.len(),
            });
        }
        if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite response at row {pos}")));
        }
        Ok(Self {
            n: self.n,
            d: self.d,
            x: Arc::clone(&self.x),
            y,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.x.chunks_exact(self.d)
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_row_major(&self) -> &[f64] {
        &self.x
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows().map(|r| r[k]).collect()
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.x)
    }

    /// Applies a row permutation: row i of the result is row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let mut x = Vec::with_capacity(self.x.len());
        let mut y = Vec::with_capacity(self.n);
        for &i in perm {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Self::from_row_major(perm.len(), self.d, x, y)
    }
}

/// A parametric mean-function family m(x, β) with gradient ṁ(x, β).
pub trait MeanFunction: Send + Sync {
    fn label(&self) -> &str;

    fn param_dim(&self) -> usize;

    /// Required predictor dimension, when the family fixes one.
    fn input_dim(&self) -> Option<usize> {
        None
    }

    fn mean(&self, x: &[f64], beta: &[f64]) -> f64;

    /// Writes ∂m/∂β into `out` (length `param_dim`).
    fn gradient(&self, x: &[f64], beta: &[f64], out: &mut [f64]);

    /// True when m(x, β) = β·f(x) for a fixed feature map f; the gradient is
    /// then f(x) for every β and fitting reduces to a linear solve.
    fn is_linear_in_params(&self) -> bool {
        false
    }
}

/// Shared handle to a mean-function family.
#[derive(Clone)]
pub struct ModelSpec(Arc<dyn MeanFunction>);

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("label", &self.label())
            .field("param_dim", &self.param_dim())
            .field("linear_in_params", &self.is_linear_in_params())
            .finish()
    }
}

impl ModelSpec {
    pub fn new<M: MeanFunction + 'static>(m: M) -> Self {
        Self(Arc::new(m))
    }

    /// m(x, β) = β⊤x, with a trailing intercept coefficient when requested.
    pub fn linear(d: usize, intercept: bool) -> Self {
        assert!(d >= 1, "linear model needs at least one predictor");
        Self::new(LinearMean { d, intercept })
    }

    /// m(x, θ) = θ·f(x) for a fixed feature map `f` of output length `q`.
    pub fn from_features<F>(label: impl Into<String>, q: usize, features: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(q >= 1, "feature model needs at least one feature");
        Self::new(FeatureMean {
            label: label.into(),
            q,
            features: Box::new(features),
        })
    }

    /// General nonlinear family from closures.
    pub fn nonlinear<M, G>(label: impl Into<String>, p: usize, mean: M, gradient: G) -> Self
    where
        M: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        assert!(p >= 1, "model needs at least one parameter");
        Self::new(ClosureMean {
            label: label.into(),
            p,
            mean: Box::new(mean),
            gradient: Box::new(gradient),
        })
    }

    pub fn label(&self) -> &str {
        self.0.label()
    }

    pub fn param_dim(&self) -> usize {
        self.0.param_dim()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.0.input_dim()
    }

    pub fn mean(&self, x: &[f64], beta: &[f64]) -> f64 {
        self.0.mean(x, beta)
    }

    pub fn gradient(&self, x: &[f64], beta: &[f64], out: &mut [f64]) {
        self.0.gradient(x, beta, out)
    }

    pub fn gradient_vec(&self, x: &[f64], beta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.param_dim()];
        self.gradient(x, beta, &mut g);
        g
    }

    pub fn is_linear_in_params(&self) -> bool {
        self.0.is_linear_in_params()
    }

    /// n×p matrix whose rows are ṁ(X_i, β).
    pub fn score_matrix(&self, data: &Dataset, beta: &[f64]) -> DMatrix<f64> {
        let p = self.param_dim();
        let mut m = DMatrix::zeros(data.n(), p);
        let mut g = vec![0.0; p];
        for (i, row) in data.rows().enumerate() {
            self.gradient(row, beta, &mut g);
            for (k, &v) in g.iter().enumerate() {
                m[(i, k)] = v;
            }
        }
        m
    }

    pub fn mean_values(&self, data: &Dataset, beta: &[f64]) -> Vec<f64> {
        data.rows().map(|r| self.mean(r, beta)).collect()
    }

    /// Largest relative discrepancy between the analytic gradient and a
    /// central finite difference of the mean, over all coordinates.
    pub fn gradient_check(&self, x: &[f64], beta: &[f64]) -> f64 {
        let analytic = self.gradient_vec(x, beta);
        let mut b = beta.to_vec();
        let mut worst: f64 = 0.0;
        for k in 0..beta.len() {
            let h = 1e-5 * beta[k].abs().max(1.0);
            b[k] = beta[k] + h;
            let up = self.mean(x, &b);
            b[k] = beta[k] - h;
            let down = self.mean(x, &b);
            b[k] = beta[k];
            let fd = (up - down) / (2.0 * h);
            let scale = analytic[k].abs().max(fd.abs()).max(1.0);
            worst = worst.max((analytic[k] - fd).abs() / scale);
        }
        worst
    }
}

pub fn make_linear_model(d: usize, intercept: bool) -> ModelSpec {
    ModelSpec::linear(d, intercept)
}

struct LinearMean {
    d: usize,
    intercept: bool,
}

impl MeanFunction for LinearMean {
    fn label(&self) -> &str {
        if self.intercept {
            "linear+intercept"
        } else {
            "linear"
        }
    }

    fn param_dim(&self) -> usize {
        self.d + usize::from(self.intercept)
    }

    fn input_dim(&self) -> Option<usize> {
        Some(self.d)
    }

    fn mean(&self, x: &[f64], beta: &[f64]) -> f64 {
        let lin = dot(&x[..self.d], &beta[..self.d]);
        if self.intercept {
            lin + beta[self.d]
        } else {
            lin
        }
    }

    fn gradient(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        out[..self.d].copy_from_slice(&x[..self.d]);
        if self.intercept {
            out[self.d] = 1.0;
        }
    }

    fn is_linear_in_params(&self) -> bool {
        true
    }
}

type FeatureFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

struct FeatureMean {
    label: String,
    q: usize,
    features: FeatureFn,
}

impl MeanFunction for FeatureMean {
    fn label(&self) -> &str {
        &self.label
    }

    fn param_dim(&self) -> usize {
        self.q
    }

    fn mean(&self, x: &[f64], beta: &[f64]) -> f64 {
        let mut f = vec![0.0; self.q];
        (self.features)(x, &mut f);
        dot(&f, beta)
    }

    fn gradient(&self, x: &[f64], _beta: &[f64], out: &mut [f64]) {
        (self.features)(x, out)
    }

    fn is_linear_in_params(&self) -> bool {
        true
    }
}

type MeanFn = Box<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

struct ClosureMean {
    label: String,
    p: usize,
    mean: MeanFn,
    gradient: GradFn,
}

impl MeanFunction for ClosureMean {
    fn label(&self) -> &str {
        &self.label
    }

    fn param_dim(&self) -> usize {
        self.p
    }

    fn mean(&self, x: &[f64], beta: &[f64]) -> f64 {
        (self.mean)(x, beta)
    }

    fn gradient(&self, x: &[f64], beta: &[f64], out: &mut [f64]) {
        (self.gradient)(x, beta, out)
    }
}

/// Least-squares fit of a [`ModelSpec`] to a [`Dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub beta_hat: Vec<f64>,
    pub fitted: Vec<f64>,
    /// ê_i = y_i − m(X_i, β̂)
    pub residuals: Vec<f64>,
    pub ssr: f64,
    /// ‖∇SSR(β̂)‖ = ‖2 J⊤ ê‖
    pub gradient_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// A least-squares problem with fixed predictors, reusable across responses.
///
/// For families linear in β the pseudo-inverse of the design is computed
/// once, so each refit is a matrix–vector product.
pub struct LeastSquares<'a> {
    data: &'a Dataset,
    spec: &'a ModelSpec,
    linear: Option<LinearSolve>,
    max_iterations: usize,
}

struct LinearSolve {
    design: DMatrix<f64>,
    pinv: DMatrix<f64>,
}

impl<'a> LeastSquares<'a> {
    pub fn new(data: &'a Dataset, spec: &'a ModelSpec) -> Result<Self> {
        let p = spec.param_dim();
        if let Some(d) = spec.input_dim() {
            if d != data.d() {
                return Err(Error::DimensionMismatch {
                    what: "model input dimension",
                    expected: d,
                    found: data.d(),
                });
            }
        }
        if data.n() < p {
            return Err(Error::InvalidInput(format!(
                "need n >= p for least squares (n = {}, p = {p})",
                data.n()
            )));
        }
        let linear = if spec.is_linear_in_params() {
            let design = spec.score_matrix(data, &vec![0.0; p]);
            let (pinv, rank) = pseudo_inverse(&design);
            if rank < p {
                return Err(Error::RankDeficient { rank, cols: p });
            }
            Some(LinearSolve { design, pinv })
        } else {
            None
        };
        Ok(Self {
            data,
            spec,
            linear,
            max_iterations: MAX_ITERATIONS,
        })
    }

    /// Overrides the Gauss–Newton iteration cap.
    pub fn with_max_iterations(mut self, cap: usize) -> Self {
        self.max_iterations = cap;
        self
    }

    /// Fits the stored predictors to `y`, starting nonlinear iterations at
    /// `init` (zero when absent).
    pub fn fit(&self, y: &[f64], init: Option<&[f64]>) -> Result<FittedModel> {
        let p = self.spec.param_dim();
        if y.len() != self.data.n() {
            return Err(Error::DimensionMismatch {
                what: "response length",
                expected: self.data.n(),
                found: y.len(),
            });
        }
        if let Some(b) = init {
            if b.len() != p {
                return Err(Error::DimensionMismatch {
                    what: "initial parameter length",
                    expected: p,
                    found: b.len(),
                });
            }
        }
        match &self.linear {
            Some(ls) => Ok(self.fit_linear(ls, y)),
            None => self.fit_gauss_newton(y, init),
        }
    }

    fn fit_linear(&self, ls: &LinearSolve, y: &[f64]) -> FittedModel {
        let yv = DVector::from_column_slice(y);
        let beta = &ls.pinv * &yv;
        let fitted_v = &ls.design * &beta;
        let fitted: Vec<f64> = fitted_v.iter().copied().collect();
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let ssr = residuals.iter().map(|r| r * r).sum::<f64>();
        let grad = ls.design.tr_mul(&DVector::from_column_slice(&residuals)) * 2.0;
        let gradient_norm = grad.norm();
        FittedModel {
            beta_hat: beta.iter().copied().collect(),
            fitted,
            residuals,
            ssr,
            gradient_norm,
            converged: gradient_norm <= GRAD_TOL * (1.0 + ssr),
            iterations: 1,
        }
    }

    fn evaluate(&self, y: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let fitted = self.spec.mean_values(self.data, beta);
        let residuals: Vec<f64> = y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let ssr = residuals.iter().map(|r| r * r).sum::<f64>();
        (fitted, residuals, ssr)
    }

    fn fit_gauss_newton(&self, y: &[f64], init: Option<&[f64]>) -> Result<FittedModel> {
        let p = self.spec.param_dim();
        let mut beta = init.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
        let (mut fitted, mut residuals, mut ssr) = self.evaluate(y, &beta);
        if !ssr.is_finite() {
            return Err(Error::InvalidInput(
                "mean function is not finite at the starting point".into(),
            ));
        }
        let mut iterations = 0;
        loop {
            let jac = self.spec.score_matrix(self.data, &beta);
            let r = DVector::from_column_slice(&residuals);
            let gradient_norm = (jac.tr_mul(&r) * 2.0).norm();
            let snapshot = |converged| FittedModel {
                beta_hat: beta.clone(),
                fitted: fitted.clone(),
                residuals: residuals.clone(),
                ssr,
                gradient_norm,
                converged,
                iterations,
            };
            if gradient_norm <= GRAD_TOL * (1.0 + ssr) {
                return Ok(snapshot(true));
            }
            if iterations >= self.max_iterations {
                return Err(Error::NoConvergence {
                    iterations,
                    gradient_norm,
                    best: Box::new(snapshot(false)),
                });
            }
            let stalled = snapshot(false);
            // Gauss–Newton direction: least-squares solution of J δ ≈ r.
            let (pinv, _) = pseudo_inverse(&jac);
            let step = &pinv * &r;
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let candidate: Vec<f64> =
                    beta.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
                let (f, res, s) = self.evaluate(y, &candidate);
                if s.is_finite() && s < ssr {
                    beta = candidate;
                    fitted = f;
                    residuals = res;
                    ssr = s;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            iterations += 1;
            if !accepted {
                // No descent possible along the Gauss–Newton direction.
                return Err(Error::NoConvergence {
                    iterations,
                    gradient_norm,
                    best: Box::new(stalled),
                });
            }
        }
    }
}

/// β̂ = argmin Σ {y_i − m(X_i, β)}².
pub fn fit_least_squares(
    data: &Dataset,
    spec: &ModelSpec,
    init: Option<&[f64]>,
) -> Result<FittedModel> {
    LeastSquares::new(data, spec)?.fit(data.y(), init)
}

fn standardize_in_place(v: &mut [f64], name: impl FnOnce() -> String) -> Result<()> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd.is_nan() || sd <= 1e-14 * m.abs() {
        return Err(Error::ZeroVariance { column: name() });
    }
    for x in v.iter_mut() {
        *x = (*x - m) / sd;
    }
    Ok(())
}

/// Centres every predictor column and the response to mean 0 and scales
/// them to unit sample standard deviation (divisor n − 1).
pub fn standardize(data: &Dataset) -> Result<Dataset> {
    if data.n() < 2 {
        return Err(Error::InvalidInput("standardization needs at least two rows".into()));
    }
    let (n, d) = (data.n(), data.d());
    let mut x = data.x_row_major().to_vec();
    for k in 0..d {
        let mut col: Vec<f64> = (0..n).map(|i| x[i * d + k]).collect();
        standardize_in_place(&mut col, || format!("x{}", k + 1))?;
        for (i, v) in col.into_iter().enumerate() {
            x[i * d + k] = v;
        }
    }
    let mut y = data.y().to_vec();
    standardize_in_place(&mut y, || "response".to_string())?;
    Dataset::from_row_major(n, d, x, y)
}
