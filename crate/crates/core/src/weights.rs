//! Weight functions g(·) for the weighted residual process.
//!
//! Both constructions share one step: given values v_i of a candidate
//! departure, subtract it from its empirical projection onto the span of the
//! null score ṁ(·, β̂),
//!
//! ```text
//! g(X_i) = ṁ(X_i, β̂)⊤ Ĝ⁻¹ (1/n) Σ_j ṁ(X_j, β̂) v_j − v_i,   Ĝ = (1/n) Σ ṁṁ⊤.
//! ```
//!
//! Directional weights take v from a fitted parametric alternative; the
//! nonparametric weight takes v from a truncated expansion in a basis built
//! on estimated sufficient-dimension-reduction directions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen_desc, symmetric_inverse};
use crate::model::{fit_least_squares, Dataset, FittedModel, ModelSpec};
use crate::statistic::{WeightSource, WeightVector};

/// A parametric alternative class s(x, θ), with gradient in θ.
#[derive(Debug, Clone)]
pub struct DirectionalAlternative {
    spec: ModelSpec,
}

impl DirectionalAlternative {
    pub fn new(spec: ModelSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn label(&self) -> &str {
        self.spec.label()
    }

    pub fn param_dim(&self) -> usize {
        self.spec.param_dim()
    }
}

impl From<ModelSpec> for DirectionalAlternative {
    fn from(spec: ModelSpec) -> Self {
        Self::new(spec)
    }
}

/// Returns ṁ⊤Ĝ⁻¹(1/n)Σṁ v − v at the sample points.
pub fn project_out_scores(
    data: &Dataset,
    fit: &FittedModel,
    spec: &ModelSpec,
    values: &[f64],
) -> Result<Vec<f64>> {
    let n = data.n();
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            what: "departure values vs rows",
            expected: n,
            found: values.len(),
        });
    }
    let scores = spec.score_matrix(data, &fit.beta_hat);
    let gram = scores.tr_mul(&scores) / n as f64;
    let gram_inv = symmetric_inverse(&gram).ok_or(Error::SingularGram)?;
    let v = DVector::from_column_slice(values);
    let cross = scores.tr_mul(&v) / n as f64;
    let projected = &scores * (gram_inv * cross);
    Ok(projected.iter().zip(values).map(|(p, v)| p - v).collect())
}

/// Weight from a parametric alternative class. θ̂ is the least-squares fit
/// of the observed response on s(·, θ).
pub fn directional_weight(
    data: &Dataset,
    fit: &FittedModel,
    spec: &ModelSpec,
    alt: &DirectionalAlternative,
) -> Result<WeightVector> {
    let theta = fit_least_squares(data, alt.spec(), None)?;
    let s_values = theta.fitted;
    let raw = project_out_scores(data, fit, spec, &s_values)?;
    WeightVector::new(raw, WeightSource::Directional)
}

/// Estimated central-subspace directions.
#[derive(Debug, Clone)]
pub struct SdrEstimate {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    s_hat: usize,
}

impl SdrEstimate {
    /// Eigenvalues of the candidate matrix, descending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Leading ŝ eigenvectors as a d×ŝ matrix with orthonormal columns.
    pub fn directions(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.s_hat).into_owned()
    }

    /// All d eigenvectors, matching the eigenvalue order.
    pub fn all_directions(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn s_hat(&self) -> usize {
        self.s_hat
    }

    /// Same decomposition with a different structural dimension.
    pub fn with_s_hat(mut self, s_hat: usize) -> Result<Self> {
        if s_hat > self.eigenvalues.len() {
            return Err(Error::InvalidInput(format!(
                "structural dimension {s_hat} exceeds predictor dimension {}",
                self.eigenvalues.len()
            )));
        }
        self.s_hat = s_hat;
        Ok(self)
    }
}

/// Candidate matrix Λ̂ = (1/n) Σ_j m̂(Y_j) m̂(Y_j)⊤ with
/// m̂(y) = (1/n) Σ_i (X_i − X̄) 1{Y_i ≤ y}.
pub fn cse_matrix(data: &Dataset) -> Result<DMatrix<f64>> {
    let (n, d) = (data.n(), data.d());
    if n < 2 {
        return Err(Error::InvalidInput("cumulative slicing needs at least two rows".into()));
    }
    let y = data.y();
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::DegenerateResponse);
    }
    let x = data.x_matrix();
    let x_bar = x.row_mean();
    let constant = (0..d).all(|k| x.column(k).iter().all(|&v| v == x[(0, k)]));
    if constant {
        return Err(Error::InvalidInput("all predictor columns are constant".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let nf = n as f64;
    let mut cum = DVector::<f64>::zeros(d);
    let mut lambda = DMatrix::<f64>::zeros(d, d);
    let mut start = 0;
    while start < n {
        // Ties share m̂(y), which includes every tied observation.
        let mut end = start + 1;
        while end < n && y[order[end]] == y[order[start]] {
            end += 1;
        }
        for &i in &order[start..end] {
            for k in 0..d {
                cum[k] += x[(i, k)] - x_bar[k];
            }
        }
        let m = &cum / nf;
        lambda.ger((end - start) as f64 / nf, &m, &m, 1.0);
        start = end;
    }
    Ok(lambda)
}

/// Cumulative slicing estimate of the central subspace, with ŝ chosen by
/// [`mere_dimension`].
pub fn cse_directions(data: &Dataset) -> Result<SdrEstimate> {
    cse_directions_with_ridge(data, mere_ridge(data.n()))
}

pub fn cse_directions_with_ridge(data: &Dataset, ridge: f64) -> Result<SdrEstimate> {
    let lambda = cse_matrix(data)?;
    let (eigenvalues, eigenvectors) = symmetric_eigen_desc(&lambda);
    let s_hat = mere_dimension_with_ridge(eigenvalues.as_slice(), ridge);
    Ok(SdrEstimate {
        eigenvalues,
        eigenvectors,
        s_hat,
    })
}

/// Default ridge c_n = log(n)/√n.
pub fn mere_ridge(n: usize) -> f64 {
    let nf = n as f64;
    nf.ln() / nf.sqrt()
}

/// ŝ = argmin_{1≤k≤d−1} (λ_{k+1} + c_n)/(λ_k + c_n) with the default ridge.
pub fn mere_dimension(eigenvalues: &[f64], n: usize) -> usize {
    mere_dimension_with_ridge(eigenvalues, mere_ridge(n))
}

/// Ties resolve to the smallest k. A single eigenvalue gives ŝ = 1.
pub fn mere_dimension_with_ridge(eigenvalues: &[f64], ridge: f64) -> usize {
    let mut best = (1, f64::INFINITY);
    for k in 1..eigenvalues.len() {
        let ratio = (eigenvalues[k] + ridge) / (eigenvalues[k - 1] + ridge);
        if ratio < best.1 {
            best = (k, ratio);
        }
    }
    best.0.min(eigenvalues.len())
}

/// Orthonormal basis evaluations at the sample points.
#[derive(Debug, Clone)]
pub struct BasisSet {
    columns: DMatrix<f64>,
    provenance: String,
    kept: Vec<usize>,
}

impl BasisSet {
    /// n×l, unit empirical norm, mutually orthogonal and orthogonal to the span.
    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Indices of the candidates that survived orthogonalization.
    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }
}

/// Relative norm below which a projected candidate counts as degenerate.
pub const DROP_TOLERANCE: f64 = 1e-8;

fn emp_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

/// Removes the components along each (unit-norm) vector of `basis`, twice.
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = emp_dot(v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
        }
    }
}

/// Modified Gram–Schmidt in the empirical inner product ⟨u, v⟩ = (1/n)Σ u_i v_i.
/// Candidates are orthogonalized against the span columns and against each
/// other; those whose norm collapses are dropped.
pub fn gram_schmidt_basis(
    data: &Dataset,
    span_columns: &DMatrix<f64>,
    candidates: &DMatrix<f64>,
) -> Result<BasisSet> {
    let n = data.n();
    for (what, m) in [("span rows", span_columns), ("candidate rows", candidates)] {
        if m.nrows() != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                found: m.nrows(),
            });
        }
    }
    let mut span: Vec<Vec<f64>> = Vec::with_capacity(span_columns.ncols());
    for col in span_columns.column_iter() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        let pre = emp_dot(&v, &v).sqrt();
        orthogonalize(&mut v, &span);
        let post = emp_dot(&v, &v).sqrt();
        if pre > 0.0 && post > DROP_TOLERANCE * pre {
            v.iter_mut().for_each(|a| *a /= post);
            span.push(v);
        }
    }
    let span_len = span.len();
    let mut kept = Vec::new();
    for (idx, col) in candidates.column_iter().enumerate() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        let pre = emp_dot(&v, &v).sqrt();
        if !pre.is_finite() || pre == 0.0 {
            continue;
        }
        orthogonalize(&mut v, &span);
        let post = emp_dot(&v, &v).sqrt();
        if post < DROP_TOLERANCE * pre {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= post);
        span.push(v);
        kept.push(idx);
    }
    let basis = &span[span_len..];
    let columns = DMatrix::from_fn(n, basis.len(), |i, j| basis[j][i]);
    Ok(BasisSet {
        columns,
        provenance: format!("{} candidate columns", candidates.ncols()),
        kept,
    })
}

/// Powers (B̂_k⊤x)^r for each estimated direction and each r in `powers`,
/// direction-major.
pub fn direction_power_candidates(data: &Dataset, directions: &DMatrix<f64>, powers: &[i32]) -> DMatrix<f64> {
    let index = data.x_matrix() * directions;
    let per = powers.len();
    DMatrix::from_fn(data.n(), directions.ncols() * per, |i, j| index[(i, j / per)].powi(powers[j % per]))
}

/// Default basis: (B̂_k⊤x)², (B̂_k⊤x)³, (B̂_k⊤x)⁴ for each estimated
/// direction, orthogonalized against the null score span.
pub fn sdr_basis(data: &Dataset, fit: &FittedModel, spec: &ModelSpec, sdr: &SdrEstimate) -> Result<BasisSet> {
    const POWERS: [i32; 3] = [2, 3, 4];
    let candidates = direction_power_candidates(data, &sdr.directions(), &POWERS);
    let scores = spec.score_matrix(data, &fit.beta_hat);
    let basis = gram_schmidt_basis(data, &scores, &candidates)?;
    let provenance = format!("powers 2,3,4 of {} estimated directions", sdr.s_hat());
    Ok(basis.with_provenance(provenance))
}

/// Weight from the truncated expansion m̂_l = m(·, β̂) + Σ â_k g_k with
/// â_k = (1/n) Σ_j ê_j g_k(X_j).
pub fn nonparametric_weight(
    data: &Dataset,
    fit: &FittedModel,
    spec: &ModelSpec,
    basis: &BasisSet,
) -> Result<WeightVector> {
    let n = data.n();
    if basis.columns().nrows() != n {
        return Err(Error::DimensionMismatch {
            what: "basis rows",
            expected: n,
            found: basis.columns().nrows(),
        });
    }
    let e = DVector::from_column_slice(&fit.residuals);
    let coef = basis.columns().tr_mul(&e) / n as f64;
    let expansion = basis.columns() * coef;
    let m_hat: Vec<f64> = fit.fitted.iter().zip(expansion.iter()).map(|(m, s)| m + s).collect();
    let raw = project_out_scores(data, fit, spec, &m_hat)?;
    WeightVector::new(raw, WeightSource::Nonparametric)
}

/// CSE directions, MERE dimension, default basis, and the resulting weight.
pub fn sdr_weight(data: &Dataset, fit: &FittedModel, spec: &ModelSpec) -> Result<(WeightVector, SdrEstimate)> {
    let sdr = cse_directions(data)?;
    let basis = sdr_basis(data, fit, spec, &sdr)?;
    let w = nonparametric_weight(data, fit, spec, &basis)?;
    Ok((w, sdr))
}
