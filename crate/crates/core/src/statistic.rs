//! Weighted residual process, the WICM and ICM statistics, and the plug-in
//! diagnostics for the process covariance and the drift under alternatives.
//!
//! With centered weights c_i = g(X_i) − ḡ and residuals ê_i, the process is
//!
//! ```text
//! Û(t) = n^{-1/2} Σ_i c_i {cos(t ê_i) + sin(t ê_i)}
//! ```
//!
//! and the statistic ∫ |Û(t)|² φ(t) dt collapses, for even φ, to the double
//! sum (1/n) Σ_{j,k} c_j c_k M_φ(ê_j − ê_k) with M_φ the cosine transform of
//! φ. For the standard normal φ, M_φ(u) = exp(−u²/2).
//!
//! All double sums run over j < k in row-major order plus the diagonal, so
//! reruns are bit-identical.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{mean, symmetric_inverse};
use crate::model::{Dataset, FittedModel, ModelSpec};
use crate::quadrature::{GaussHermite, DEFAULT_NODES};

/// Where a weight vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Directional,
    Nonparametric,
    User,
}

impl fmt::Display for WeightSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            WeightSource::Directional => "directional",
            WeightSource::Nonparametric => "nonparametric",
            WeightSource::User => "user",
        };
        f.write_str(s)
    }
}

/// Weight function values g(X_i) at the sample points, plus their centered
/// version g(X_i) − ḡ.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    centered: Vec<f64>,
    source: WeightSource,
}

impl WeightVector {
    pub fn new(values: Vec<f64>, source: WeightSource) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("weight vector is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("weight vector has non-finite entries".into()));
        }
        let g_bar = mean(&values);
        let centered = values.iter().map(|v| v - g_bar).collect();
        Ok(Self {
            values,
            centered,
            source,
        })
    }

    pub fn user(values: Vec<f64>) -> Result<Self> {
        Self::new(values, WeightSource::User)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn centered(&self) -> &[f64] {
        &self.centered
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }
}

/// The even weight density φ over t, represented by its cosine transform
/// M_φ(u) = ∫ cos(u t) φ(t) dt.
#[derive(Clone)]
pub struct KernelWeight {
    kind: KernelKind,
    fourth_moment_finite: bool,
}

#[derive(Clone)]
enum KernelKind {
    Gaussian,
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for KernelWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            KernelKind::Gaussian => "gaussian",
            KernelKind::Custom(_) => "custom",
        };
        f.debug_struct("KernelWeight")
            .field("kind", &kind)
            .field("fourth_moment_finite", &self.fourth_moment_finite)
            .finish()
    }
}

impl Default for KernelWeight {
    fn default() -> Self {
        Self::gaussian()
    }
}

impl KernelWeight {
    /// φ = standard normal density, M_φ(u) = exp(−u²/2).
    pub fn gaussian() -> Self {
        Self {
            kind: KernelKind::Gaussian,
            fourth_moment_finite: true,
        }
    }

    /// A caller-supplied cosine transform.
    pub fn from_cosine_transform<F>(m_phi: F, fourth_moment_finite: bool) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            kind: KernelKind::Custom(Arc::new(m_phi)),
            fourth_moment_finite,
        }
    }

    /// Numerical cosine transform of an even density with Gaussian-type
    /// tails, by 64-node Gauss–Hermite quadrature of cos(u t) φ(t)/ψ(t)
    /// against the standard normal density ψ.
    pub fn from_density<F>(density: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let gh = GaussHermite::new(DEFAULT_NODES);
        let norm = (2.0 * std::f64::consts::PI).sqrt();
        let rule: Vec<(f64, f64)> = gh
            .standard_normal_rule()
            .map(|(t, w)| {
                let psi = (-0.5 * t * t).exp() / norm;
                (t, w * density(t) / psi)
            })
            .collect();
        let fourth: f64 = rule.iter().map(|(t, w)| w * t.powi(4)).sum();
        Self {
            kind: KernelKind::Custom(Arc::new(move |u: f64| {
                rule.iter().map(|(t, w)| w * (u * t).cos()).sum()
            })),
            fourth_moment_finite: fourth.is_finite(),
        }
    }

    pub fn m_phi(&self, u: f64) -> f64 {
        match &self.kind {
            KernelKind::Gaussian => m_phi_gaussian(u),
            KernelKind::Custom(f) => f(u),
        }
    }

    pub fn fourth_moment_finite(&self) -> bool {
        self.fourth_moment_finite
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.kind, KernelKind::Gaussian)
    }
}

/// Cosine transform of the standard normal density.
pub fn m_phi_gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp()
}

fn check_len(w: &WeightVector, residuals: &[f64]) -> Result<()> {
    if w.len() != residuals.len() {
        return Err(Error::DimensionMismatch {
            what: "residuals vs weights",
            expected: w.len(),
            found: residuals.len(),
        });
    }
    Ok(())
}

/// Û(t) = n^{-1/2} Σ c_i {cos(t ê_i) + sin(t ê_i)}.
pub fn u_hat(w: &WeightVector, residuals: &[f64], t: f64) -> Result<f64> {
    check_len(w, residuals)?;
    Ok(u_hat_unchecked(w.centered(), residuals, t))
}

pub(crate) fn u_hat_unchecked(centered: &[f64], residuals: &[f64], t: f64) -> f64 {
    let s: f64 = centered
        .iter()
        .zip(residuals)
        .map(|(c, e)| {
            let (sin, cos) = (t * e).sin_cos();
            c * (cos + sin)
        })
        .sum();
    s / (centered.len() as f64).sqrt()
}

/// WICM = (1/n) Σ_{j,k} c_j c_k M_φ(ê_j − ê_k).
pub fn wicm_statistic(w: &WeightVector, residuals: &[f64], kernel: &KernelWeight) -> Result<f64> {
    check_len(w, residuals)?;
    Ok(wicm_unchecked(w.centered(), residuals, kernel))
}

pub(crate) fn wicm_unchecked(c: &[f64], e: &[f64], kernel: &KernelWeight) -> f64 {
    let n = c.len();
    let diag = kernel.m_phi(0.0) * c.iter().map(|v| v * v).sum::<f64>();
    let mut off = 0.0;
    match kernel.kind {
        KernelKind::Gaussian => {
            for j in 0..n {
                let (cj, ej) = (c[j], e[j]);
                let mut row = 0.0;
                for k in (j + 1)..n {
                    let d = ej - e[k];
                    row += c[k] * (-0.5 * d * d).exp();
                }
                off += cj * row;
            }
        }
        KernelKind::Custom(ref m) => {
            for j in 0..n {
                let mut row = 0.0;
                for k in (j + 1)..n {
                    row += c[k] * m(e[j] - e[k]);
                }
                off += c[j] * row;
            }
        }
    }
    (diag + 2.0 * off) / n as f64
}

/// Precomputed Gaussian kernel exp(−‖X_j − X_k‖²/2) over a fixed design,
/// reused across bootstrap replications.
#[derive(Debug, Clone)]
pub struct IcmKernel {
    n: usize,
    /// Strict upper triangle, row-major.
    upper: Vec<f64>,
}

impl IcmKernel {
    pub fn new(data: &Dataset) -> Self {
        let n = data.n();
        let mut upper = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
        for j in 0..n {
            let xj = data.row(j);
            for k in (j + 1)..n {
                let d2: f64 = xj.iter().zip(data.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                upper.push((-0.5 * d2).exp());
            }
        }
        Self { n, upper }
    }

    /// (1/n) Σ_{j,k} ê_j ê_k exp(−‖X_j − X_k‖²/2).
    pub fn statistic(&self, residuals: &[f64]) -> Result<f64> {
        if residuals.len() != self.n {
            return Err(Error::DimensionMismatch {
                what: "residuals vs design rows",
                expected: self.n,
                found: residuals.len(),
            });
        }
        let e = residuals;
        let diag: f64 = e.iter().map(|v| v * v).sum();
        let mut off = 0.0;
        let mut idx = 0;
        for j in 0..self.n {
            let len = self.n - j - 1;
            let row: f64 = e[j + 1..].iter().zip(&self.upper[idx..idx + len]).map(|(a, b)| a * b).sum();
            idx += len;
            off += e[j] * row;
        }
        Ok((diag + 2.0 * off) / self.n as f64)
    }
}

/// Classical ICM statistic with standard-normal integrating measure.
/// May be negative.
pub fn icm_statistic(data: &Dataset, residuals: &[f64]) -> Result<f64> {
    IcmKernel::new(data).statistic(residuals)
}

/// Empirical plug-in of the covariance K_n(s, t) of the linearized process.
///
/// Population moments become sample averages with ε → ê, β₀ → β̂,
/// Σ → (1/n) Σ ṁṁ⊤ and W(t) → (1/n) Σ c_i ṁ_i {sin(t ê_i) − cos(t ê_i)}.
pub struct PlugInCovariance {
    centered: Vec<f64>,
    residuals: Vec<f64>,
    /// n×p score matrix at β̂
    scores: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    /// (1/n) Σ ê_i² ṁ_i ṁ_i⊤
    meat: DMatrix<f64>,
}

impl PlugInCovariance {
    pub fn new(data: &Dataset, fit: &FittedModel, spec: &ModelSpec, w: &WeightVector) -> Result<Self> {
        let n = data.n();
        let p = spec.param_dim();
        check_len(w, &fit.residuals)?;
        if n <= p {
            return Err(Error::InvalidInput(format!("plug-in covariance needs n > p (n = {n}, p = {p})")));
        }
        let scores = spec.score_matrix(data, &fit.beta_hat);
        let sigma = scores.tr_mul(&scores) / n as f64;
        let sigma_inv = symmetric_inverse(&sigma).ok_or(Error::SingularSigma)?;
        let mut weighted = scores.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= fit.residuals[i];
        }
        let meat = weighted.tr_mul(&weighted) / n as f64;
        Ok(Self {
            centered: w.centered().to_vec(),
            residuals: fit.residuals.clone(),
            scores,
            sigma_inv,
            meat,
        })
    }

    fn transformed(&self, t: f64) -> Vec<f64> {
        let raw: Vec<f64> = self
            .residuals
            .iter()
            .map(|e| {
                let (s, c) = (t * e).sin_cos();
                c + s
            })
            .collect();
        let m = mean(&raw);
        raw.into_iter().map(|v| v - m).collect()
    }

    fn w_hat(&self, t: f64) -> DVector<f64> {
        let n = self.residuals.len() as f64;
        let coef: Vec<f64> = self
            .centered
            .iter()
            .zip(&self.residuals)
            .map(|(c, e)| {
                let (s, co) = (t * e).sin_cos();
                c * (s - co)
            })
            .collect();
        self.scores.tr_mul(&DVector::from_vec(coef)) / n
    }

    /// (1/n) Σ c_i [h_t(ê_i) − mean h_t] ê_i ṁ_i, with h_t = cos + sin.
    fn cross(&self, t: f64) -> DVector<f64> {
        let n = self.residuals.len() as f64;
        let h = self.transformed(t);
        let coef: Vec<f64> = self
            .centered
            .iter()
            .zip(&h)
            .zip(&self.residuals)
            .map(|((c, h), e)| c * h * e)
            .collect();
        self.scores.tr_mul(&DVector::from_vec(coef)) / n
    }

    pub fn at(&self, s: f64, t: f64) -> f64 {
        let n = self.residuals.len() as f64;
        let hs = self.transformed(s);
        let ht = self.transformed(t);
        let term1: f64 = self
            .centered
            .iter()
            .zip(hs.iter().zip(&ht))
            .map(|(c, (a, b))| c * c * a * b)
            .sum::<f64>()
            / n;
        let ws = &self.sigma_inv * self.w_hat(s);
        let wt = &self.sigma_inv * self.w_hat(t);
        let term2 = ws.dot(&self.cross(t)) * s;
        let term3 = wt.dot(&self.cross(s)) * t;
        let term4 = ws.dot(&(&self.meat * &wt)) * s * t;
        term1 + term2 + term3 + term4
    }
}

pub fn plug_in_covariance(
    data: &Dataset,
    fit: &FittedModel,
    spec: &ModelSpec,
    w: &WeightVector,
    s: f64,
    t: f64,
) -> Result<f64> {
    Ok(PlugInCovariance::new(data, fit, spec, w)?.at(s, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    /// K⁽¹⁾(t) = E[g₀{cos(te) − cos(tε) + sin(te) − sin(tε)}], e = ε + S(X).
    Fixed,
    /// K⁽²⁾(t) = E[g₀ S {cos(tε) − sin(tε)}].
    Local,
}

/// Sample analogue of the drift functional of the process under a fixed or
/// local alternative with departure values `departure[i] = S(X_i)` and null
/// errors `errors[i] = ε_i`.
pub fn alternative_drift(
    w: &WeightVector,
    errors: &[f64],
    departure: &[f64],
    t: f64,
    kind: DriftKind,
) -> Result<f64> {
    check_len(w, errors)?;
    check_len(w, departure)?;
    let n = errors.len() as f64;
    let c = w.centered();
    let total: f64 = match kind {
        DriftKind::Fixed => c
            .iter()
            .zip(errors.iter().zip(departure))
            .map(|(g, (eps, s))| {
                let e = eps + s;
                g * ((t * e).cos() - (t * eps).cos() + (t * e).sin() - (t * eps).sin())
            })
            .sum(),
        DriftKind::Local => c
            .iter()
            .zip(errors.iter().zip(departure))
            .map(|(g, (eps, s))| g * s * ((t * eps).cos() - (t * eps).sin()))
            .sum(),
    };
    Ok(total / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_least_squares, make_linear_model};
    use crate::quadrature::GaussHermite;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// ∫|Û(t)|² φ(t) dt by 64-node Gauss–Hermite, evaluating Û pointwise.
    fn wicm_by_quadrature(w: &WeightVector, e: &[f64]) -> f64 {
        GaussHermite::default().expect_standard_normal(|t| u_hat(w, e, t).unwrap().powi(2))
    }

    /// ∫ |n^{-1/2} Σ c_j exp(i t ê_j)|² φ(t) dt.
    fn wicm_complex_exponential(w: &WeightVector, e: &[f64]) -> f64 {
        let n = e.len() as f64;
        GaussHermite::default().expect_standard_normal(|t| {
            let (re, im) = w
                .centered()
                .iter()
                .zip(e)
                .fold((0.0, 0.0), |(re, im), (c, ej)| (re + c * (t * ej).cos(), im + c * (t * ej).sin()));
            (re * re + im * im) / n
        })
    }

    #[test]
    fn m_phi_gaussian_values() {
        assert_eq!(m_phi_gaussian(0.0), 1.0);
        let quad = GaussHermite::new(64).expect_standard_normal(|t| (1.7 * t).cos());
        assert!((m_phi_gaussian(1.7) - quad).abs() < 1e-10);
        for u in [0.1, 0.9, 2.3, 5.0] {
            assert_eq!(m_phi_gaussian(u), m_phi_gaussian(-u));
        }
    }

    #[test]
    fn density_kernel_matches_gaussian_closed_form() {
        let k = KernelWeight::from_density(|t| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt());
        assert!((k.m_phi(0.0) - 1.0).abs() < 1e-12);
        for u in [0.5, 1.7, 3.0] {
            assert!((k.m_phi(u) - m_phi_gaussian(u)).abs() < 1e-12);
            assert!((k.m_phi(u) - k.m_phi(-u)).abs() < 1e-15);
        }
        assert!(k.fourth_moment_finite());
    }

    #[test]
    fn narrower_normal_density_kernel() {
        // φ = N(0, 0.5²): M_φ(u) = exp(−u²/8).
        let sd = 0.5;
        let k = KernelWeight::from_density(move |t| {
            (-0.5 * (t / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        });
        for u in [0.0, 1.0, 2.5] {
            assert!((k.m_phi(u) - (-u * u / 8.0).exp()).abs() < 1e-10, "u={u}");
        }
    }

    #[test]
    fn u_hat_vanishes_at_zero_and_for_single_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WeightVector::user(normals(&mut rng, 20)).unwrap();
        let e = normals(&mut rng, 20);
        assert!(u_hat(&w, &e, 0.0).unwrap().abs() < 1e-14);
        let w1 = WeightVector::user(vec![3.0]).unwrap();
        assert_eq!(u_hat(&w1, &[0.7], 1.3).unwrap(), 0.0);
    }

    #[test]
    fn wicm_trivial_cases() {
        let k = KernelWeight::gaussian();
        let w = WeightVector::user(vec![2.0; 5]).unwrap();
        assert_eq!(wicm_statistic(&w, &[0.1, -0.4, 2.0, 0.3, 1.0], &k).unwrap(), 0.0);

        let w = WeightVector::user(vec![1.0, 4.0, -2.0, 0.5]).unwrap();
        let v = wicm_statistic(&w, &[0.3; 4], &k).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn wicm_hand_instance() {
        // c = (−1, 1), ê = (0, 1): (1/2)(1 + 1 − 2 e^{−1/2}) = 1 − e^{−1/2}
        let w = WeightVector::user(vec![0.0, 2.0]).unwrap();
        let v = wicm_statistic(&w, &[0.0, 1.0], &KernelWeight::gaussian()).unwrap();
        assert!((v - (1.0 - (-0.5f64).exp())).abs() < 1e-15);
        assert!((v - 0.393469).abs() < 1e-6);
    }

    #[test]
    fn wicm_matches_quadrature_and_complex_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2, 7, 25, 50] {
            let w = WeightVector::user(normals(&mut rng, n)).unwrap();
            let e = normals(&mut rng, n);
            let closed = wicm_statistic(&w, &e, &KernelWeight::gaussian()).unwrap();
            let quad = wicm_by_quadrature(&w, &e);
            let cplx = wicm_complex_exponential(&w, &e);
            assert!((closed - quad).abs() <= 1e-8 * (1.0 + closed), "n={n}: {closed} vs {quad}");
            assert!((closed - cplx).abs() <= 1e-8 * (1.0 + closed), "n={n}: {closed} vs {cplx}");
        }
    }

    #[test]
    fn custom_kernel_route_matches_gaussian_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = WeightVector::user(normals(&mut rng, 30)).unwrap();
        let e = normals(&mut rng, 30);
        let a = wicm_statistic(&w, &e, &KernelWeight::gaussian()).unwrap();
        let b = wicm_statistic(&w, &e, &KernelWeight::from_cosine_transform(m_phi_gaussian, true)).unwrap();
        assert!((a - b).abs() < 1e-13);
    }

    #[test]
    fn length_mismatch_is_error() {
        let w = WeightVector::user(vec![1.0, 2.0]).unwrap();
        assert!(u_hat(&w, &[0.0], 1.0).is_err());
        assert!(wicm_statistic(&w, &[0.0, 1.0, 2.0], &KernelWeight::gaussian()).is_err());
    }

    fn dataset(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Dataset {
        let x = normals(rng, n * d);
        let y = normals(rng, n);
        Dataset::from_row_major(n, d, x, y).unwrap()
    }

    #[test]
    fn icm_trivial_cases() {
        let data = Dataset::from_row_major(1, 2, vec![0.3, -1.0], vec![0.0]).unwrap();
        assert!((icm_statistic(&data, &[1.5]).unwrap() - 2.25).abs() < 1e-15);

        let data = Dataset::from_row_major(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0], vec![0.0; 3]).unwrap();
        let e = [0.5, -2.0, 0.75];
        let sum: f64 = e.iter().sum();
        assert!((icm_statistic(&data, &e).unwrap() - sum * sum / 3.0).abs() < 1e-15);
    }

    #[test]
    fn icm_matches_monte_carlo_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (4, 3);
        let data = dataset(&mut rng, n, d);
        let e = normals(&mut rng, n);
        let closed = icm_statistic(&data, &e).unwrap();
        // E_t |n^{-1/2} Σ ê_j exp(i t⊤X_j)|², t ~ N(0, I_d)
        let draws = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let mut t = vec![0.0; d];
        for _ in 0..draws {
            t.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            let (mut re, mut im) = (0.0, 0.0);
            for (j, ej) in e.iter().enumerate() {
                let arg: f64 = data.row(j).iter().zip(&t).map(|(a, b)| a * b).sum();
                re += ej * arg.cos();
                im += ej * arg.sin();
            }
            let v = (re * re + im * im) / n as f64;
            sum += v;
            sum_sq += v * v;
        }
        let m = sum / draws as f64;
        let se = ((sum_sq / draws as f64 - m * m) / draws as f64).sqrt();
        assert!((closed - m).abs() <= 3.0 * se, "{closed} vs {m} ± {se}");
    }

    fn null_setup(seed: u64, n: usize, d: usize) -> (Dataset, FittedModel, ModelSpec, WeightVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = normals(&mut rng, n * d);
        let y: Vec<f64> = (0..n)
            .map(|i| x[i * d..(i + 1) * d].iter().sum::<f64>() + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = Dataset::from_row_major(n, d, x, y).unwrap();
        let spec = make_linear_model(d, false);
        let fit = fit_least_squares(&data, &spec, None).unwrap();
        let g: Vec<f64> = data.rows().map(|r| r[0] * r[0] + 0.5 * r[1]).collect();
        (data, fit, spec, WeightVector::user(g).unwrap())
    }

    #[test]
    fn plug_in_covariance_basic_properties() {
        let (data, fit, spec, w) = null_setup(21, 80, 3);
        let k = PlugInCovariance::new(&data, &fit, &spec, &w).unwrap();
        assert!(k.at(0.0, 0.0).abs() < 1e-14);
        for (s, t) in [(0.3, 1.2), (-0.7, 2.0), (1.5, 0.25)] {
            assert!((k.at(s, t) - k.at(t, s)).abs() < 1e-12);
        }
        let grid = [0.25, 0.5, 1.0, 2.0];
        let gram = DMatrix::from_fn(4, 4, |i, j| k.at(grid[i], grid[j]));
        let eig = nalgebra::SymmetricEigen::new(gram);
        assert!(eig.eigenvalues.min() >= -1e-8);
    }

    #[test]
    fn plug_in_covariance_equals_influence_outer_product() {
        // K̂(s,t) = (1/n) Σ ψ_i(s) ψ_i(t) with
        // ψ_i(t) = c_i (h_t(ê_i) − mean h_t) + t Ŵ(t)⊤ Σ̂⁻¹ ṁ_i ê_i.
        let (data, fit, spec, w) = null_setup(22, 60, 4);
        let n = data.n();
        let scores = spec.score_matrix(&data, &fit.beta_hat);
        let sigma = scores.tr_mul(&scores) / n as f64;
        let sigma_inv = sigma.try_inverse().unwrap();
        let psi = |t: f64| -> Vec<f64> {
            let h: Vec<f64> = fit.residuals.iter().map(|e| (t * e).cos() + (t * e).sin()).collect();
            let hm = h.iter().sum::<f64>() / n as f64;
            let mut wv = DVector::zeros(spec.param_dim());
            for i in 0..n {
                let e = fit.residuals[i];
                wv += scores.row(i).transpose() * (w.centered()[i] * ((t * e).sin() - (t * e).cos()));
            }
            wv /= n as f64;
            let a = &sigma_inv * wv;
            (0..n)
                .map(|i| {
                    w.centered()[i] * (h[i] - hm) + t * (scores.row(i) * &a)[0] * fit.residuals[i]
                })
                .collect()
        };
        let k = PlugInCovariance::new(&data, &fit, &spec, &w).unwrap();
        for (s, t) in [(0.5, 0.5), (0.5, 1.0), (1.0, 1.0), (0.2, 3.0)] {
            let (ps, pt) = (psi(s), psi(t));
            let direct: f64 = ps.iter().zip(&pt).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            assert!((k.at(s, t) - direct).abs() < 1e-12, "({s},{t})");
        }
    }

    #[test]
    fn plug_in_covariance_singular_sigma() {
        let x = vec![1.0, 2.0, 2.0, 4.0, 3.0, 6.0, 4.0, 8.0];
        let data = Dataset::from_row_major(4, 2, x, vec![1.0, 2.0, 0.0, 1.0]).unwrap();
        let spec = ModelSpec::nonlinear("collinear", 2, |x, b| x[0] * b[0] + x[1] * b[1], |x, _, g| g.copy_from_slice(x));
        let fit = FittedModel {
            beta_hat: vec![0.0, 0.0],
            fitted: vec![0.0; 4],
            residuals: data.y().to_vec(),
            ssr: 6.0,
            gradient_norm: 0.0,
            converged: true,
            iterations: 0,
        };
        let w = WeightVector::user(vec![1.0, 0.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            plug_in_covariance(&data, &fit, &spec, &w, 1.0, 1.0),
            Err(Error::SingularSigma)
        ));
    }

    #[test]
    fn drift_functionals() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 40;
        let w = WeightVector::user(normals(&mut rng, n)).unwrap();
        let eps = normals(&mut rng, n);
        let zero = vec![0.0; n];
        for t in [0.3, 1.0, 2.2] {
            assert_eq!(alternative_drift(&w, &eps, &zero, t, DriftKind::Fixed).unwrap(), 0.0);
            assert_eq!(alternative_drift(&w, &eps, &zero, t, DriftKind::Local).unwrap(), 0.0);
        }
        let s = normals(&mut rng, n);
        let at0 = alternative_drift(&w, &eps, &s, 0.0, DriftKind::Local).unwrap();
        let expect = w.centered().iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!((at0 - expect).abs() < 1e-15);

        // Elementwise recomputation of K⁽¹⁾.
        let t = 0.8;
        let mut acc = 0.0;
        for i in 0..n {
            let e = eps[i] + s[i];
            acc += w.centered()[i] * ((t * e).cos() + (t * e).sin() - (t * eps[i]).cos() - (t * eps[i]).sin());
        }
        let got = alternative_drift(&w, &eps, &s, t, DriftKind::Fixed).unwrap();
        assert!((got - acc / n as f64).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn wicm_properties(seed in 0u64..1_000_000, n in 1usize..40, shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = normals(&mut rng, n);
            let e: Vec<f64> = normals(&mut rng, n).into_iter().map(|v| 2.0 * v).collect();
            let k = KernelWeight::gaussian();
            let base = wicm_statistic(&WeightVector::user(g.clone()).unwrap(), &e, &k).unwrap();
            prop_assert!(base >= -1e-12);
            let shifted = wicm_statistic(&WeightVector::user(g.iter().map(|v| v + shift).collect()).unwrap(), &e, &k).unwrap();
            prop_assert!((shifted - base).abs() <= 1e-10 * (1.0 + base));
            let scaled = wicm_statistic(&WeightVector::user(g.iter().map(|v| v * scale).collect()).unwrap(), &e, &k).unwrap();
            prop_assert!((scaled - scale * scale * base).abs() <= 1e-10 * (scale * scale * base).max(1e-300) + 1e-12);
        }
    }
}
