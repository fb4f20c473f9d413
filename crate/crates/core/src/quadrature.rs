//! Gauss–Hermite quadrature.
//!
//! Nodes are the roots of the physicists' Hermite polynomial H_n, found by
//! Newton iteration on the orthonormal three-term recurrence. The rule
//! integrates `e^{-x^2} f(x)` over the real line exactly for polynomial `f`
//! of degree ≤ 2n − 1.

use std::f64::consts::PI;

/// Node count used throughout the crate for integrals against the standard
/// normal density.
pub const DEFAULT_NODES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        const MAX_NEWTON: usize = 100;
        let pi_m4 = PI.powf(-0.25);
        let nf = n as f64;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let half = n.div_ceil(2);
        let mut z = 0.0f64;
        for i in 0..half {
            // Asymptotic starting guesses for the largest roots, then
            // extrapolation from the previously found ones.
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            for _ in 0..MAX_NEWTON {
                let (p, p_prev) = orthonormal_hermite(n, z, pi_m4);
                let step = p / ((2.0 * nf).sqrt() * p_prev);
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            // Weight from the derivative at the converged root.
            let (_, p_prev) = orthonormal_hermite(n, z, pi_m4);
            let dp = (2.0 * nf).sqrt() * p_prev;
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (dp * dp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[half - 1] = 0.0;
        }
        // Ascending order.
        x.reverse();
        w.reverse();
        Self {
            nodes: x,
            weights: w,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// ∫ e^{-x²} f(x) dx.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// E f(Z) for Z standard normal, i.e. ∫ f(t) φ(t) dt.
    pub fn expect_standard_normal<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let scale = std::f64::consts::SQRT_2;
        self.integrate(|x| f(scale * x)) / PI.sqrt()
    }

    /// Standard-normal nodes t_i = √2 x_i paired with probability weights
    /// w_i / √π (summing to one).
    pub fn standard_normal_rule(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let norm = PI.sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (std::f64::consts::SQRT_2 * x, w / norm))
    }
}

impl Default for GaussHermite {
    fn default() -> Self {
        Self::new(DEFAULT_NODES)
    }
}

/// Returns (h_n(z), h_{n-1}(z)) for the orthonormal Hermite functions
/// scaled so that the weights come out as 2 / (√(2n) h_{n-1})².
fn orthonormal_hermite(n: usize, z: f64, h0: f64) -> (f64, f64) {
    let mut p1 = h0;
    let mut p2 = 0.0;
    for j in 1..=n {
        let jf = j as f64;
        let p3 = p2;
        p2 = p1;
        p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, p2)
}
