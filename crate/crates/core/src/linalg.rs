//! Small dense linear-algebra helpers shared by the fitting and weighting code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Moore–Penrose pseudo-inverse via SVD, with the numerical rank.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = RANK_TOLERANCE * max_sv;
    let mut rank = 0;
    let mut pinv = DMatrix::zeros(a.ncols(), a.nrows());
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        if sv > cutoff && sv > 0.0 {
            rank += 1;
            // pinv += v_k u_k^T / sv
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            pinv.ger(1.0 / sv, &vk, &uk, 1.0);
        }
    }
    (pinv, rank)
}

/// Inverse of a symmetric positive semidefinite matrix, or `None` when its
/// smallest eigenvalue falls below the rank tolerance.
pub fn symmetric_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(a.clone());
    let max_ev = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if max_ev == 0.0 || eig.eigenvalues.iter().any(|&v| v <= RANK_TOLERANCE * max_ev) {
        return None;
    }
    let q = &eig.eigenvectors;
    let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
    let inv = q * inv_diag * q.transpose();
    // Re-symmetrize to remove rounding asymmetry.
    Some((&inv + inv.transpose()) * 0.5)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and eigenvectors as the matching columns.
pub fn symmetric_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // Sign convention: largest-magnitude entry positive.
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if col[imax] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    (values, vectors)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
