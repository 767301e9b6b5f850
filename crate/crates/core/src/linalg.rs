//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Integer powers by repeated multiplication, `[1, x, x^2, .., x^n]`.
pub fn powers(x: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut acc = 1.0;
    out.push(acc);
    for _ in 0..n {
        acc *= x;
        out.push(acc);
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix. Retries once with a `1e-10`
/// relative diagonal jitter before giving up.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let scale = m.diagonal().iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
    let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * (1e-10 * scale);
    Cholesky::new(jittered).ok_or_else(|| Error::NotPositiveDefinite(what.to_string()))
}

pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(&cholesky(m, what)?.inverse()))
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues to zero.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&out)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Row-major lower-triangle enumeration: `(0,0), (1,0), (1,1), (2,0), ...`.
pub fn vech_indices(d: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for r in 0..d {
        for c in 0..=r {
            out.push((r, c));
        }
    }
    out
}

pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    vech_indices(m.nrows()).into_iter().map(|(r, c)| m[(r, c)]).collect()
}

pub fn unvech(v: &[f64], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for ((r, c), x) in vech_indices(d).into_iter().zip(v) {
        m[(r, c)] = *x;
        m[(c, r)] = *x;
    }
    m
}

/// `log N(x; mean, cov)` given a Cholesky factor of `cov`.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let r = x - mean;
    let z = chol.l_dirty().solve_lower_triangular(&r).expect("triangular solve");
    let d = x.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det(chol) + z.norm_squared())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Sum with a fixed pairwise reduction tree so the result does not depend on
/// how the terms were produced.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn powers_are_iterated_products() {
        assert_eq!(powers(0.5, 3), vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(powers(0.0, 2), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn vech_roundtrip() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 4.0, 2.0, 3.0, 5.0, 4.0, 5.0, 6.0]);
        assert_eq!(vech(&m), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(unvech(&vech(&m), 3), m);
    }

    #[test]
    fn clip_psd_removes_negative_directions() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = clip_psd(&m);
        assert!(min_eigenvalue(&c) > -1e-12);
        assert!((c[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = [-1000.0, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
