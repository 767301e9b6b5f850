//! Leave-one-out product-Gaussian kernel density of `(lambda_hat, Y0)`.

use nalgebra::{DMatrix, DVector};

use super::SuffStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KernelDensity {
    /// `n x (d+1)`, last column is `Y0`.
    points: DMatrix<f64>,
    bandwidths: Vec<f64>,
    dim_lambda: usize,
}

/// Per-dimension Silverman bandwidths `sd_j (4 / ((D+2) N))^(1/(D+4))`.
pub fn silverman_bandwidths(points: &DMatrix<f64>) -> Vec<f64> {
    let n = points.nrows() as f64;
    let dim = points.ncols() as f64;
    let factor = (4.0 / ((dim + 2.0) * n)).powf(1.0 / (dim + 4.0));
    points
        .column_iter()
        .map(|c| {
            let m = c.mean();
            let var = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() * factor
        })
        .collect()
}

impl KernelDensity {
    /// `bandwidth = Some(h)` uses `h` in every dimension.
    pub fn fit(ss: &SuffStats, bandwidth: Option<f64>) -> Result<Self> {
        let n = ss.n_units();
        if n < 2 {
            return Err(Error::Config("kernel density needs at least two units".into()));
        }
        let d = ss.dim();
        let points = DMatrix::from_fn(n, d + 1, |i, k| if k < d { ss.lambda_hat[(i, k)] } else { ss.y0[i] });
        let bandwidths = match bandwidth {
            Some(h) if h > 0.0 => vec![h; d + 1],
            Some(h) => return Err(Error::Config(format!("bandwidth must be positive, got {h}"))),
            None => silverman_bandwidths(&points),
        };
        if bandwidths.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::Degenerate("a coordinate of (lambda_hat, Y0) is constant".into()));
        }
        Ok(Self { points, bandwidths, dim_lambda: d })
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    /// Squared bandwidths of the `lambda` block on the diagonal.
    pub fn inflation(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim_lambda, self.dim_lambda, |r, c| if r == c { self.bandwidths[r].powi(2) } else { 0.0 })
    }

    /// Log density and its `lambda` gradient, leaving out `exclude`.
    pub fn log_density_grad(&self, lambda: &DVector<f64>, y0: f64, exclude: Option<usize>) -> (f64, DVector<f64>) {
        let d = self.dim_lambda;
        let n = self.points.nrows();
        let x: Vec<f64> = lambda.iter().cloned().chain(std::iter::once(y0)).collect();
        let inv_h: Vec<f64> = self.bandwidths.iter().map(|h| 1.0 / h).collect();
        let mut logk = Vec::with_capacity(n);
        for j in 0..n {
            if Some(j) == exclude {
                continue;
            }
            let mut q = 0.0;
            for (k, xk) in x.iter().enumerate() {
                let z = (xk - self.points[(j, k)]) * inv_h[k];
                q += z * z;
            }
            logk.push((j, -0.5 * q));
        }
        let m = logk.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut grad = DVector::zeros(d);
        if m.is_finite() {
            for (j, l) in &logk {
                let w = (l - m).exp();
                total += w;
                for k in 0..d {
                    grad[k] += w * (self.points[(*j, k)] - x[k]) * inv_h[k] * inv_h[k];
                }
            }
            grad /= total;
        }
        let norm: f64 = self.bandwidths.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        let lp = m + total.ln() - (logk.len() as f64).ln() - norm;
        (lp, grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ss_from(points: &[[f64; 3]]) -> SuffStats {
        SuffStats {
            lambda_hat: DMatrix::from_fn(points.len(), 2, |i, k| points[i][k]),
            sigma_v: DMatrix::identity(2, 2),
            y0: DVector::from_iterator(points.len(), points.iter().map(|p| p[2])),
            init_coeffs: DMatrix::from_element(1, 1, 1.0),
        }
    }

    #[test]
    fn two_units_leave_one_out() {
        let ss = ss_from(&[[0.0, 1.0, 0.5], [1.0, -1.0, 2.0]]);
        let kd = KernelDensity::fit(&ss, Some(0.7)).unwrap();
        let x = DVector::from_vec(vec![0.0, 1.0]);
        let (lp, _) = kd.log_density_grad(&x, 0.5, Some(0));
        let z = [0.0 - 1.0, 1.0 + 1.0, 0.5 - 2.0];
        let oracle: f64 = z
            .iter()
            .map(|v| (-0.5 * (v / 0.7_f64).powi(2)).exp() / (0.7 * (2.0 * std::f64::consts::PI).sqrt()))
            .product();
        assert!((lp - oracle.ln()).abs() < 1e-12);
    }

    #[test]
    fn too_few_units() {
        let ss = ss_from(&[[0.0, 1.0, 0.5]]);
        assert!(KernelDensity::fit(&ss, None).is_err());
    }

    #[test]
    fn silverman_constant() {
        let pts = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let h = silverman_bandwidths(&pts);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((h[0] - sd * (4.0 / 12.0f64).powf(0.2)).abs() < 1e-12);
    }
}
