//! Posterior means under the true prior (simulation only).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::SuffStats;
use crate::error::Result;
use crate::linalg::{cholesky, gaussian_log_density, log_det, log_sum_exp};
use crate::simulate::TruePrior;

/// Grid points per dimension for priors without a closed form.
pub const GRID_POINTS: usize = 61;
/// Half-width of the quadrature grid in prior standard deviations.
pub const GRID_HALF_WIDTH: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct OracleDensity {
    truth: TruePrior,
    sigma_v: DMatrix<f64>,
    sigma_v_chol: Cholesky<f64, Dyn>,
    law: Law,
}

#[derive(Debug, Clone)]
enum Law {
    /// Component offsets from the prior location, with the Cholesky factor
    /// of `cov_k + Sigma_V`.
    Mixture(Vec<(f64, DVector<f64>, Cholesky<f64, Dyn>)>),
    Grid(Grid),
}

#[derive(Debug, Clone)]
struct Grid {
    /// Offsets `xi_g` from the prior location, whitened by `Sigma_V`.
    white: Vec<f64>,
    offsets: Vec<f64>,
    log_prior: Vec<f64>,
    /// `log` of the cell volume plus the Gaussian normalizing constant.
    log_const: f64,
}

impl OracleDensity {
    pub fn new(ss: &SuffStats, truth: &TruePrior) -> Result<Self> {
        let sigma_v_chol = cholesky(&ss.sigma_v, "Sigma_V")?;
        let law = match truth.components(0.0) {
            Some(comps) => {
                let loc = truth.location(0.0);
                let mut out = Vec::with_capacity(comps.len());
                for c in comps {
                    let chol = cholesky(&(&c.cov + &ss.sigma_v), "prior component + Sigma_V")?;
                    out.push((c.weight, c.mean - &loc, chol));
                }
                Law::Mixture(out)
            }
            None => Law::Grid(Grid::new(truth, &sigma_v_chol)?),
        };
        Ok(Self { truth: truth.clone(), sigma_v: ss.sigma_v.clone(), sigma_v_chol, law })
    }

    /// `E[lambda | lambda_hat, Y0]` and `log p(lambda_hat | Y0)`.
    pub fn posterior_mean(&self, lambda_hat: &DVector<f64>, y0: f64) -> (DVector<f64>, f64) {
        let loc = self.truth.location(y0);
        match &self.law {
            Law::Mixture(comps) => {
                let lj: Vec<f64> = comps
                    .iter()
                    .map(|(w, off, chol)| w.ln() + gaussian_log_density(lambda_hat, &(&loc + off), chol))
                    .collect();
                let lse = log_sum_exp(&lj);
                let mut grad = DVector::zeros(lambda_hat.len());
                for ((_, off, chol), l) in comps.iter().zip(&lj) {
                    grad += chol.solve(&(&loc + off - lambda_hat)) * (l - lse).exp();
                }
                (lambda_hat + &self.sigma_v * grad, lse)
            }
            Law::Grid(g) => g.posterior(lambda_hat, &loc, &self.sigma_v_chol),
        }
    }

    pub fn log_density_grad(&self, lambda: &DVector<f64>, y0: f64) -> (f64, DVector<f64>) {
        let (pm, lp) = self.posterior_mean(lambda, y0);
        (lp, self.sigma_v_chol.solve(&(pm - lambda)))
    }
}

impl Grid {
    fn new(truth: &TruePrior, sigma_v_chol: &Cholesky<f64, Dyn>) -> Result<Self> {
        let d = truth.dim();
        let base = truth.base_cov();
        let l = cholesky(&base, "prior covariance")?.l();
        let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
        let total = GRID_POINTS.pow(d as u32);
        let loc0 = truth.location(0.0);
        let lv = sigma_v_chol.l();
        let mut white = Vec::with_capacity(total * d);
        let mut offsets = Vec::with_capacity(total * d);
        let mut log_prior = Vec::with_capacity(total);
        let mut g = DVector::zeros(d);
        for idx in 0..total {
            let mut rem = idx;
            for k in 0..d {
                g[k] = -GRID_HALF_WIDTH + step * (rem % GRID_POINTS) as f64;
                rem /= GRID_POINTS;
            }
            let xi = &l * &g;
            log_prior.push(truth.log_density(&(&loc0 + &xi), 0.0)?);
            let w = lv.solve_lower_triangular(&xi).expect("Sigma_V factor is nonsingular");
            white.extend(w.iter());
            offsets.extend(xi.iter());
        }
        let cell = d as f64 * step.ln() + log_det(&Cholesky::new(base).expect("factored above")) * 0.5;
        let gauss = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det(sigma_v_chol));
        Ok(Self { white, offsets, log_prior, log_const: cell + gauss })
    }

    fn posterior(
        &self,
        lambda_hat: &DVector<f64>,
        loc: &DVector<f64>,
        chol: &Cholesky<f64, Dyn>,
    ) -> (DVector<f64>, f64) {
        let d = lambda_hat.len();
        let r = chol.l().solve_lower_triangular(&(lambda_hat - loc)).expect("Sigma_V factor is nonsingular");
        let logs: Vec<f64> = self
            .log_prior
            .iter()
            .enumerate()
            .map(|(g, lp)| {
                let w = &self.white[g * d..(g + 1) * d];
                let q: f64 = (0..d).map(|k| (r[k] - w[k]).powi(2)).sum();
                lp - 0.5 * q
            })
            .collect();
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut acc = DVector::zeros(d);
        for (g, l) in logs.iter().enumerate() {
            let w = (l - m).exp();
            total += w;
            for k in 0..d {
                acc[k] += w * self.offsets[g * d + k];
            }
        }
        (loc + acc / total, m + total.ln() + self.log_const)
    }
}
