//! Empirical-Bayes recovery of the unit effects.
//!
//! Given `theta`, each unit's least-squares estimate `lambda_hat_i` is
//! `lambda_i + V_i` with `V_i ~ (0, Sigma_V)` and `Sigma_V` shared across
//! units. Tweedie's formula turns an estimate of the density of
//! `(lambda_hat, Y0)` into posterior means:
//!
//! ```text
//! lambda_tilde_i = lambda_hat_i + (Sigma_V + Inflation) grad log p(lambda_hat_i, Y_i0)
//! ```
//!
//! where the inflation is the squared bandwidth for the kernel backend and
//! zero otherwise.

mod kernel;
mod mixture;
mod oracle;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, gaussian_log_density, symmetrize};
use crate::model::{
    build_error_cov, build_w, effect_representation, CommonParams, EventDesign, PanelData, PriorParams,
};
use crate::simulate::TruePrior;

pub use kernel::KernelDensity;
pub use mixture::{fit_mixture_bic, MixtureDensity, MixtureOptions};
pub use oracle::OracleDensity;

/// Log-densities below this are treated as underflow.
pub const LOG_DENSITY_FLOOR: f64 = -700.0;

#[derive(Debug, Clone)]
pub struct SuffStats {
    /// `n x (1+p)`
    pub lambda_hat: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub y0: DVector<f64>,
    /// Effect coefficients on the free initials, `(J+1) x p`.
    pub init_coeffs: DMatrix<f64>,
}

impl SuffStats {
    pub fn n_units(&self) -> usize {
        self.lambda_hat.nrows()
    }

    pub fn dim(&self) -> usize {
        self.lambda_hat.ncols()
    }

    pub fn lambda(&self, i: usize) -> DVector<f64> {
        self.lambda_hat.row(i).transpose()
    }
}

pub fn sufficient_stats(panel: &PanelData, design: &EventDesign, theta: &CommonParams) -> Result<SuffStats> {
    let periods = panel.periods();
    design.validate(periods)?;
    let rep = effect_representation(&theta.rho_delta, design.horizon, design.ar_order)?;
    let w = build_w(design, periods, &rep);
    let w_plus = (w.transpose() * &w).try_inverse().ok_or_else(|| Error::InvalidDesign("W'W is singular".into()))?
        * w.transpose();
    let yt = crate::model::transformed_outcomes(panel, theta.rho_y);
    let lambda_hat = &yt * w_plus.transpose();
    let sigma_v = symmetrize(&(&w_plus * build_error_cov(design, periods, theta, &rep) * w_plus.transpose()));
    Ok(SuffStats { lambda_hat, sigma_v, y0: panel.initial(), init_coeffs: rep.init_coeffs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Parametric,
    Kernel,
    Mixture,
    Oracle,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [Self::Parametric, Self::Kernel, Self::Mixture, Self::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Parametric => "parametric",
            Self::Kernel => "kernel",
            Self::Mixture => "mixture",
            Self::Oracle => "oracle",
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown EB backend '{s}'")))
    }
}

/// `lambda_hat | Y0 ~ N(b0 + b1 Y0, Sigma_lambda + Sigma_V)`.
#[derive(Debug, Clone)]
pub struct ParametricDensity {
    prior: PriorParams,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    precision: DMatrix<f64>,
}

impl ParametricDensity {
    pub fn prior(&self) -> &PriorParams {
        &self.prior
    }
}

pub fn fit_parametric(ss: &SuffStats, prior: &PriorParams) -> Result<DensityBackend> {
    if prior.b0.len() != ss.dim() {
        return Err(Error::Dimension("prior and lambda_hat dimensions differ".into()));
    }
    let cov = symmetrize(&(&prior.sigma_lambda + &ss.sigma_v));
    let chol = cholesky(&cov, "Sigma_lambda + Sigma_V")?;
    let precision = symmetrize(&chol.inverse());
    Ok(DensityBackend::Parametric(ParametricDensity { prior: prior.clone(), chol, precision }))
}

pub fn fit_kernel(ss: &SuffStats, bandwidth: Option<f64>) -> Result<DensityBackend> {
    Ok(DensityBackend::Kernel(KernelDensity::fit(ss, bandwidth)?))
}

/// Fits a `k`-component Gaussian mixture to `(lambda_hat, Y0)`.
pub fn fit_mixture(ss: &SuffStats, k: usize, opts: &MixtureOptions) -> Result<DensityBackend> {
    Ok(DensityBackend::Mixture(MixtureDensity::fit(&mixture::joint_points(ss), k, ss.dim(), opts)?))
}

pub fn fit_oracle(ss: &SuffStats, truth: &TruePrior) -> Result<DensityBackend> {
    Ok(DensityBackend::Oracle(OracleDensity::new(ss, truth)?))
}

#[derive(Debug, Clone)]
pub enum DensityBackend {
    Parametric(ParametricDensity),
    Kernel(KernelDensity),
    Mixture(MixtureDensity),
    Oracle(OracleDensity),
}

impl DensityBackend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Self::Parametric(_) => BackendKind::Parametric,
            Self::Kernel(_) => BackendKind::Kernel,
            Self::Mixture(_) => BackendKind::Mixture,
            Self::Oracle(_) => BackendKind::Oracle,
        }
    }

    /// `(log p, grad_lambda log p)` at `(lambda, y0)`. `unit` identifies the
    /// evaluation unit for leave-one-out backends.
    pub fn log_density_grad(&self, lambda: &DVector<f64>, y0: f64, unit: Option<usize>) -> (f64, DVector<f64>) {
        match self {
            Self::Parametric(p) => {
                let r = lambda - p.prior.mean(y0);
                let lp = gaussian_log_density(&r, &DVector::zeros(r.len()), &p.chol);
                (lp, -(&p.precision * r))
            }
            Self::Kernel(k) => k.log_density_grad(lambda, y0, unit),
            Self::Mixture(m) => m.log_density_grad(lambda, y0),
            Self::Oracle(o) => o.log_density_grad(lambda, y0),
        }
    }

    pub fn log_density(&self, lambda: &DVector<f64>, y0: f64, unit: Option<usize>) -> f64 {
        self.log_density_grad(lambda, y0, unit).0
    }

    /// Added to `Sigma_V` in the Tweedie step.
    pub fn inflation(&self, dim: usize) -> DMatrix<f64> {
        match self {
            Self::Kernel(k) => k.inflation(),
            _ => DMatrix::zeros(dim, dim),
        }
    }

    pub fn metadata(&self) -> BackendInfo {
        match self {
            Self::Kernel(k) => BackendInfo { bandwidths: Some(k.bandwidths().to_vec()), components: None },
            Self::Mixture(m) => BackendInfo { bandwidths: None, components: Some(m.n_components()) },
            _ => BackendInfo::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub bandwidths: Option<Vec<f64>>,
    pub components: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EbResult {
    pub backend: BackendKind,
    /// `n x (1+p)`
    pub lambda_tilde: DMatrix<f64>,
    /// `n x (J+1)` posterior-mean effect paths.
    pub trajectories: DMatrix<f64>,
    pub truncation_count: usize,
    pub fallback_count: usize,
    pub info: BackendInfo,
}

fn clip_to_ball(v: DVector<f64>, radius: Option<f64>) -> (DVector<f64>, bool) {
    match radius {
        Some(c) if v.norm() > c => {
            let s = c / v.norm();
            (v * s, true)
        }
        _ => (v, false),
    }
}

/// Tweedie correction of every unit. `truncation = None` disables clipping.
pub fn tweedie(ss: &SuffStats, backend: &DensityBackend, truncation: Option<f64>) -> Result<EbResult> {
    if let Some(c) = truncation {
        if !(c > 0.0) {
            return Err(Error::Config("truncation radius must be positive".into()));
        }
    }
    let d = ss.dim();
    let noise = &ss.sigma_v + backend.inflation(d);
    let rows: Vec<(DVector<f64>, bool, bool)> = (0..ss.n_units())
        .into_par_iter()
        .map(|i| {
            let lam = ss.lambda(i);
            let (lp, grad) = backend.log_density_grad(&lam, ss.y0[i], Some(i));
            if !(lp >= LOG_DENSITY_FLOOR) || grad.iter().any(|g| !g.is_finite()) {
                log::warn!("unit {i}: density underflow (log p = {lp}); keeping lambda_hat");
                return (lam, false, true);
            }
            let (out, clipped) = clip_to_ball(&lam + &noise * grad, truncation);
            (out, clipped, false)
        })
        .collect();
    let mut lambda_tilde = DMatrix::zeros(ss.n_units(), d);
    let mut truncation_count = 0;
    let mut fallback_count = 0;
    for (i, (v, clipped, fell_back)) in rows.into_iter().enumerate() {
        lambda_tilde.row_mut(i).copy_from(&v.transpose());
        truncation_count += clipped as usize;
        fallback_count += fell_back as usize;
    }
    let trajectories = effect_paths(&lambda_tilde, &ss.init_coeffs);
    Ok(EbResult {
        backend: backend.kind(),
        lambda_tilde,
        trajectories,
        truncation_count,
        fallback_count,
        info: backend.metadata(),
    })
}

/// `delta_ij = C[j, .] delta_init_i` for every row of `lambda` (intercept first).
pub fn effect_paths(lambda: &DMatrix<f64>, init_coeffs: &DMatrix<f64>) -> DMatrix<f64> {
    let p = init_coeffs.ncols();
    let delta_init = lambda.columns(1, p);
    delta_init * init_coeffs.transpose()
}

/// `sum_i ||estimate_i - truth_i||^2`.
pub fn compound_risk(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(Error::Dimension(format!("estimate {:?} vs truth {:?}", estimate.shape(), truth.shape())));
    }
    Ok((estimate - truth).norm_squared())
}

/// Default truncation radius for risk computations: ten times the sample
/// standard deviation of `||lambda_hat_i||`.
pub fn default_truncation(ss: &SuffStats) -> f64 {
    let norms: Vec<f64> = (0..ss.n_units()).map(|i| ss.lambda_hat.row(i).norm()).collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    10.0 * var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{lookup_design, simulate, DgpSpec};

    fn toy_ss(lam: &[[f64; 2]], y0: &[f64], sigma_v: DMatrix<f64>) -> SuffStats {
        SuffStats {
            lambda_hat: DMatrix::from_fn(lam.len(), 2, |i, k| lam[i][k]),
            sigma_v,
            y0: DVector::from_column_slice(y0),
            init_coeffs: DMatrix::from_element(2, 1, 1.0),
        }
    }

    #[test]
    fn conjugate_example() {
        let ss = toy_ss(&[[2.0, 2.0]], &[0.0], DMatrix::identity(2, 2));
        let prior = PriorParams { b0: DVector::zeros(2), b1: DVector::zeros(2), sigma_lambda: DMatrix::identity(2, 2) };
        let be = fit_parametric(&ss, &prior).unwrap();
        let out = tweedie(&ss, &be, None).unwrap();
        assert!((out.lambda_tilde[(0, 0)] - 1.0).abs() < 1e-12);
        assert!((out.lambda_tilde[(0, 1)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_prior_variance_shrinks_to_prior_mean() {
        let ss = toy_ss(&[[2.0, -1.0], [0.5, 0.3]], &[1.0, -2.0], DMatrix::identity(2, 2) * 0.3);
        let prior = PriorParams {
            b0: DVector::from_vec(vec![1.0, 2.0]),
            b1: DVector::from_vec(vec![0.5, -0.5]),
            sigma_lambda: DMatrix::zeros(2, 2),
        };
        let out = tweedie(&ss, &fit_parametric(&ss, &prior).unwrap(), None).unwrap();
        for i in 0..2 {
            let m = prior.mean(ss.y0[i]);
            assert!((out.lambda_tilde.row(i).transpose() - m).amax() < 1e-12);
        }
    }

    #[test]
    fn flat_point_is_fixed() {
        let ss = toy_ss(&[[1.0, 2.0]], &[0.0], DMatrix::identity(2, 2));
        let prior = PriorParams {
            b0: DVector::from_vec(vec![1.0, 2.0]),
            b1: DVector::zeros(2),
            sigma_lambda: DMatrix::identity(2, 2),
        };
        let out = tweedie(&ss, &fit_parametric(&ss, &prior).unwrap(), None).unwrap();
        assert_eq!(out.lambda_tilde, ss.lambda_hat);
    }

    #[test]
    fn noise_free_sufficient_stats_are_exact() {
        let mut spec = DgpSpec { n_units: 40, ..lookup_design("case3-nonnormal-crc-corr").unwrap() };
        // sigma2_U must stay positive; 1e-300 leaves no visible noise
        spec.theta.sigma2_u = 1e-300;
        spec.theta.sigma2_eps = 0.0;
        let sim = simulate(&spec).unwrap();
        let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
        assert!((&ss.lambda_hat - sim.true_lambda()).amax() < 1e-10);
    }

    #[test]
    fn truncation_only_touches_large_units() {
        let spec = DgpSpec { n_units: 300, ..lookup_design("case2-nonnormal-crc-indep").unwrap() };
        let sim = simulate(&spec).unwrap();
        let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
        let be = fit_kernel(&ss, None).unwrap();
        let free = tweedie(&ss, &be, None).unwrap();
        let c = 3.5;
        let cut = tweedie(&ss, &be, Some(c)).unwrap();
        let mut changed = 0;
        for i in 0..ss.n_units() {
            let a = free.lambda_tilde.row(i);
            let b = cut.lambda_tilde.row(i);
            if a.norm() > c {
                changed += 1;
                assert!((b.norm() - c).abs() < 1e-12);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(changed, cut.truncation_count);
        assert!(changed > 0);
    }

    #[test]
    fn trajectories_follow_recursion() {
        let spec = DgpSpec { n_units: 50, ..lookup_design("case4-normal-crc-corr").unwrap() };
        let sim = simulate(&spec).unwrap();
        let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
        let out = tweedie(&ss, &fit_kernel(&ss, None).unwrap(), None).unwrap();
        let r = &spec.theta.rho_delta;
        for i in 0..50 {
            let d = out.trajectories.row(i);
            assert!((d[0] - out.lambda_tilde[(i, 1)]).abs() < 1e-12);
            assert!((d[1] - out.lambda_tilde[(i, 2)]).abs() < 1e-12);
            for j in 2..d.len() {
                assert!((d[j] - r[0] * d[j - 1] - r[1] * d[j - 2]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn risk_of_truth_is_zero() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(compound_risk(&m, &m).unwrap(), 0.0);
        assert!(compound_risk(&m, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn backend_names_roundtrip() {
        for k in BackendKind::ALL {
            assert_eq!(k.as_str().parse::<BackendKind>().unwrap(), k);
        }
        assert!("ridge".parse::<BackendKind>().is_err());
    }
}
