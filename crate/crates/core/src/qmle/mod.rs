//! Gaussian marginal quasi-maximum likelihood for the common parameters.
//!
//! Integrating `lambda_i | Y_i0 ~ N(b0 + b1 Y_i0, Sigma_lambda)` out of the
//! outcome recursion gives
//!
//! ```text
//! Y_i,1:T | Y_i0 ~ N(mu_i, Omega)
//! mu_i  = A Y_i0 + Wt (b0 + b1 Y_i0)
//! Omega = B Sigma_U B' + Wt Sigma_lambda Wt',   Wt = B W
//! ```
//!
//! with `A = (rho, .., rho^T)'` and `B[s, t] = rho^(s-t)`. Under common timing
//! `Omega` is shared by all units, so the log-likelihood depends on the data
//! only through the second-moment matrix of `(1, Y_i0, Y_i1, .., Y_iT)`.
//!
//! The parameter vector `eta` is kept on its natural scale everywhere outside
//! the optimizer: `(rho_Y, rho_delta, sigma2_U, sigma2_eps, b0, b1,
//! vech(Sigma_lambda))`. The optimizer works in unconstrained coordinates
//! (`atanh` for the autoregressive coefficients, `ln` for variances and a
//! log-diagonal Cholesky factor for `Sigma_lambda`).

mod optim;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, log_det, symmetrize, unvech, vech, vech_indices};
use crate::model::{
    build_a, build_b, build_error_cov, build_w, effect_representation, transformed_outcomes, CommonParams, EventDesign,
    PanelData, PriorParams,
};

pub use optim::{minimize, num_gradient, num_hessian, BfgsOptions, BfgsOutcome};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Index map of the natural parameter vector for a given AR order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub ar_order: usize,
}

impl ParamLayout {
    pub fn new(ar_order: usize) -> Self {
        Self { ar_order }
    }

    pub fn dim_lambda(&self) -> usize {
        1 + self.ar_order
    }

    pub fn len(&self) -> usize {
        let d = self.dim_lambda();
        3 + self.ar_order + 2 * d + d * (d + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rho_y(&self) -> usize {
        0
    }

    pub fn rho_delta(&self, m: usize) -> usize {
        1 + m
    }

    pub fn sigma2_u(&self) -> usize {
        1 + self.ar_order
    }

    pub fn sigma2_eps(&self) -> usize {
        2 + self.ar_order
    }

    pub fn b0(&self, k: usize) -> usize {
        3 + self.ar_order + k
    }

    pub fn b1(&self, k: usize) -> usize {
        3 + self.ar_order + self.dim_lambda() + k
    }

    /// Position of `Sigma_lambda[r, c]` (either triangle).
    pub fn sigma_lambda(&self, r: usize, c: usize) -> usize {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        3 + self.ar_order + 2 * self.dim_lambda() + r * (r + 1) / 2 + c
    }

    fn lambda_name(k: usize) -> String {
        if k == 0 {
            "alpha".into()
        } else {
            format!("delta{}", k - 1)
        }
    }

    pub fn names(&self) -> Vec<String> {
        let d = self.dim_lambda();
        let mut out = vec!["rho_Y".to_string()];
        out.extend((1..=self.ar_order).map(|m| format!("rho_delta{m}")));
        out.push("sigma2_U".into());
        out.push("sigma2_eps".into());
        out.extend((0..d).map(|k| format!("b0_{}", Self::lambda_name(k))));
        out.extend((0..d).map(|k| format!("b1_{}", Self::lambda_name(k))));
        out.extend(
            vech_indices(d)
                .into_iter()
                .map(|(r, c)| format!("Sigma_lambda_{}_{}", Self::lambda_name(r), Self::lambda_name(c))),
        );
        out
    }
}

/// Full parameter `eta = (theta, b0, b1, Sigma_lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub theta: CommonParams,
    pub prior: PriorParams,
}

impl Eta {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = vec![self.theta.rho_y];
        v.extend_from_slice(&self.theta.rho_delta);
        v.push(self.theta.sigma2_u);
        v.push(self.theta.sigma2_eps);
        v.extend(self.prior.b0.iter());
        v.extend(self.prior.b1.iter());
        v.extend(vech(&self.prior.sigma_lambda));
        DVector::from_vec(v)
    }

    /// Inverse of [`Eta::to_vector`]. No PSD check on `Sigma_lambda`, so that
    /// finite-difference perturbations stay representable.
    pub fn from_vector(v: &DVector<f64>, layout: ParamLayout) -> Self {
        let p = layout.ar_order;
        let d = layout.dim_lambda();
        let theta = CommonParams {
            rho_y: v[layout.rho_y()],
            rho_delta: (0..p).map(|m| v[layout.rho_delta(m)]).collect(),
            sigma2_u: v[layout.sigma2_u()],
            sigma2_eps: v[layout.sigma2_eps()],
        };
        let b0 = DVector::from_fn(d, |k, _| v[layout.b0(k)]);
        let b1 = DVector::from_fn(d, |k, _| v[layout.b1(k)]);
        let start = layout.sigma_lambda(0, 0);
        let sigma = unvech(&v.as_slice()[start..], d);
        Self { theta, prior: PriorParams { b0, b1, sigma_lambda: sigma } }
    }
}

/// Everything about `(mu_i, Omega)` that does not depend on the unit.
#[derive(Debug, Clone)]
pub struct MarginalModel {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub w_tilde: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_det: f64,
    /// `r_i = K z_i` with `z_i = (1, Y_i0, Y_i1, .., Y_iT)`.
    residual_map: DMatrix<f64>,
}

impl MarginalModel {
    pub fn new(eta: &Eta, design: &EventDesign, periods: usize) -> Result<Self> {
        let theta = &eta.theta;
        if !(theta.sigma2_u > 0.0) || !(theta.sigma2_eps >= 0.0) {
            return Err(Error::InvalidParameter("variances out of range".into()));
        }
        let rep = effect_representation(&theta.rho_delta, design.horizon, design.ar_order)?;
        let w = build_w(design, periods, &rep);
        let sigma_u = build_error_cov(design, periods, theta, &rep);
        let a = build_a(theta.rho_y, periods);
        let b = build_b(theta.rho_y, periods);
        let w_tilde = &b * &w;
        let omega =
            symmetrize(&(&b * sigma_u * b.transpose() + &w_tilde * &eta.prior.sigma_lambda * w_tilde.transpose()));
        let chol = cholesky(&omega, "Omega")?;
        let log_det = log_det(&chol);
        if !log_det.is_finite() {
            return Err(Error::NotPositiveDefinite("Omega".into()));
        }
        let mut k = DMatrix::zeros(periods, periods + 2);
        k.column_mut(0).copy_from(&(-(&w_tilde * &eta.prior.b0)));
        k.column_mut(1).copy_from(&(-(&a + &w_tilde * &eta.prior.b1)));
        for t in 0..periods {
            k[(t, t + 2)] = 1.0;
        }
        Ok(Self { a, b, w, w_tilde, omega, chol_l: chol.l(), log_det, residual_map: k })
    }

    pub fn mean(&self, eta: &Eta, y0: f64) -> DVector<f64> {
        &self.a * y0 + &self.w_tilde * eta.prior.mean(y0)
    }

    /// `L^{-1} K`, the whitened residual map.
    fn whitened_map(&self) -> DMatrix<f64> {
        self.chol_l.solve_lower_triangular(&self.residual_map).expect("Omega factor is nonsingular")
    }

    pub fn log_density(&self, y: &DVector<f64>, y0: f64, eta: &Eta) -> f64 {
        let r = y - self.mean(eta, y0);
        let z = self.chol_l.solve_lower_triangular(&r).expect("Omega factor is nonsingular");
        -0.5 * (y.len() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }
}

/// `(mu_i, Omega)` for a unit with initial outcome `y0`.
pub fn marginal_moments(
    eta: &Eta,
    y0: f64,
    design: &EventDesign,
    periods: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = MarginalModel::new(eta, design, periods)?;
    Ok((m.mean(eta, y0), m.omega))
}

/// Sufficient second moments of a panel for the marginal likelihood.
#[derive(Debug, Clone)]
pub struct PanelMoments {
    n: usize,
    /// `sum_i z_i z_i' / n`
    mean_outer: DMatrix<f64>,
    z: DMatrix<f64>,
}

impl PanelMoments {
    pub fn new(panel: &PanelData) -> Self {
        let y = panel.outcomes();
        let n = panel.n_units();
        let z = DMatrix::from_fn(n, y.ncols() + 1, |i, c| if c == 0 { 1.0 } else { y[(i, c - 1)] });
        let mean_outer = symmetrize(&(z.transpose() * &z)) / n as f64;
        Self { n, mean_outer, z }
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn periods(&self) -> usize {
        self.z.ncols() - 2
    }
}

/// Mean log-likelihood `l_N / N` from the panel moments.
pub fn mean_loglik(moments: &PanelMoments, design: &EventDesign, eta: &Eta) -> Result<f64> {
    let periods = moments.periods();
    let model = MarginalModel::new(eta, design, periods)?;
    let x = model.whitened_map();
    let quad = (&x * &moments.mean_outer).component_mul(&x).sum();
    Ok(-0.5 * (periods as f64 * LN_2PI + model.log_det + quad))
}

pub fn quasi_loglik(panel: &PanelData, design: &EventDesign, eta: &Eta) -> Result<f64> {
    let moments = PanelMoments::new(panel);
    Ok(mean_loglik(&moments, design, eta)? * panel.n_units() as f64)
}

/// Per-unit log-likelihood contributions `l_i`.
pub fn unit_logliks(moments: &PanelMoments, design: &EventDesign, eta: &Eta) -> Result<DVector<f64>> {
    let periods = moments.periods();
    let model = MarginalModel::new(eta, design, periods)?;
    let x = model.whitened_map();
    let r = &moments.z * x.transpose();
    let c = -0.5 * (periods as f64 * LN_2PI + model.log_det);
    Ok(DVector::from_fn(moments.n, |i, _| c - 0.5 * r.row(i).norm_squared()))
}

/// Map from unconstrained optimizer coordinates to the natural parameter.
#[derive(Debug, Clone, Copy)]
pub struct Reparam {
    pub layout: ParamLayout,
}

impl Reparam {
    pub fn to_natural(&self, u: &DVector<f64>) -> DVector<f64> {
        let l = self.layout;
        let p = l.ar_order;
        let d = l.dim_lambda();
        let mut v = u.clone();
        v[l.rho_y()] = u[l.rho_y()].tanh();
        for m in 0..p {
            v[l.rho_delta(m)] = u[l.rho_delta(m)].tanh();
        }
        v[l.sigma2_u()] = u[l.sigma2_u()].exp();
        v[l.sigma2_eps()] = u[l.sigma2_eps()].exp();
        let start = l.sigma_lambda(0, 0);
        let mut chol = DMatrix::zeros(d, d);
        for (k, (r, c)) in vech_indices(d).into_iter().enumerate() {
            let x = u[start + k];
            chol[(r, c)] = if r == c { x.exp() } else { x };
        }
        let sigma = &chol * chol.transpose();
        for (k, (r, c)) in vech_indices(d).into_iter().enumerate() {
            v[start + k] = sigma[(r, c)];
        }
        v
    }

    /// Inverse map; `Sigma_lambda` must be positive definite.
    pub fn to_unconstrained(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.layout;
        let p = l.ar_order;
        let d = l.dim_lambda();
        let mut u = v.clone();
        let at = |x: f64| x.clamp(-0.999_999, 0.999_999).atanh();
        u[l.rho_y()] = at(v[l.rho_y()]);
        for m in 0..p {
            u[l.rho_delta(m)] = at(v[l.rho_delta(m)]);
        }
        u[l.sigma2_u()] = v[l.sigma2_u()].ln();
        u[l.sigma2_eps()] = v[l.sigma2_eps()].max(1e-12).ln();
        let start = l.sigma_lambda(0, 0);
        let sigma = unvech(&v.as_slice()[start..], d);
        let chol = nalgebra::Cholesky::new(sigma)
            .ok_or_else(|| Error::NotPositiveDefinite("Sigma_lambda starting value".into()))?
            .l();
        for (k, (r, c)) in vech_indices(d).into_iter().enumerate() {
            u[start + k] = if r == c { chol[(r, c)].ln() } else { chol[(r, c)] };
        }
        Ok(u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QmleOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Number of optimizer starts: the moment-based start plus perturbed copies.
    pub starts: usize,
    pub perturb_sd: f64,
    pub seed: u64,
    pub grad_step: f64,
    pub hess_step: f64,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            grad_tol: 1e-6,
            starts: 5,
            perturb_sd: 0.3,
            seed: 0x5eed,
            grad_step: 1e-6,
            hess_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    /// Gradient norm of the mean log-likelihood in optimizer coordinates.
    pub grad_norm: f64,
    pub starts: usize,
    pub converged_starts: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QmleResult {
    pub layout: ParamLayout,
    pub design: EventDesign,
    pub n_units: usize,
    pub periods: usize,
    pub eta: Eta,
    pub loglik: f64,
    /// `G = sum_i s_i s_i' / N`.
    pub score_outer: DMatrix<f64>,
    /// `H = -Hess(l_N) / N`.
    pub neg_hessian: DMatrix<f64>,
    /// `H^{-1} G H^{-1} / N`.
    pub sandwich_cov: DMatrix<f64>,
    pub convergence: Convergence,
}

impl QmleResult {
    pub fn eta_vector(&self) -> DVector<f64> {
        self.eta.to_vector()
    }

    pub fn std_errors(&self) -> DVector<f64> {
        self.sandwich_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn names(&self) -> Vec<String> {
        self.layout.names()
    }
}

/// Per-unit scores `s_i = grad l_i(eta)` by central differences on the
/// natural scale; returns an `N x dim` matrix.
pub fn unit_scores(moments: &PanelMoments, design: &EventDesign, eta: &Eta, rel_step: f64) -> Result<DMatrix<f64>> {
    let layout = ParamLayout::new(design.ar_order);
    let v = eta.to_vector();
    let mut scores = DMatrix::zeros(moments.n_units(), v.len());
    let mut vp = v.clone();
    for k in 0..v.len() {
        let h = rel_step * v[k].abs().max(1.0);
        vp[k] = v[k] + h;
        let lp = unit_logliks(moments, design, &Eta::from_vector(&vp, layout))?;
        vp[k] = v[k] - h;
        let lm = unit_logliks(moments, design, &Eta::from_vector(&vp, layout))?;
        vp[k] = v[k];
        scores.column_mut(k).copy_from(&((lp - lm) / (2.0 * h)));
    }
    Ok(scores)
}

/// Sandwich pieces at `eta` on the natural scale: `(G, H, H^{-1} G H^{-1} / N)`.
pub fn sandwich(
    moments: &PanelMoments,
    design: &EventDesign,
    eta: &Eta,
    opts: &QmleOptions,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let layout = ParamLayout::new(design.ar_order);
    let n = moments.n_units() as f64;
    let scores = unit_scores(moments, design, eta, opts.grad_step)?;
    let g = symmetrize(&(scores.transpose() * &scores)) / n;
    let f = |v: &DVector<f64>| mean_loglik(moments, design, &Eta::from_vector(v, layout)).unwrap_or(f64::NAN);
    let h = symmetrize(&(-num_hessian(&f, &eta.to_vector(), opts.hess_step)));
    let dim = h.nrows();
    let scale = h.diagonal().amax().max(1.0);
    let h_inv = (&h + DMatrix::identity(dim, dim) * (1e-10 * scale))
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("negative Hessian".into()))?;
    let cov = symmetrize(&(&h_inv * &g * &h_inv)) / n;
    Ok((g, h, cov))
}

/// Method-of-moments starting values `(rho_Y, rho_delta)`.
///
/// `rho_Y` solves the pre-treatment moment for first differences instrumented
/// by the twice-lagged level, after removing cross-sectional period means:
/// `sum_i sum_{t=2}^{t0-1} (dY_it - rho dY_i,t-1) Y_i,t-2 = 0`. The effect
/// persistence is the lag-one autocovariance ratio of post-treatment
/// transformed outcomes with each unit's pre-treatment mean removed; higher
/// AR coefficients start at zero.
pub fn moment_init(panel: &PanelData, design: &EventDesign) -> Result<(f64, Vec<f64>)> {
    design.validate(panel.periods())?;
    let y = panel.outcomes();
    let n = panel.n_units();
    let y0 = panel.initial();
    let m0 = y0.mean();
    let var0 = y0.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n as f64;
    if !(var0 > 1e-12 * (1.0 + m0 * m0)) {
        return Err(Error::Degenerate("Var(Y_i0) is zero".into()));
    }
    let col_mean = |t: usize| y.column(t).mean();
    let mut num = 0.0;
    let mut den = 0.0;
    for t in 2..design.t0 {
        let (mt, mt1, mt2) = (col_mean(t), col_mean(t - 1), col_mean(t - 2));
        for i in 0..n {
            let dy = (y[(i, t)] - mt) - (y[(i, t - 1)] - mt1);
            let dy_lag = (y[(i, t - 1)] - mt1) - (y[(i, t - 2)] - mt2);
            let inst = y[(i, t - 2)] - mt2;
            num += dy * inst;
            den += dy_lag * inst;
        }
    }
    if !(den.abs() > 1e-12 * n as f64) {
        return Err(Error::Degenerate("pre-treatment moment for rho_Y has no variation".into()));
    }
    let rho_y = (num / den).clamp(-0.95, 0.95);

    let yt = transformed_outcomes(panel, rho_y);
    let last = design.t0 + design.horizon;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let pre = (1..design.t0).map(|t| yt[(i, t - 1)]).sum::<f64>() / (design.t0 - 1) as f64;
        for t in design.t0 + 1..=last {
            let cur = yt[(i, t - 1)] - pre;
            let lag = yt[(i, t - 2)] - pre;
            num += cur * lag;
            den += lag * lag;
        }
    }
    if !(den > 0.0) {
        return Err(Error::Degenerate("post-treatment outcomes have no variation".into()));
    }
    let mut rho_delta = vec![0.0; design.ar_order];
    rho_delta[0] = (num / den).clamp(-0.95, 0.95);
    Ok((rho_y, rho_delta))
}

/// Starting value for the full `eta` given autoregressive coefficients:
/// per-unit least squares for `lambda`, OLS of `lambda_hat` on `Y0`, and the
/// residual covariance net of the sampling noise.
pub fn starting_eta(panel: &PanelData, design: &EventDesign, rho_y: f64, rho_delta: &[f64]) -> Result<Eta> {
    let periods = panel.periods();
    let n = panel.n_units();
    let d = design.dim_lambda();
    let rep = effect_representation(rho_delta, design.horizon, design.ar_order)?;
    let w = build_w(design, periods, &rep);
    let wtw = w.transpose() * &w;
    let w_plus =
        wtw.clone().try_inverse().ok_or_else(|| Error::InvalidDesign("W'W is singular".into()))? * w.transpose();
    let yt = transformed_outcomes(panel, rho_y);
    let lam = &yt * w_plus.transpose();
    let fitted = &lam * w.transpose();
    let resid = &yt - fitted;
    let dof = (n * (periods - d)).max(1) as f64;
    let sigma2_u = (resid.norm_squared() / dof).max(1e-4);
    let theta = CommonParams { rho_y, rho_delta: rho_delta.to_vec(), sigma2_u, sigma2_eps: sigma2_u };

    let y0 = panel.initial();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { y0[i] });
    let xtx_inv = (x.transpose() * &x).try_inverse().ok_or_else(|| Error::Degenerate("Var(Y_i0) is zero".into()))?;
    let coef = xtx_inv * x.transpose() * &lam;
    let res = &lam - &x * &coef;
    let s = symmetrize(&(res.transpose() * &res)) / n as f64;
    let sigma_v = &w_plus * build_error_cov(design, periods, &theta, &rep) * w_plus.transpose();
    let mut sigma = crate::linalg::clip_psd(&(&s - sigma_v));
    for k in 0..d {
        sigma[(k, k)] += 0.05 * s[(k, k)] + 1e-4;
    }
    Ok(Eta {
        theta,
        prior: PriorParams { b0: coef.row(0).transpose(), b1: coef.row(1).transpose(), sigma_lambda: sigma },
    })
}

/// Maximizes the marginal quasi-log-likelihood and computes the sandwich
/// covariance at the optimum.
pub fn fit(panel: &PanelData, design: &EventDesign, opts: &QmleOptions) -> Result<QmleResult> {
    let periods = panel.periods();
    design.validate(periods)?;
    let layout = ParamLayout::new(design.ar_order);
    let reparam = Reparam { layout };
    let moments = PanelMoments::new(panel);

    let (rho_y, rho_delta) = moment_init(panel, design)?;
    let start = starting_eta(panel, design, rho_y, &rho_delta)?;
    let u0 = reparam.to_unconstrained(&start.to_vector())?;

    let objective = |u: &DVector<f64>| {
        let v = reparam.to_natural(u);
        match mean_loglik(&moments, design, &Eta::from_vector(&v, layout)) {
            Ok(l) if l.is_finite() => -l,
            _ => f64::INFINITY,
        }
    };
    let bfgs = BfgsOptions { max_iter: opts.max_iter, grad_tol: opts.grad_tol, grad_step: opts.grad_step };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<BfgsOutcome> = None;
    let mut converged_starts = 0;
    let mut iterations = 0;
    for s in 0..opts.starts.max(1) {
        let init =
            if s == 0 { u0.clone() } else { u0.map(|x| x + opts.perturb_sd * rng.sample::<f64, _>(StandardNormal)) };
        let out = minimize(&objective, init, &bfgs);
        iterations += out.iterations;
        if out.converged {
            converged_starts += 1;
        }
        let better = match &best {
            None => true,
            Some(b) => (out.converged && !b.converged) || (out.converged == b.converged && out.value < b.value),
        };
        if better && out.value.is_finite() {
            best = Some(out);
        }
    }
    let best = best.ok_or_else(|| Error::NotPositiveDefinite("no start produced a finite likelihood".into()))?;
    let eta = Eta::from_vector(&reparam.to_natural(&best.x), layout);
    let eta = Eta {
        prior: PriorParams::new(eta.prior.b0.clone(), eta.prior.b1.clone(), symmetrize(&eta.prior.sigma_lambda))?,
        ..eta
    };
    let loglik = -best.value * moments.n_units() as f64;
    let (g, h, cov) = sandwich(&moments, design, &eta, opts)?;
    let result = QmleResult {
        layout,
        design: *design,
        n_units: moments.n_units(),
        periods,
        eta,
        loglik,
        score_outer: g,
        neg_hessian: h,
        sandwich_cov: cov,
        convergence: Convergence {
            iterations,
            grad_norm: best.grad.norm(),
            starts: opts.starts.max(1),
            converged_starts,
            converged: best.converged,
        },
    };
    if !best.converged {
        return Err(Error::NoConvergence {
            restarts: opts.starts.max(1),
            grad_norm: result.convergence.grad_norm,
            best: Box::new(result),
        });
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{lookup_design, simulate, DgpSpec};

    fn eta_for(spec: &DgpSpec) -> Eta {
        let tp = crate::simulate::TruePrior::new(spec.prior.clone()).unwrap();
        Eta {
            theta: spec.theta.clone(),
            prior: PriorParams {
                b0: DVector::from_column_slice(&spec.prior.b0),
                b1: DVector::from_column_slice(&spec.prior.crc_slope),
                sigma_lambda: tp.base_cov(),
            },
        }
    }

    #[test]
    fn layout_names_and_length() {
        let l = ParamLayout::new(2);
        assert_eq!(l.len(), 17);
        let names = l.names();
        assert_eq!(names.len(), 17);
        assert_eq!(names[l.b1(1)], "b1_delta0");
        assert_eq!(names[l.sigma_lambda(1, 0)], "Sigma_lambda_delta0_alpha");
        assert_eq!(names[l.sigma_lambda(0, 2)], "Sigma_lambda_delta1_alpha");
        assert_eq!(ParamLayout::new(1).len(), 11);
    }

    #[test]
    fn zero_persistence_moments_reduce_to_error_cov() {
        let design = EventDesign::new(3, 2, 1);
        let eta = Eta {
            theta: CommonParams { rho_y: 0.0, rho_delta: vec![0.0], sigma2_u: 0.7, sigma2_eps: 0.3 },
            prior: PriorParams { b0: DVector::zeros(2), b1: DVector::zeros(2), sigma_lambda: DMatrix::zeros(2, 2) },
        };
        let (mu, omega) = marginal_moments(&eta, 1.3, &design, 6).unwrap();
        assert_eq!(mu, DVector::zeros(6));
        let rep = effect_representation(&[0.0], 2, 1).unwrap();
        assert_eq!(omega, build_error_cov(&design, 6, &eta.theta, &rep));
    }

    #[test]
    fn moment_and_unit_paths_agree() {
        let spec = DgpSpec { n_units: 60, ..lookup_design("case3-nonnormal-crc-corr").unwrap() };
        let sim = simulate(&spec).unwrap();
        let eta = eta_for(&spec);
        let moments = PanelMoments::new(&sim.panel);
        let total = quasi_loglik(&sim.panel, &spec.design, &eta).unwrap();
        let units = unit_logliks(&moments, &spec.design, &eta).unwrap();
        let model = MarginalModel::new(&eta, &spec.design, spec.periods).unwrap();
        let y = sim.panel.outcomes();
        let brute: f64 = (0..60)
            .map(|i| {
                let yi = DVector::from_iterator(spec.periods, y.row(i).iter().skip(1).cloned());
                model.log_density(&yi, y[(i, 0)], &eta)
            })
            .sum();
        assert!((total - brute).abs() < 1e-8 * brute.abs());
        assert!((units.sum() - brute).abs() < 1e-8 * brute.abs());
    }

    #[test]
    fn reparam_roundtrip() {
        let spec = lookup_design("case4-normal-crc-corr").unwrap();
        let v = eta_for(&spec).to_vector();
        let r = Reparam { layout: ParamLayout::new(2) };
        let back = r.to_natural(&r.to_unconstrained(&v).unwrap());
        assert!((back - v).amax() < 1e-12);
    }

    #[test]
    fn moment_init_guards_degenerate_y0() {
        let spec = DgpSpec { n_units: 50, ..lookup_design("case1-normal-rc-indep").unwrap() };
        let sim = simulate(&spec).unwrap();
        let mut y = sim.panel.outcomes().clone();
        y.column_mut(0).fill(0.5);
        let panel = PanelData::new(y, None).unwrap();
        match moment_init(&panel, &spec.design) {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("Y_i0")),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn moment_init_zero_persistence() {
        let mut spec = DgpSpec { n_units: 20_000, seed: 4, ..lookup_design("case2-normal-rc-indep").unwrap() };
        spec.theta.rho_y = 0.0;
        let sim = simulate(&spec).unwrap();
        let (rho_y, _) = moment_init(&sim.panel, &spec.design).unwrap();
        assert!(rho_y.abs() < 0.05, "{rho_y}");
    }
}
