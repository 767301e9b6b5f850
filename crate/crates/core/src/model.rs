//! Panel, design and parameter types, plus the deterministic matrices shared
//! by estimation, simulation and shrinkage.
//!
//! Time runs over `0..=T`; the treatment hits every unit at `t0` and the
//! effect at event time `j = t - t0` (for `0 <= j <= J`) is `delta_ij`.
//! The effect process is AR(p) with `p` free initial effects
//! `delta_i0 .. delta_i,p-1` and Gaussian shocks from horizon `p` onwards.
//! Row `t` of the design matrices corresponds to period `t = 1..=T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::powers;

/// Balanced panel of outcomes `Y[i, t]`, `t = 0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelData {
    outcomes: DMatrix<f64>,
    unit_labels: Option<Vec<String>>,
}

impl PanelData {
    pub fn new(outcomes: DMatrix<f64>, unit_labels: Option<Vec<String>>) -> Result<Self> {
        if outcomes.nrows() < 2 {
            return Err(Error::InvalidPanel(format!("need at least 2 units, got {}", outcomes.nrows())));
        }
        if outcomes.ncols() < 2 {
            return Err(Error::InvalidPanel("need at least periods 0 and 1 (T >= 1)".into()));
        }
        if let Some((r, c)) =
            outcomes.iter().position(|v| !v.is_finite()).map(|k| (k % outcomes.nrows(), k / outcomes.nrows()))
        {
            return Err(Error::InvalidPanel(format!("missing or non-finite outcome at unit {r}, time {c}")));
        }
        if let Some(labels) = &unit_labels {
            if labels.len() != outcomes.nrows() {
                return Err(Error::Dimension(format!("{} labels for {} units", labels.len(), outcomes.nrows())));
            }
        }
        Ok(Self { outcomes, unit_labels })
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    /// Number of periods after the initial one (`T`).
    pub fn periods(&self) -> usize {
        self.outcomes.ncols() - 1
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    pub fn unit_labels(&self) -> Option<&[String]> {
        self.unit_labels.as_deref()
    }

    pub fn label(&self, i: usize) -> String {
        match &self.unit_labels {
            Some(l) => l[i].clone(),
            None => (i + 1).to_string(),
        }
    }

    pub fn initial(&self) -> DVector<f64> {
        self.outcomes.column(0).into_owned()
    }
}

/// How the effect process loads on the quasi-differenced outcome.
///
/// `Level` puts `delta_ij` itself into period `t0 + j`, which is the model the
/// simulator draws from. `Cumulative` puts `sum_{k<=j} delta_ik` there; for
/// `T = 4, t0 = 3, J = 1` this yields the design row `(1, 1 + rho_delta)` at
/// `t = 4`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectLoading {
    #[default]
    Level,
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventDesign {
    pub t0: usize,
    #[serde(rename = "J")]
    pub horizon: usize,
    #[serde(rename = "p")]
    pub ar_order: usize,
    #[serde(default)]
    pub loading: EffectLoading,
}

impl EventDesign {
    pub fn new(t0: usize, horizon: usize, ar_order: usize) -> Self {
        Self { t0, horizon, ar_order, loading: EffectLoading::Level }
    }

    pub fn with_loading(mut self, loading: EffectLoading) -> Self {
        self.loading = loading;
        self
    }

    /// Dimension of `lambda_i = (alpha_i, delta_i0, .., delta_i,p-1)`.
    pub fn dim_lambda(&self) -> usize {
        1 + self.ar_order
    }

    pub fn validate(&self, periods: usize) -> Result<()> {
        if !(1..=2).contains(&self.ar_order) {
            return Err(Error::InvalidDesign(format!("AR order p = {} (supported: 1, 2)", self.ar_order)));
        }
        if self.t0 < 3 {
            return Err(Error::InvalidDesign(format!("t0 = {} but t0 >= 3 is required", self.t0)));
        }
        if self.horizon < 1 || self.t0 + self.horizon > periods {
            return Err(Error::InvalidDesign(format!(
                "need T - t0 >= J >= 1, got T = {periods}, t0 = {}, J = {}",
                self.t0, self.horizon
            )));
        }
        if self.ar_order > self.horizon + 1 {
            return Err(Error::InvalidDesign(format!("p = {} exceeds J + 1 = {}", self.ar_order, self.horizon + 1)));
        }
        Ok(())
    }

    /// Event time of period `t`, if it lies in the effect window `0..=J`.
    pub fn event_time(&self, t: usize) -> Option<usize> {
        (t >= self.t0 && t - self.t0 <= self.horizon).then(|| t - self.t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommonParams {
    #[serde(rename = "rho_Y")]
    pub rho_y: f64,
    pub rho_delta: Vec<f64>,
    #[serde(rename = "sigma2_U")]
    pub sigma2_u: f64,
    pub sigma2_eps: f64,
}

impl CommonParams {
    pub fn validate(&self, design: &EventDesign) -> Result<()> {
        if self.rho_delta.len() != design.ar_order {
            return Err(Error::Dimension(format!(
                "rho_delta has length {} but p = {}",
                self.rho_delta.len(),
                design.ar_order
            )));
        }
        if !(self.sigma2_u > 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2_U = {} must be positive", self.sigma2_u)));
        }
        if !(self.sigma2_eps >= 0.0) {
            return Err(Error::InvalidParameter(format!("sigma2_eps = {} must be >= 0", self.sigma2_eps)));
        }
        Ok(())
    }
}

/// Working Gaussian regression prior `lambda | Y0 ~ N(b0 + b1 Y0, Sigma_lambda)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub b0: DVector<f64>,
    pub b1: DVector<f64>,
    pub sigma_lambda: DMatrix<f64>,
}

impl PriorParams {
    /// Checks symmetry (1e-10) and PSD-ness (eigenvalues >= -1e-10, clipped to 0).
    pub fn new(b0: DVector<f64>, b1: DVector<f64>, sigma_lambda: DMatrix<f64>) -> Result<Self> {
        let d = b0.len();
        if b1.len() != d || sigma_lambda.nrows() != d || sigma_lambda.ncols() != d {
            return Err(Error::Dimension("prior parameter dimensions disagree".into()));
        }
        let asym = (&sigma_lambda - sigma_lambda.transpose()).abs().max();
        if asym > 1e-10 {
            return Err(Error::InvalidParameter(format!("Sigma_lambda not symmetric (max gap {asym:e})")));
        }
        let min_eig = crate::linalg::min_eigenvalue(&sigma_lambda);
        if min_eig < -1e-10 {
            return Err(Error::InvalidParameter(format!("Sigma_lambda not PSD (min eigenvalue {min_eig:e})")));
        }
        let sigma_lambda = if min_eig < 0.0 {
            crate::linalg::clip_psd(&sigma_lambda)
        } else {
            crate::linalg::symmetrize(&sigma_lambda)
        };
        Ok(Self { b0, b1, sigma_lambda })
    }

    pub fn mean(&self, y0: f64) -> DVector<f64> {
        &self.b0 + &self.b1 * y0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEffects {
    pub alpha: f64,
    pub delta_init: Vec<f64>,
}

impl UnitEffects {
    pub fn as_lambda(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(1 + self.delta_init.len());
        v.push(self.alpha);
        v.extend_from_slice(&self.delta_init);
        DVector::from_vec(v)
    }
}

/// Moving-average representation of the AR(p) effect process over horizons
/// `0..=J`: `delta_j = C[j, .] delta_init + Psi[j, .] eps_{p..J}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectRepresentation {
    pub init_coeffs: DMatrix<f64>,
    pub shock_coeffs: DMatrix<f64>,
}

impl EffectRepresentation {
    pub fn horizon(&self) -> usize {
        self.init_coeffs.nrows() - 1
    }

    pub fn ar_order(&self) -> usize {
        self.init_coeffs.ncols()
    }

    /// Effect trajectory `delta_0..delta_J` implied by the free initials and
    /// the shocks at horizons `p..=J`.
    pub fn trajectory(&self, delta_init: &[f64], shocks: &[f64]) -> Vec<f64> {
        let c = &self.init_coeffs;
        let psi = &self.shock_coeffs;
        (0..c.nrows())
            .map(|j| {
                let a: f64 = (0..c.ncols()).map(|m| c[(j, m)] * delta_init[m]).sum();
                let b: f64 = (0..psi.ncols()).map(|k| psi[(j, k)] * shocks[k]).sum();
                a + b
            })
            .collect()
    }

    /// Loadings of the initials and shocks on the quasi-differenced outcome
    /// at event time `j`, after applying the design's loading convention.
    pub fn loadings(&self, loading: EffectLoading) -> (DMatrix<f64>, DMatrix<f64>) {
        match loading {
            EffectLoading::Level => (self.init_coeffs.clone(), self.shock_coeffs.clone()),
            EffectLoading::Cumulative => (cumsum_rows(&self.init_coeffs), cumsum_rows(&self.shock_coeffs)),
        }
    }
}

fn cumsum_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for r in 1..m.nrows() {
        for c in 0..m.ncols() {
            out[(r, c)] += out[(r - 1, c)];
        }
    }
    out
}

pub fn effect_representation(rho_delta: &[f64], horizon: usize, ar_order: usize) -> Result<EffectRepresentation> {
    if rho_delta.len() != ar_order {
        return Err(Error::Dimension(format!("rho_delta has length {} but p = {ar_order}", rho_delta.len())));
    }
    if ar_order == 0 || horizon + 1 < ar_order {
        return Err(Error::InvalidDesign(format!("need J >= p - 1 >= 0, got J = {horizon}, p = {ar_order}")));
    }
    let n_shocks = horizon + 1 - ar_order;
    let mut c = DMatrix::zeros(horizon + 1, ar_order);
    let mut psi = DMatrix::zeros(horizon + 1, n_shocks);
    for j in 0..ar_order {
        c[(j, j)] = 1.0;
    }
    for j in ar_order..=horizon {
        for q in 1..=ar_order {
            let rho = rho_delta[q - 1];
            for m in 0..ar_order {
                c[(j, m)] += rho * c[(j - q, m)];
            }
            for k in 0..n_shocks {
                psi[(j, k)] += rho * psi[(j - q, k)];
            }
        }
        psi[(j, j - ar_order)] += 1.0;
    }
    Ok(EffectRepresentation { init_coeffs: c, shock_coeffs: psi })
}

/// `T x (1+p)` design matrix: an intercept for `alpha_i`, then the loadings
/// of the free initial effects.
pub fn build_w(design: &EventDesign, periods: usize, rep: &EffectRepresentation) -> DMatrix<f64> {
    let (c, _) = rep.loadings(design.loading);
    let p = rep.ar_order();
    let mut w = DMatrix::zeros(periods, 1 + p);
    for t in 1..=periods {
        w[(t - 1, 0)] = 1.0;
        if let Some(j) = design.event_time(t) {
            for m in 0..p {
                w[(t - 1, 1 + m)] = c[(j, m)];
            }
        }
    }
    w
}

/// Shock loading matrix `L` (`T x (J+1-p)`) of the composite error.
pub fn shock_loading(design: &EventDesign, periods: usize, rep: &EffectRepresentation) -> DMatrix<f64> {
    let (_, psi) = rep.loadings(design.loading);
    let mut l = DMatrix::zeros(periods, psi.ncols());
    for t in 1..=periods {
        if let Some(j) = design.event_time(t) {
            l.row_mut(t - 1).copy_from(&psi.row(j));
        }
    }
    l
}

/// Covariance of the composite error: `sigma2_U I + sigma2_eps L L'`.
pub fn build_error_cov(
    design: &EventDesign,
    periods: usize,
    theta: &CommonParams,
    rep: &EffectRepresentation,
) -> DMatrix<f64> {
    let l = shock_loading(design, periods, rep);
    DMatrix::identity(periods, periods) * theta.sigma2_u + (&l * l.transpose()) * theta.sigma2_eps
}

/// `(rho, rho^2, .., rho^T)'`.
pub fn build_a(rho_y: f64, periods: usize) -> DVector<f64> {
    DVector::from_iterator(periods, powers(rho_y, periods).into_iter().skip(1))
}

/// Lower-triangular `B[s, t] = rho^(s - t)` for `s >= t`.
pub fn build_b(rho_y: f64, periods: usize) -> DMatrix<f64> {
    let pw = powers(rho_y, periods);
    DMatrix::from_fn(periods, periods, |s, t| if s >= t { pw[s - t] } else { 0.0 })
}

/// `Y[i, t] - rho Y[i, t-1]` for `t = 1..=T`.
pub fn transformed_outcomes(panel: &PanelData, rho_y: f64) -> DMatrix<f64> {
    let y = panel.outcomes();
    let periods = panel.periods();
    DMatrix::from_fn(y.nrows(), periods, |i, t| y[(i, t + 1)] - rho_y * y[(i, t)])
}
