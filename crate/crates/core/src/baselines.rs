//! Homogeneous event-study comparators and the omitted-lag illustration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::model::{EventDesign, PanelData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventStudyFit {
    pub estimator: String,
    /// Event times `-L..=J` that appear in the sample, including the
    /// normalized `-1`.
    pub event_times: Vec<i64>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Unit-clustered covariance over `event_times` (zero row and column at `-1`).
    pub covariance: DMatrix<f64>,
    pub rho_y: Option<f64>,
    pub rho_y_se: Option<f64>,
    pub n_units: usize,
    pub periods: usize,
}

impl EventStudyFit {
    pub fn coefficient(&self, j: i64) -> Option<f64> {
        self.event_times.iter().position(|e| *e == j).map(|k| self.coefficients[k])
    }
}

/// OLS with unit-clustered covariance. `x` and `y` are stacked unit by unit,
/// `rows_per_unit` rows each.
pub struct ClusteredOls {
    pub coef: DVector<f64>,
    pub cov: DMatrix<f64>,
}

pub fn clustered_ols(x: &DMatrix<f64>, y: &DVector<f64>, rows_per_unit: usize) -> Result<ClusteredOls> {
    let xtx_inv = (x.transpose() * x)
        .try_inverse()
        .ok_or_else(|| Error::InvalidDesign("event-study regressors are collinear".into()))?;
    let coef = &xtx_inv * x.transpose() * y;
    let resid = y - x * &coef;
    let k = x.ncols();
    let mut meat = DMatrix::zeros(k, k);
    for start in (0..x.nrows()).step_by(rows_per_unit) {
        let xi = x.rows(start, rows_per_unit);
        let ui = resid.rows(start, rows_per_unit);
        let s = xi.transpose() * ui;
        meat += &s * s.transpose();
    }
    let cov = symmetrize(&(&xtx_inv * meat * &xtx_inv));
    Ok(ClusteredOls { coef, cov })
}

fn demean_within(m: &mut DMatrix<f64>, n_units: usize, rows_per_unit: usize) {
    for i in 0..n_units {
        for c in 0..m.ncols() {
            let mut block = m.view_mut((i * rows_per_unit, c), (rows_per_unit, 1));
            let mean = block.mean();
            block.add_scalar_mut(-mean);
        }
    }
}

fn event_study(panel: &PanelData, design: &EventDesign, leads: usize, with_lag: bool) -> Result<EventStudyFit> {
    let periods = panel.periods();
    design.validate(periods)?;
    let first = if with_lag { 1 } else { 0 };
    let times: Vec<usize> = (first..=periods).collect();
    let rel = |t: usize| t as i64 - design.t0 as i64;
    let window: Vec<i64> = (-(leads as i64)..=design.horizon as i64).collect();
    let present: Vec<i64> = window.iter().cloned().filter(|j| times.iter().any(|t| rel(*t) == *j)).collect();
    let dummies: Vec<i64> = present.iter().cloned().filter(|j| *j != -1).collect();
    if present.len() == dummies.len() {
        return Err(Error::InvalidDesign("the reference period t0 - 1 is not in the sample".into()));
    }

    let n = panel.n_units();
    let rows = times.len();
    let y = panel.outcomes();
    let offset = usize::from(with_lag);
    let k = dummies.len() + offset;
    let mut x = DMatrix::zeros(n * rows, k);
    let mut yy = DMatrix::zeros(n * rows, 1);
    for i in 0..n {
        for (r, t) in times.iter().enumerate() {
            let row = i * rows + r;
            yy[(row, 0)] = y[(i, *t)];
            if with_lag {
                x[(row, 0)] = y[(i, t - 1)];
            }
            if let Some(c) = dummies.iter().position(|j| *j == rel(*t)) {
                x[(row, offset + c)] = 1.0;
            }
        }
    }
    demean_within(&mut x, n, rows);
    demean_within(&mut yy, n, rows);
    let fit = clustered_ols(&x, &yy.column(0).into_owned(), rows)?;

    let m = present.len();
    let mut coefficients = vec![0.0; m];
    let mut covariance = DMatrix::zeros(m, m);
    let idx = |j: i64| dummies.iter().position(|d| *d == j).map(|c| c + offset);
    for (a, ja) in present.iter().enumerate() {
        let Some(ca) = idx(*ja) else { continue };
        coefficients[a] = fit.coef[ca];
        for (b, jb) in present.iter().enumerate() {
            if let Some(cb) = idx(*jb) {
                covariance[(a, b)] = fit.cov[(ca, cb)];
            }
        }
    }
    let std_errors = covariance.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect();
    Ok(EventStudyFit {
        estimator: if with_lag { "twfe_ar1" } else { "twfe" }.into(),
        event_times: present,
        coefficients,
        std_errors,
        covariance,
        rho_y: with_lag.then(|| fit.coef[0]),
        rho_y_se: with_lag.then(|| fit.cov[(0, 0)].max(0.0).sqrt()),
        n_units: n,
        periods,
    })
}

/// Default number of leads: every pre-period of the `t = 0..T` sample.
pub fn default_leads(design: &EventDesign) -> usize {
    design.t0
}

/// Within-unit OLS of `Y_it` on event-time dummies `-L..=J` (omitting `-1`),
/// over `t = 0..=T`.
pub fn twfe(panel: &PanelData, design: &EventDesign, leads: usize) -> Result<EventStudyFit> {
    event_study(panel, design, leads, false)
}

/// As [`twfe`] plus `Y_i,t-1` as a regressor, over `t = 1..=T`.
pub fn twfe_ar1(panel: &PanelData, design: &EventDesign, leads: usize) -> Result<EventStudyFit> {
    event_study(panel, design, leads, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvbRow {
    pub j: usize,
    pub true_delta: f64,
    pub naive_delta: f64,
    pub naive_se: f64,
    pub analytic_bias: f64,
    pub simulated_bias: f64,
}

/// `rho * E[Y_{j+1}]` for the five-period toy panel with treatment at `t = 2`.
pub fn ovb_analytic_bias(rho_y: f64, delta: &[f64; 3]) -> [f64; 3] {
    let mut mean = [0.0; 5];
    for t in 1..5 {
        let effect = if t >= 2 { delta[t - 2] } else { 0.0 };
        mean[t] = rho_y * mean[t - 1] + effect;
    }
    [rho_y * mean[1], rho_y * mean[2], rho_y * mean[3]]
}

/// Simulates `Y_it = rho Y_i,t-1 + sum_j D^j_it delta_j + U_it` for
/// `t = 0..4` with treatment at `t = 2`, `Y_i0, U_it ~ N(0, 1)`, and fits the
/// dummies-only regression.
pub fn ovb_demo(rho_y: f64, delta: [f64; 3], n_units: usize, seed: u64) -> Result<Vec<OvbRow>> {
    if n_units < 2 {
        return Err(Error::Config("ovb demo needs at least two units".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 5;
    let mut x = DMatrix::zeros(n_units * rows, 3);
    let mut y = DVector::zeros(n_units * rows);
    for i in 0..n_units {
        let mut prev: f64 = rng.sample(StandardNormal);
        y[i * rows] = prev;
        for t in 1..rows {
            let effect = if t >= 2 { delta[t - 2] } else { 0.0 };
            let u: f64 = rng.sample(StandardNormal);
            prev = rho_y * prev + effect + u;
            y[i * rows + t] = prev;
            if t >= 2 {
                x[(i * rows + t, t - 2)] = 1.0;
            }
        }
    }
    let fit = clustered_ols(&x, &y, rows)?;
    let bias = ovb_analytic_bias(rho_y, &delta);
    Ok((0..3)
        .map(|j| OvbRow {
            j,
            true_delta: delta[j],
            naive_delta: fit.coef[j],
            naive_se: fit.cov[(j, j)].sqrt(),
            analytic_bias: bias[j],
            simulated_bias: fit.coef[j] - delta[j],
        })
        .collect())
}
