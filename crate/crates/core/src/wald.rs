//! Wald tests on the QMLE output.
//!
//! Restrictions act on the natural parameter vector, so the sandwich
//! covariance is used as is.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::qmle::{ParamLayout, QmleResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub name: String,
    pub restrictions: Vec<String>,
    pub statistic: f64,
    pub df: usize,
    pub alpha: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
}

pub fn chi2_critical(df: usize, alpha: f64) -> f64 {
    ChiSquared::new(df as f64).expect("df >= 1").inverse_cdf(1.0 - alpha)
}

fn describe_row(row: &[f64], names: &[String]) -> String {
    let terms: Vec<String> = row
        .iter()
        .zip(names)
        .filter(|(v, _)| **v != 0.0)
        .map(|(v, n)| if *v == 1.0 { n.clone() } else { format!("{v}*{n}") })
        .collect();
    terms.join(" + ")
}

/// Generic test of `R eta = r0` given an estimate and its covariance.
pub fn wald_raw(
    name: &str,
    estimate: &DVector<f64>,
    cov: &DMatrix<f64>,
    names: &[String],
    r: &DMatrix<f64>,
    r0: &DVector<f64>,
    alpha: f64,
) -> Result<WaldTest> {
    let q = r.nrows();
    if q == 0 || r.ncols() != estimate.len() || r0.len() != q {
        return Err(Error::InvalidRestriction(format!(
            "R is {}x{}, r0 has length {}, eta has length {}",
            q,
            r.ncols(),
            r0.len(),
            estimate.len()
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidRestriction(format!("level {alpha} outside (0, 1)")));
    }
    let rows: Vec<Vec<f64>> = (0..q).map(|k| r.row(k).iter().cloned().collect()).collect();
    if let Some(k) = rows.iter().position(|row| row.iter().all(|v| *v == 0.0)) {
        return Err(Error::InvalidRestriction(format!("restriction {} is an all-zero row", k + 1)));
    }
    let m = symmetrize(&(r * cov * r.transpose()));
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    for k in 1..=q {
        let sub = m.view((0, 0), (k, k)).into_owned();
        if crate::linalg::min_eigenvalue(&sub) <= 1e-12 * scale {
            return Err(Error::InvalidRestriction(format!(
                "restriction {} ({}) is redundant given the others",
                k,
                describe_row(&rows[k - 1], names)
            )));
        }
    }
    let diff = r * estimate - r0;
    let inv = m.cholesky().ok_or_else(|| Error::InvalidRestriction("R V R' is not positive definite".into()))?;
    let statistic = diff.dot(&inv.solve(&diff)).max(0.0);
    let dist = ChiSquared::new(q as f64).expect("df >= 1");
    let critical_value = dist.inverse_cdf(1.0 - alpha);
    Ok(WaldTest {
        name: name.to_string(),
        restrictions: rows.iter().map(|row| describe_row(row, names)).collect(),
        statistic,
        df: q,
        alpha,
        critical_value,
        p_value: 1.0 - dist.cdf(statistic),
        reject: statistic > critical_value,
    })
}

pub fn wald(result: &QmleResult, r: &DMatrix<f64>, r0: &DVector<f64>, alpha: f64, name: &str) -> Result<WaldTest> {
    wald_raw(name, &result.eta_vector(), &result.sandwich_cov, &result.names(), r, r0, alpha)
}

/// Rows selecting single coordinates.
pub fn selection(layout: ParamLayout, idx: &[usize]) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(idx.len(), layout.len());
    for (k, i) in idx.iter().enumerate() {
        r[(k, *i)] = 1.0;
    }
    r
}

fn zero_test(result: &QmleResult, idx: &[usize], alpha: f64, name: &str) -> Result<WaldTest> {
    let r = selection(result.layout, idx);
    wald(result, &r, &DVector::zeros(idx.len()), alpha, name)
}

pub fn rc_indices(layout: ParamLayout) -> Vec<usize> {
    (1..layout.dim_lambda()).map(|k| layout.b1(k)).collect()
}

pub fn joint_indices(layout: ParamLayout) -> Vec<usize> {
    let mut idx = rc_indices(layout);
    idx.extend((1..layout.dim_lambda()).map(|k| layout.sigma_lambda(k, 0)));
    idx
}

/// `b1 = 0` on the effect block (random vs correlated random coefficients).
pub fn test1_rc(result: &QmleResult, alpha: f64) -> Result<WaldTest> {
    zero_test(result, &rc_indices(result.layout), alpha, "test1_rc")
}

/// Test 1 plus zero covariance between `alpha_i` and the initial effects.
pub fn test2_joint(result: &QmleResult, alpha: f64) -> Result<WaldTest> {
    zero_test(result, &joint_indices(result.layout), alpha, "test2_joint")
}

/// `rho_delta = 0`: no state dependence in the effects.
pub fn test3_statedep(result: &QmleResult, alpha: f64) -> Result<WaldTest> {
    let l = result.layout;
    let idx: Vec<usize> = (0..l.ar_order).map(|m| l.rho_delta(m)).collect();
    zero_test(result, &idx, alpha, "test3_statedep")
}

/// `rho_Y = 0`, under which the model reduces to parallel trends.
pub fn test_parallel_trends(result: &QmleResult, alpha: f64) -> Result<WaldTest> {
    zero_test(result, &[result.layout.rho_y()], alpha, "parallel_trends")
}

pub fn all_tests(result: &QmleResult, alpha: f64) -> Result<Vec<WaldTest>> {
    Ok(vec![
        test1_rc(result, alpha)?,
        test2_joint(result, alpha)?,
        test3_statedep(result, alpha)?,
        test_parallel_trends(result, alpha)?,
    ])
}
