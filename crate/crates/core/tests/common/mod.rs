#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use tvhte::model::{CommonParams, EffectLoading, EventDesign};

/// Outcomes written out by iterating the recursion on coefficient vectors.
/// Basic variables are ordered `(lambda, U_1..U_T, eps_p..eps_J)`.
/// Returns the loading of each `Y_t` (`t = 1..T`) on `Y_0` and on the basics.
pub fn symbolic_outcomes(theta: &CommonParams, design: &EventDesign, periods: usize) -> (DVector<f64>, DMatrix<f64>) {
    let p = design.ar_order;
    let d = 1 + p;
    let horizon = design.horizon;
    let n_eps = horizon + 1 - p;
    let nb = d + periods + n_eps;
    let mut delta: Vec<DVector<f64>> = Vec::new();
    for j in 0..=horizon {
        let mut v = DVector::zeros(nb);
        if j < p {
            v[1 + j] = 1.0;
        } else {
            for q in 1..=p {
                v += &delta[j - q] * theta.rho_delta[q - 1];
            }
            v[d + periods + (j - p)] += 1.0;
        }
        delta.push(v);
    }
    let mut on_y0 = DVector::zeros(periods);
    let mut coef = DMatrix::zeros(periods, nb);
    let mut prev_y0 = 1.0;
    let mut prev = DVector::zeros(nb);
    let mut cumulative = DVector::zeros(nb);
    for t in 1..=periods {
        let mut row = &prev * theta.rho_y;
        row[0] += 1.0;
        row[d + t - 1] += 1.0;
        if t >= design.t0 && t - design.t0 <= horizon {
            let j = t - design.t0;
            cumulative += &delta[j];
            match design.loading {
                EffectLoading::Level => row += &delta[j],
                EffectLoading::Cumulative => row += &cumulative,
            }
        }
        prev_y0 *= theta.rho_y;
        on_y0[t - 1] = prev_y0;
        coef.row_mut(t - 1).copy_from(&row.transpose());
        prev = row;
    }
    (on_y0, coef)
}

/// Block-diagonal covariance of the basic variables.
pub fn basic_cov(sigma_lambda: &DMatrix<f64>, theta: &CommonParams, periods: usize, n_eps: usize) -> DMatrix<f64> {
    let d = sigma_lambda.nrows();
    let nb = d + periods + n_eps;
    let mut s = DMatrix::zeros(nb, nb);
    s.view_mut((0, 0), (d, d)).copy_from(sigma_lambda);
    for k in 0..periods {
        s[(d + k, d + k)] = theta.sigma2_u;
    }
    for k in 0..n_eps {
        s[(d + periods + k, d + periods + k)] = theta.sigma2_eps;
    }
    s
}

pub fn gaussian_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let r = x - mean;
    let z = chol.l().solve_lower_triangular(&r).unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

/// Random SPD matrix `G G' + floor I`.
pub fn random_spd<R: Rng>(rng: &mut R, d: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    &g * g.transpose() + DMatrix::identity(d, d) * floor
}

pub fn random_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Sample covariance of the rows of `x` (divisor `n - 1`).
pub fn sample_cov(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let mut c = x.clone();
    for mut r in c.row_iter_mut() {
        r -= &mean;
    }
    c.transpose() * c / (n - 1.0)
}
