mod common;

use common::{gaussian_logpdf, random_spd, random_vec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tvhte::eb::{
    fit_mixture, fit_parametric, sufficient_stats, tweedie, KernelDensity, MixtureOptions, OracleDensity, SuffStats,
};
use tvhte::model::PriorParams;
use tvhte::simulate::{heavy_tail_variant, lookup_design, simulate, DgpSpec, TruePrior};

fn truth_stats(name: &str, n: usize, seed: u64) -> (DgpSpec, tvhte::simulate::SimulatedPanel, SuffStats) {
    let spec = DgpSpec { n_units: n, seed, ..lookup_design(name).unwrap() };
    let sim = simulate(&spec).unwrap();
    let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
    (spec, sim, ss)
}

#[test]
fn parametric_tweedie_equals_conjugate_posterior_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let d = 2 + case % 2;
        let n = 5;
        let prior = PriorParams::new(
            random_vec(&mut rng, d, 2.0),
            random_vec(&mut rng, d, 1.0),
            random_spd(&mut rng, d, 0.7, 0.01),
        )
        .unwrap();
        let sigma_v = random_spd(&mut rng, d, 0.5, 0.01);
        let y0 = random_vec(&mut rng, n, 1.0);
        let marg = (&prior.sigma_lambda + &sigma_v).cholesky().unwrap().l();
        let mut lambda_hat = DMatrix::zeros(n, d);
        for i in 0..n {
            let draw = prior.mean(y0[i]) + &marg * random_vec(&mut rng, d, 1.5);
            lambda_hat.row_mut(i).copy_from(&draw.transpose());
        }
        let ss = SuffStats { lambda_hat, sigma_v: sigma_v.clone(), y0, init_coeffs: DMatrix::identity(d - 1, d - 1) };
        let eb = tweedie(&ss, &fit_parametric(&ss, &prior).unwrap(), None).unwrap();
        assert_eq!(eb.fallback_count, 0);
        let gain = &sigma_v * (&prior.sigma_lambda + &sigma_v).try_inverse().unwrap();
        for i in 0..n {
            let lh = ss.lambda(i);
            let expected = &lh + &gain * (prior.mean(ss.y0[i]) - &lh);
            let got = eb.lambda_tilde.row(i).transpose();
            let tol = 1e-8 * expected.amax().max(1.0);
            assert!((&got - &expected).amax() < tol, "case {case} unit {i}");
        }
    }
}

#[test]
fn kernel_gradient_matches_finite_differences() {
    let (_, _, ss) = truth_stats("case3-nonnormal-crc-corr", 400, 31);
    let kde = KernelDensity::fit(&ss, None).unwrap();
    let h = kde.bandwidths().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let i = rng.random_range(0..ss.n_units());
        let lam = ss.lambda(i) + DVector::from_fn(ss.dim(), |k, _| h[k] * rng.sample::<f64, _>(StandardNormal));
        let y0 = ss.y0[i];
        let (_, grad) = kde.log_density_grad(&lam, y0, Some(i));
        let mut fd = DVector::zeros(ss.dim());
        for k in 0..ss.dim() {
            let step = 1e-4 * h[k];
            let mut up = lam.clone();
            up[k] += step;
            let mut dn = lam.clone();
            dn[k] -= step;
            let fu = kde.log_density_grad(&up, y0, Some(i)).0;
            let fdn = kde.log_density_grad(&dn, y0, Some(i)).0;
            fd[k] = (fu - fdn) / (2.0 * step);
        }
        let err = (&fd - &grad).amax() / grad.amax().max(1e-3);
        assert!(err < 1e-6, "relative error {err:e}");
    }
}

#[test]
fn single_component_mixture_is_the_implied_gaussian_regression() {
    let (_, _, ss) = truth_stats("case3-normal-crc-corr", 3000, 41);
    let n = ss.n_units();
    let d = ss.dim();
    let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { ss.y0[i] });
    let coef = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &ss.lambda_hat;
    let resid = &ss.lambda_hat - &x * &coef;
    let s_cond = resid.transpose() * &resid / n as f64;
    let prior = PriorParams::new(
        coef.row(0).transpose(),
        coef.row(1).transpose(),
        tvhte::linalg::symmetrize(&(&s_cond - &ss.sigma_v)),
    )
    .unwrap();
    assert!(tvhte::linalg::min_eigenvalue(&prior.sigma_lambda) > 0.0);
    let a = tweedie(&ss, &fit_parametric(&ss, &prior).unwrap(), None).unwrap();
    let b = tweedie(&ss, &fit_mixture(&ss, 1, &MixtureOptions::default()).unwrap(), None).unwrap();
    let gap = (&a.lambda_tilde - &b.lambda_tilde).amax();
    assert!(gap < 1e-6, "max gap {gap:e} (d = {d})");
}

/// Self-normalized importance sampling of `E[lambda | lambda_hat]` with a
/// Gaussian proposal; returns the estimate and its standard errors.
fn is_posterior_mean(
    truth: &TruePrior,
    sigma_v: &DMatrix<f64>,
    lambda_hat: &DVector<f64>,
    y0: f64,
    proposal_mean: &DVector<f64>,
    proposal_cov: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> (DVector<f64>, DVector<f64>) {
    let d = lambda_hat.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = proposal_cov.clone().cholesky().unwrap().l();
    let mut pts = Vec::with_capacity(draws);
    let mut logw = Vec::with_capacity(draws);
    for _ in 0..draws {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lam = proposal_mean + &l * z;
        let lw = truth.log_density(&lam, y0).unwrap() + gaussian_logpdf(lambda_hat, &lam, sigma_v)
            - gaussian_logpdf(&lam, proposal_mean, proposal_cov);
        pts.push(lam);
        logw.push(lw);
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|v| (v - top).exp()).collect();
    let sw: f64 = w.iter().sum();
    let mut mean = DVector::zeros(d);
    for (p, wi) in pts.iter().zip(&w) {
        mean += p * (*wi / sw);
    }
    let mut var = DVector::zeros(d);
    for (p, wi) in pts.iter().zip(&w) {
        let r = p - &mean;
        var += r.component_mul(&r) * (wi / sw).powi(2);
    }
    (mean, var.map(f64::sqrt))
}

#[test]
fn mixture_oracle_matches_monte_carlo_posterior_mean() {
    let (_, sim, ss) = truth_stats("case3-nonnormal-crc-corr", 200, 51);
    let truth = sim.true_prior.clone();
    let oracle = OracleDensity::new(&ss, &truth).unwrap();
    for (k, i) in [0usize, 7, 19].into_iter().enumerate() {
        let lh = ss.lambda(i);
        let y0 = ss.y0[i];
        let (pm, _) = oracle.posterior_mean(&lh, y0);
        let (mc, se) = is_posterior_mean(
            &truth,
            &ss.sigma_v,
            &lh,
            y0,
            &truth.location(y0),
            &truth.base_cov(),
            10_000_000,
            90 + k as u64,
        );
        for c in 0..ss.dim() {
            assert!(
                (pm[c] - mc[c]).abs() < 3.0 * se[c].max(1e-4),
                "unit {i} comp {c}: {} vs {} (se {})",
                pm[c],
                mc[c],
                se[c]
            );
        }
    }
}

#[test]
fn t_prior_quadrature_matches_monte_carlo() {
    let base = DgpSpec { n_units: 200, seed: 61, ..lookup_design("case3-normal-crc-corr").unwrap() };
    let spec = DgpSpec { prior: heavy_tail_variant(&base.prior, 5.0).unwrap(), ..base };
    let sim = simulate(&spec).unwrap();
    let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
    let truth = sim.true_prior.clone();
    let oracle = OracleDensity::new(&ss, &truth).unwrap();
    for (k, i) in [3usize, 11].into_iter().enumerate() {
        let lh = ss.lambda(i);
        let y0 = ss.y0[i];
        let (pm, _) = oracle.posterior_mean(&lh, y0);
        let (mc, se) =
            is_posterior_mean(&truth, &ss.sigma_v, &lh, y0, &pm, &(&ss.sigma_v * 2.0), 4_000_000, 70 + k as u64);
        for c in 0..ss.dim() {
            assert!(se[c] < 3e-4, "MC too noisy: {}", se[c]);
            assert!((pm[c] - mc[c]).abs() < 1e-3, "unit {i} comp {c}: {} vs {}", pm[c], mc[c]);
        }
    }
}
