//! Gaussian mixture density of `(lambda_hat, Y0)` fitted by EM.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SuffStats;
use crate::error::{Error, Result};
use crate::linalg::{gaussian_log_density, log_sum_exp, symmetrize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixtureOptions {
    pub max_iter: usize,
    /// Stop when the mean log-likelihood improves by less than this.
    pub tol: f64,
    /// Independent k-means++ initializations per fit.
    pub n_init: usize,
    pub seed: u64,
    /// Largest `K` tried by [`fit_mixture_bic`].
    pub max_components: usize,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-10, n_init: 3, seed: 17, max_components: 4 }
    }
}

#[derive(Debug, Clone)]
struct Comp {
    weight: f64,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Debug, Clone)]
pub struct MixtureDensity {
    comps: Vec<Comp>,
    dim_lambda: usize,
    loglik: f64,
    n_points: usize,
    /// Mean log-likelihood after every EM iteration of the final run.
    trace: Vec<f64>,
    pruned: usize,
}

pub(super) fn joint_points(ss: &SuffStats) -> DMatrix<f64> {
    let d = ss.dim();
    DMatrix::from_fn(ss.n_units(), d + 1, |i, k| if k < d { ss.lambda_hat[(i, k)] } else { ss.y0[i] })
}

fn make_comp(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Option<Comp> {
    let cov = symmetrize(&cov);
    let chol = Cholesky::new(cov.clone())?;
    let diag_ok = chol.l_dirty().diagonal().iter().all(|v| *v > 1e-10);
    (weight > 0.0 && diag_ok).then_some(Comp { weight, mean, cov, chol })
}

fn kmeans_init(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let sd: Vec<f64> = x
        .column_iter()
        .map(|c| {
            let m = c.mean();
            (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12)
        })
        .collect();
    let z = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] / sd[j]);
    let dist = |i: usize, c: &DVector<f64>| (z.row(i).transpose() - c).norm_squared();
    let mut centers = vec![z.row(rng.random_range(0..n)).transpose()];
    while centers.len() < k {
        let d2: Vec<f64> = (0..n).map(|i| centers.iter().map(|c| dist(i, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, v) in d2.iter().enumerate() {
            if u < *v {
                pick = i;
                break;
            }
            u -= v;
        }
        centers.push(z.row(pick).transpose());
    }
    let mut labels = vec![0; n];
    for _ in 0..20 {
        for (i, l) in labels.iter_mut().enumerate() {
            *l = (0..k).min_by(|a, b| dist(i, &centers[*a]).total_cmp(&dist(i, &centers[*b]))).unwrap_or(0);
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|i| labels[*i] == c).collect();
            if !members.is_empty() {
                *center = members.iter().map(|i| z.row(*i).transpose()).sum::<DVector<f64>>() / members.len() as f64;
            }
        }
    }
    labels
}

fn weighted_moments(x: &DMatrix<f64>, w: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
    let dim = x.ncols();
    let total: f64 = w.iter().sum();
    let mut mean = DVector::zeros(dim);
    for (i, wi) in w.iter().enumerate() {
        mean += x.row(i).transpose() * *wi;
    }
    mean /= total;
    let mut cov = DMatrix::zeros(dim, dim);
    for (i, wi) in w.iter().enumerate() {
        let r = x.row(i).transpose() - &mean;
        cov += &r * r.transpose() * *wi;
    }
    (total, mean, cov / total)
}

fn log_joint(comps: &[Comp], z: &DVector<f64>) -> Vec<f64> {
    comps.iter().map(|c| c.weight.ln() + gaussian_log_density(z, &c.mean, &c.chol)).collect()
}

struct EmRun {
    comps: Vec<Comp>,
    trace: Vec<f64>,
}

/// EM from given components. Components that lose support (fewer than
/// `dim + 2` effective points or a singular covariance) are dropped and EM
/// restarts from the survivors.
fn em(x: &DMatrix<f64>, mut comps: Vec<Comp>, opts: &MixtureOptions, pruned: &mut usize) -> Result<EmRun> {
    let n = x.nrows();
    let dim = x.ncols();
    let rows: Vec<DVector<f64>> = (0..n).map(|i| x.row(i).transpose()).collect();
    'outer: loop {
        if comps.is_empty() {
            return Err(Error::Degenerate("every mixture component collapsed".into()));
        }
        let mut trace = Vec::new();
        let mut prev = f64::NEG_INFINITY;
        for _ in 0..opts.max_iter {
            let k = comps.len();
            let mut resp = vec![vec![0.0; n]; k];
            let mut ll = 0.0;
            for (i, z) in rows.iter().enumerate() {
                let lj = log_joint(&comps, z);
                let lse = log_sum_exp(&lj);
                ll += lse;
                for c in 0..k {
                    resp[c][i] = (lj[c] - lse).exp();
                }
            }
            let mean_ll = ll / n as f64;
            trace.push(mean_ll);
            if mean_ll - prev < opts.tol * (1.0 + mean_ll.abs()) && prev.is_finite() {
                return Ok(EmRun { comps, trace });
            }
            prev = mean_ll;
            let mut next = Vec::with_capacity(k);
            for r in &resp {
                let (nk, mean, cov) = weighted_moments(x, r);
                if nk < (dim + 2) as f64 {
                    *pruned += 1;
                    comps = drop_comp(&comps, next.len());
                    continue 'outer;
                }
                match make_comp(nk / n as f64, mean, cov) {
                    Some(c) => next.push(c),
                    None => {
                        *pruned += 1;
                        comps = drop_comp(&comps, next.len());
                        continue 'outer;
                    }
                }
            }
            comps = next;
        }
        return Ok(EmRun { comps, trace });
    }
}

fn drop_comp(comps: &[Comp], idx: usize) -> Vec<Comp> {
    let mut out: Vec<Comp> = comps.iter().enumerate().filter(|(i, _)| *i != idx).map(|(_, c)| c.clone()).collect();
    let total: f64 = out.iter().map(|c| c.weight).sum();
    for c in &mut out {
        c.weight /= total;
    }
    out
}

impl MixtureDensity {
    /// `x` holds one point per row; the first `dim_lambda` columns are the
    /// coordinates the gradient is taken in.
    pub fn fit(x: &DMatrix<f64>, k: usize, dim_lambda: usize, opts: &MixtureOptions) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("mixture needs at least one component".into()));
        }
        let n = x.nrows();
        let dim = x.ncols();
        if n < k * (dim + 2) {
            return Err(Error::Config(format!("{n} points are too few for {k} components in {dim} dimensions")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut best: Option<(EmRun, usize)> = None;
        let inits = if k == 1 { 1 } else { opts.n_init.max(1) };
        for _ in 0..inits {
            let labels = kmeans_init(x, k, &mut rng);
            let all = vec![1.0; n];
            let (_, _, global_cov) = weighted_moments(x, &all);
            let mut comps = Vec::with_capacity(k);
            for c in 0..k {
                let w: Vec<f64> = labels.iter().map(|l| if *l == c { 1.0 } else { 0.0 }).collect();
                let (nk, mean, cov) = weighted_moments(x, &w);
                let cov = if nk >= (dim + 2) as f64 { cov } else { global_cov.clone() };
                if let Some(comp) = make_comp(nk.max(1.0) / n as f64, mean, cov) {
                    comps.push(comp);
                }
            }
            let mut pruned = 0;
            let Ok(run) = em(x, drop_comp(&comps, usize::MAX), opts, &mut pruned) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((b, _)) => run.trace.last() > b.trace.last(),
            };
            if better {
                best = Some((run, pruned));
            }
        }
        let (run, pruned) = best.ok_or_else(|| Error::Degenerate("EM failed from every start".into()))?;
        let mean_ll = *run.trace.last().unwrap_or(&f64::NEG_INFINITY);
        Ok(Self { comps: run.comps, dim_lambda, loglik: mean_ll * n as f64, n_points: n, trace: run.trace, pruned })
    }

    pub fn n_components(&self) -> usize {
        self.comps.len()
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn pruned(&self) -> usize {
        self.pruned
    }

    pub fn weights(&self) -> Vec<f64> {
        self.comps.iter().map(|c| c.weight).collect()
    }

    pub fn means(&self) -> Vec<DVector<f64>> {
        self.comps.iter().map(|c| c.mean.clone()).collect()
    }

    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.comps.iter().map(|c| c.cov.clone()).collect()
    }

    pub fn n_params(&self) -> usize {
        let dim = self.comps[0].mean.len();
        self.comps.len() * (1 + dim + dim * (dim + 1) / 2) - 1
    }

    pub fn bic(&self) -> f64 {
        -2.0 * self.loglik + self.n_params() as f64 * (self.n_points as f64).ln()
    }

    pub fn log_density_grad(&self, lambda: &DVector<f64>, y0: f64) -> (f64, DVector<f64>) {
        let z = DVector::from_iterator(lambda.len() + 1, lambda.iter().cloned().chain(std::iter::once(y0)));
        let lj = log_joint(&self.comps, &z);
        let lse = log_sum_exp(&lj);
        let mut grad = DVector::zeros(self.dim_lambda);
        if lse.is_finite() {
            for (c, l) in self.comps.iter().zip(&lj) {
                let r = (l - lse).exp();
                let g = c.chol.solve(&(&c.mean - &z));
                grad += g.rows(0, self.dim_lambda) * r;
            }
        }
        (lse, grad)
    }
}

/// Fits `K = 1..=max_components` and keeps the lowest BIC.
pub fn fit_mixture_bic(ss: &SuffStats, opts: &MixtureOptions) -> Result<super::DensityBackend> {
    let x = joint_points(ss);
    let mut best: Option<MixtureDensity> = None;
    for k in 1..=opts.max_components.max(1) {
        let fit = match MixtureDensity::fit(&x, k, ss.dim(), opts) {
            Ok(f) => f,
            Err(e) if k > 1 => {
                log::debug!("mixture with K = {k} skipped: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| fit.bic() < b.bic()) {
            best = Some(fit);
        }
    }
    Ok(super::DensityBackend::Mixture(best.expect("K = 1 always fits or errors")))
}
