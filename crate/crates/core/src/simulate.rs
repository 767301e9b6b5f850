//! Synthetic panels from the dynamic event-study model with heterogeneous
//! AR(p) effect trajectories.
//!
//! Units are drawn as `Y0 ~ N(0, 1)`, `lambda = b0 + b1 Y0 + xi` with `xi`
//! from a zero-mean base law (Gaussian, Gaussian mixture or scaled t), then
//! the effect trajectory and the outcome recursion. All draws for one unit
//! come from a single seeded ChaCha stream in a fixed order, so identical
//! specs give bit-identical panels.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, gaussian_log_density, log_sum_exp};
use crate::model::{effect_representation, CommonParams, EffectLoading, EventDesign, PanelData, UnitEffects};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Y0Dist {
    #[default]
    StandardNormal,
}

/// Zero-mean base law of `xi = lambda - b0 - b1 Y0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum PriorFamily {
    Gaussian {
        cov: Vec<Vec<f64>>,
    },
    GaussianMixture {
        weights: Vec<f64>,
        /// Component means; the weighted mean must be zero.
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    },
    /// Multivariate t with `df > 2` degrees of freedom and covariance `cov`.
    ScaledT {
        df: f64,
        cov: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(flatten)]
    pub family: PriorFamily,
    pub b0: Vec<f64>,
    /// Slope of the prior location on `Y0`; all zeros gives random
    /// (uncorrelated) coefficients.
    pub crc_slope: Vec<f64>,
    /// Correlation between `alpha` and each initial effect used when the
    /// covariances were built. Informational; the covariances are authoritative.
    #[serde(default)]
    pub alpha_delta_corr: f64,
    #[serde(default)]
    pub y0_dist: Y0Dist,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParameter("covariance must be square".into()));
    }
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

fn from_matrix(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().cloned().collect()).collect()
}

/// Gaussian mixture component in lambda space (conditional on a given `Y0`).
#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Validated, evaluable form of a [`PriorSpec`].
#[derive(Debug, Clone)]
pub struct TruePrior {
    spec: PriorSpec,
    dim: usize,
    base: BaseLaw,
}

#[derive(Debug, Clone)]
enum BaseLaw {
    Mixture(Vec<Component>),
    T { df: f64, cov: DMatrix<f64> },
}

impl TruePrior {
    pub fn new(spec: PriorSpec) -> Result<Self> {
        let dim = spec.b0.len();
        if spec.crc_slope.len() != dim {
            return Err(Error::Dimension("crc_slope and b0 lengths differ".into()));
        }
        let check_cov = |m: &DMatrix<f64>| -> Result<()> {
            if m.nrows() != dim {
                return Err(Error::Dimension(format!("covariance is {}x{}, expected {dim}", m.nrows(), m.nrows())));
            }
            if (m - m.transpose()).abs().max() > 1e-10 || crate::linalg::min_eigenvalue(m) < -1e-10 {
                return Err(Error::InvalidParameter("prior covariance must be symmetric PSD".into()));
            }
            Ok(())
        };
        let base = match &spec.family {
            PriorFamily::Gaussian { cov } => {
                let cov = to_matrix(cov)?;
                check_cov(&cov)?;
                BaseLaw::Mixture(vec![Component { weight: 1.0, mean: DVector::zeros(dim), cov }])
            }
            PriorFamily::GaussianMixture { weights, means, covs } => {
                if weights.is_empty() || weights.len() != means.len() || weights.len() != covs.len() {
                    return Err(Error::InvalidParameter("mixture weights/means/covs lengths differ".into()));
                }
                if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                    return Err(Error::InvalidParameter("mixture weights must be nonnegative and sum to 1".into()));
                }
                let mut comps = Vec::with_capacity(weights.len());
                for ((w, m), c) in weights.iter().zip(means).zip(covs) {
                    if m.len() != dim {
                        return Err(Error::Dimension("mixture mean length".into()));
                    }
                    let cov = to_matrix(c)?;
                    check_cov(&cov)?;
                    comps.push(Component { weight: *w, mean: DVector::from_column_slice(m), cov });
                }
                let centre: DVector<f64> = comps.iter().map(|c| &c.mean * c.weight).sum();
                if centre.amax() > 1e-10 {
                    return Err(Error::InvalidParameter("mixture component means must average to zero".into()));
                }
                BaseLaw::Mixture(comps)
            }
            PriorFamily::ScaledT { df, cov } => {
                if !(*df > 2.0) {
                    return Err(Error::InvalidParameter(format!("t degrees of freedom {df} must exceed 2")));
                }
                let cov = to_matrix(cov)?;
                check_cov(&cov)?;
                BaseLaw::T { df: *df, cov }
            }
        };
        Ok(Self { spec, dim, base })
    }

    pub fn spec(&self) -> &PriorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn location(&self, y0: f64) -> DVector<f64> {
        DVector::from_iterator(self.dim, self.spec.b0.iter().zip(&self.spec.crc_slope).map(|(b, s)| b + s * y0))
    }

    /// Mixture components of `lambda | Y0 = y0`, if the law is a finite
    /// Gaussian mixture.
    pub fn components(&self, y0: f64) -> Option<Vec<Component>> {
        match &self.base {
            BaseLaw::Mixture(c) => {
                let loc = self.location(y0);
                Some(
                    c.iter()
                        .map(|c| Component { weight: c.weight, mean: &c.mean + &loc, cov: c.cov.clone() })
                        .collect(),
                )
            }
            BaseLaw::T { .. } => None,
        }
    }

    /// Covariance of `xi`.
    pub fn base_cov(&self) -> DMatrix<f64> {
        match &self.base {
            BaseLaw::Mixture(c) => c
                .iter()
                .map(|c| (&c.cov + &c.mean * c.mean.transpose()) * c.weight)
                .fold(DMatrix::zeros(self.dim, self.dim), |a, b| a + b),
            BaseLaw::T { cov, .. } => cov.clone(),
        }
    }

    /// `log pi(lambda | y0)`.
    pub fn log_density(&self, lambda: &DVector<f64>, y0: f64) -> Result<f64> {
        let xi = lambda - self.location(y0);
        match &self.base {
            BaseLaw::Mixture(comps) => {
                let mut terms = Vec::with_capacity(comps.len());
                for c in comps {
                    let chol = cholesky(&c.cov, "prior component covariance")?;
                    terms.push(c.weight.ln() + gaussian_log_density(&xi, &c.mean, &chol));
                }
                Ok(log_sum_exp(&terms))
            }
            BaseLaw::T { df, cov } => {
                let d = self.dim as f64;
                let scale = cov * ((df - 2.0) / df);
                let chol = cholesky(&scale, "t scale")?;
                let z = chol.l_dirty().solve_lower_triangular(&xi).expect("triangular solve");
                Ok(statrs::function::gamma::ln_gamma((df + d) / 2.0)
                    - statrs::function::gamma::ln_gamma(df / 2.0)
                    - 0.5 * d * (df * std::f64::consts::PI).ln()
                    - 0.5 * crate::linalg::log_det(&chol)
                    - 0.5 * (df + d) * (1.0 + z.norm_squared() / df).ln())
            }
        }
    }

    pub fn sample<R: Rng>(&self, y0: f64, rng: &mut R) -> Result<DVector<f64>> {
        let z = |rng: &mut R| DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let xi = match &self.base {
            BaseLaw::Mixture(comps) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = comps.len() - 1;
                for (k, c) in comps.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                let c = &comps[pick];
                &c.mean + psd_factor(&c.cov) * z(rng)
            }
            BaseLaw::T { df, cov } => {
                let g = z(rng);
                let chi: f64 = ChiSquared::new(*df).expect("df > 2").sample(rng);
                psd_factor(cov) * g * (((df - 2.0) / chi).sqrt())
            }
        };
        Ok(self.location(y0) + xi)
    }
}

/// Any `L` with `L L' = m` for PSD `m` (Cholesky when possible, otherwise a
/// symmetric square root).
fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    match nalgebra::Cholesky::new(m.clone()) {
        Some(c) => c.l(),
        None => {
            let eig = nalgebra::SymmetricEigen::new(m.clone());
            let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
            &eig.eigenvectors * DMatrix::from_diagonal(&s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    #[serde(default)]
    pub name: String,
    pub n_units: usize,
    #[serde(rename = "T")]
    pub periods: usize,
    pub design: EventDesign,
    pub theta: CommonParams,
    pub prior: PriorSpec,
    pub seed: u64,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<TruePrior> {
        if self.n_units < 2 {
            return Err(Error::Config("n_units must be at least 2".into()));
        }
        self.design.validate(self.periods)?;
        self.theta.validate(&self.design)?;
        if self.prior.b0.len() != self.design.dim_lambda() {
            return Err(Error::Dimension(format!(
                "prior has dimension {} but lambda has dimension {}",
                self.prior.b0.len(),
                self.design.dim_lambda()
            )));
        }
        TruePrior::new(self.prior.clone())
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: PanelData,
    pub true_effects: Vec<UnitEffects>,
    /// `n x (J+1)` matrix of `delta_ij`.
    pub true_trajectories: DMatrix<f64>,
    pub true_prior: TruePrior,
    /// `n x (J+1-p)` effect shocks, horizons `p..=J`.
    pub shocks: DMatrix<f64>,
    /// `n x T` outcome innovations `U_it`, `t = 1..=T`.
    pub innovations: DMatrix<f64>,
}

impl SimulatedPanel {
    /// `n x (1+p)` matrix of true `lambda_i`.
    pub fn true_lambda(&self) -> DMatrix<f64> {
        let d = self.true_effects.first().map_or(0, |e| 1 + e.delta_init.len());
        DMatrix::from_fn(self.true_effects.len(), d, |i, k| {
            let e = &self.true_effects[i];
            if k == 0 {
                e.alpha
            } else {
                e.delta_init[k - 1]
            }
        })
    }
}

pub fn simulate(spec: &DgpSpec) -> Result<SimulatedPanel> {
    let prior = spec.validate()?;
    let design = spec.design;
    let theta = &spec.theta;
    let periods = spec.periods;
    let p = design.ar_order;
    let horizon = design.horizon;
    let rep = effect_representation(&theta.rho_delta, horizon, p)?;
    let n_shocks = horizon + 1 - p;
    let sd_u = theta.sigma2_u.sqrt();
    let sd_eps = theta.sigma2_eps.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_units;
    let mut y = DMatrix::zeros(n, periods + 1);
    let mut traj = DMatrix::zeros(n, horizon + 1);
    let mut shocks = DMatrix::zeros(n, n_shocks);
    let mut innov = DMatrix::zeros(n, periods);
    let mut effects = Vec::with_capacity(n);

    for i in 0..n {
        let y0: f64 = match spec.prior.y0_dist {
            Y0Dist::StandardNormal => rng.sample(StandardNormal),
        };
        let lambda = prior.sample(y0, &mut rng)?;
        let alpha = lambda[0];
        let delta_init: Vec<f64> = lambda.iter().skip(1).cloned().collect();
        let eps: Vec<f64> = (0..n_shocks).map(|_| sd_eps * rng.sample::<f64, _>(StandardNormal)).collect();
        let delta = rep.trajectory(&delta_init, &eps);
        let mut cumulative = 0.0;
        let effect_at: Vec<f64> = delta
            .iter()
            .map(|d| match design.loading {
                EffectLoading::Level => *d,
                EffectLoading::Cumulative => {
                    cumulative += d;
                    cumulative
                }
            })
            .collect();

        y[(i, 0)] = y0;
        for t in 1..=periods {
            let u = sd_u * rng.sample::<f64, _>(StandardNormal);
            let effect = design.event_time(t).map_or(0.0, |j| effect_at[j]);
            y[(i, t)] = theta.rho_y * y[(i, t - 1)] + alpha + effect + u;
            innov[(i, t - 1)] = u;
        }
        for (j, d) in delta.iter().enumerate() {
            traj[(i, j)] = *d;
        }
        for (k, e) in eps.iter().enumerate() {
            shocks[(i, k)] = *e;
        }
        effects.push(UnitEffects { alpha, delta_init });
    }

    Ok(SimulatedPanel {
        panel: PanelData::new(y, None)?,
        true_effects: effects,
        true_trajectories: traj,
        true_prior: prior,
        shocks,
        innovations: innov,
    })
}

/// Case label to `(rho_delta1, rho_delta2)`.
pub const CASES: [(usize, [f64; 2]); 4] = [(1, [0.0, 0.0]), (2, [0.3, 0.0]), (3, [0.5, 0.2]), (4, [0.75, -0.25])];

/// Settings of the benchmark design grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSettings {
    pub n_units: usize,
    pub periods: usize,
    pub t0: usize,
    pub horizon: usize,
    pub rho_y: f64,
    /// Marginal standard deviations of `(alpha, delta_0, delta_1)` under RC.
    pub marginal_sd: [f64; 3],
    pub initial_means: [f64; 3],
    pub crc_slope: [f64; 3],
    pub alpha_delta_corr: f64,
    pub delta_corr: f64,
    /// Distance of each mixture mean from the centre, in within-component s.d.
    pub mixture_offset_sd: f64,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            n_units: 1000,
            periods: 10,
            t0: 5,
            horizon: 5,
            rho_y: 0.8,
            marginal_sd: [1.0, 1.0, 0.5],
            initial_means: [0.0, 3.0, 1.5],
            crc_slope: [0.5, 0.5, 0.25],
            alpha_delta_corr: 0.5,
            delta_corr: 0.5,
            mixture_offset_sd: 2.0,
        }
    }
}

/// Prior for one cell of the benchmark grid.
///
/// Under CRC the residual variances shrink by `b1^2` so that the marginal
/// variance of `lambda` matches the RC design. The non-normal law is an
/// equal-weight two-component mixture split along `delta_0`, with component
/// means `mixture_offset_sd` within-component s.d. either side of the centre
/// and the same total `delta_0` variance as the normal law.
pub fn grid_prior(settings: &GridSettings, normal: bool, crc: bool, correlated: bool) -> PriorSpec {
    let slope = if crc { settings.crc_slope } else { [0.0; 3] };
    let mut sd = [0.0; 3];
    for k in 0..3 {
        sd[k] = (settings.marginal_sd[k].powi(2) - slope[k].powi(2)).max(0.0).sqrt();
    }
    let c = if correlated { settings.alpha_delta_corr } else { 0.0 };
    let corr = DMatrix::from_row_slice(3, 3, &[1.0, c, c, c, 1.0, settings.delta_corr, c, settings.delta_corr, 1.0]);
    let cov_with = |s: [f64; 3]| {
        let d = DMatrix::from_diagonal(&DVector::from_column_slice(&s));
        &d * &corr * &d
    };
    let family = if normal {
        PriorFamily::Gaussian { cov: from_matrix(&cov_with(sd)) }
    } else {
        let k = settings.mixture_offset_sd;
        let within_sd = sd[1] / (1.0 + k * k).sqrt();
        let offset = k * within_sd;
        let cov = from_matrix(&cov_with([sd[0], within_sd, sd[2]]));
        PriorFamily::GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0, -offset, 0.0], vec![0.0, offset, 0.0]],
            covs: vec![cov.clone(), cov],
        }
    };
    PriorSpec {
        family,
        b0: settings.initial_means.to_vec(),
        crc_slope: slope.to_vec(),
        alpha_delta_corr: c,
        y0_dist: Y0Dist::StandardNormal,
    }
}

/// Heavy-tailed variant of a grid prior: scaled t with the same covariance.
pub fn heavy_tail_variant(prior: &PriorSpec, df: f64) -> Result<PriorSpec> {
    let tp = TruePrior::new(prior.clone())?;
    Ok(PriorSpec { family: PriorFamily::ScaledT { df, cov: from_matrix(&tp.base_cov()) }, ..prior.clone() })
}

pub fn grid_name(case: usize, normal: bool, crc: bool, correlated: bool) -> String {
    format!(
        "case{case}-{}-{}-{}",
        if normal { "normal" } else { "nonnormal" },
        if crc { "crc" } else { "rc" },
        if correlated { "corr" } else { "indep" }
    )
}

/// The 32 benchmark designs: 4 cases x {normal, non-normal} x {RC, CRC} x
/// {alpha independent of delta, correlated}, all with AR(2) effects.
pub fn table1_designs_with(settings: &GridSettings, seed: u64) -> Vec<DgpSpec> {
    let mut out = Vec::with_capacity(32);
    for (case, rho) in CASES {
        for normal in [true, false] {
            for crc in [false, true] {
                for correlated in [false, true] {
                    out.push(DgpSpec {
                        name: grid_name(case, normal, crc, correlated),
                        n_units: settings.n_units,
                        periods: settings.periods,
                        design: EventDesign::new(settings.t0, settings.horizon, 2),
                        theta: CommonParams {
                            rho_y: settings.rho_y,
                            rho_delta: rho.to_vec(),
                            sigma2_u: 1.0 / settings.periods as f64,
                            sigma2_eps: 1.0 / settings.periods as f64,
                        },
                        prior: grid_prior(settings, normal, crc, correlated),
                        seed,
                    });
                }
            }
        }
    }
    out
}

pub fn table1_designs() -> Vec<DgpSpec> {
    table1_designs_with(&GridSettings::default(), 0)
}

pub fn lookup_design(name: &str) -> Result<DgpSpec> {
    table1_designs()
        .into_iter()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::Config(format!("unknown design '{name}'")))
}
