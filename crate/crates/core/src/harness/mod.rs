//! Monte Carlo driver, output schemas and the end-to-end pipeline.

pub mod io;
pub mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{default_leads, twfe, twfe_ar1, EventStudyFit};
use crate::eb::{compound_risk, default_truncation, sufficient_stats, tweedie, BackendKind, MixtureOptions};
use crate::error::{Error, Result};
use crate::model::PriorParams;
use crate::qmle::{fit, Eta, ParamLayout, QmleOptions};
use crate::simulate::{lookup_design, simulate, table1_designs, DgpSpec, TruePrior};
use crate::wald::all_tests;

use io::{read_rows, ser17, write_json, write_rows};
use pipeline::{fit_backend, PipelineOptions};

pub use io::{aggregate_monthly, fmt17, ingest_csv, read_panel, write_panel, CsvSchema, UnitEffectsTable};
pub use pipeline::{fit_pipeline, write_pipeline, PipelineOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Oracle,
    Parametric,
    Kernel,
    Mixture,
    Twfe,
    TwfeAr1,
}

impl Estimator {
    pub const ALL: [Estimator; 6] =
        [Self::Oracle, Self::Parametric, Self::Kernel, Self::Mixture, Self::Twfe, Self::TwfeAr1];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Oracle => "oracle",
            Self::Parametric => "parametric",
            Self::Kernel => "kernel",
            Self::Mixture => "mixture",
            Self::Twfe => "twfe",
            Self::TwfeAr1 => "twfe_ar1",
        }
    }

    pub fn backend(&self) -> Option<BackendKind> {
        match self {
            Self::Oracle => Some(BackendKind::Oracle),
            Self::Parametric => Some(BackendKind::Parametric),
            Self::Kernel => Some(BackendKind::Kernel),
            Self::Mixture => Some(BackendKind::Mixture),
            Self::Twfe | Self::TwfeAr1 => None,
        }
    }
}

impl std::str::FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| Error::Config(format!("unknown estimator '{s}'")))
    }
}

fn default_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

fn default_alpha() -> f64 {
    0.05
}

fn default_trajectory_units() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    /// Named grid designs; `"all"` expands to the full grid.
    #[serde(default)]
    pub designs: Vec<String>,
    #[serde(default)]
    pub custom_designs: Vec<DgpSpec>,
    pub n_sim: usize,
    /// Overrides every design's number of units.
    #[serde(default)]
    pub n_units: Option<usize>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub qmle: QmleOptions,
    #[serde(default)]
    pub mixture: MixtureOptions,
    /// Units per design whose trajectories are exported from replication 0.
    #[serde(default = "default_trajectory_units")]
    pub trajectory_units: usize,
}

impl McConfig {
    pub fn new(designs: &[&str], n_sim: usize) -> Self {
        Self {
            designs: designs.iter().map(|s| s.to_string()).collect(),
            custom_designs: Vec::new(),
            n_sim,
            n_units: None,
            estimators: default_estimators(),
            seed: 0,
            out_dir: None,
            threads: None,
            alpha: default_alpha(),
            qmle: QmleOptions::default(),
            mixture: MixtureOptions::default(),
            trajectory_units: default_trajectory_units(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
    }

    /// Validated list of designs with the unit override applied.
    pub fn resolve_designs(&self) -> Result<Vec<DgpSpec>> {
        if self.n_sim == 0 {
            return Err(Error::Config("n_sim must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha = {} outside (0, 1)", self.alpha)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        let mut out = Vec::new();
        for name in &self.designs {
            if name == "all" {
                out.extend(table1_designs());
            } else {
                out.push(lookup_design(name)?);
            }
        }
        out.extend(self.custom_designs.iter().cloned());
        if out.is_empty() {
            return Err(Error::Config("no designs selected".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &mut out {
            if let Some(n) = self.n_units {
                d.n_units = n;
            }
            if d.name.is_empty() {
                return Err(Error::Config("custom designs need a name".into()));
            }
            if !seen.insert(d.name.clone()) {
                return Err(Error::Config(format!("design '{}' listed twice", d.name)));
            }
            d.validate()?;
        }
        Ok(out)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of replication `rep` of `design`, independent of scheduling.
pub fn replication_seed(master: u64, design: &str, rep: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ fnv1a(design)) ^ rep as u64)
}

/// `eta` implied by a simulation design (the pseudo-true value under a
/// non-Gaussian prior).
pub fn true_eta(spec: &DgpSpec) -> Result<Eta> {
    let prior = TruePrior::new(spec.prior.clone())?;
    Ok(Eta {
        theta: spec.theta.clone(),
        prior: PriorParams {
            b0: DVector::from_column_slice(&spec.prior.b0),
            b1: DVector::from_column_slice(&spec.prior.crc_slope),
            sigma_lambda: prior.base_cov(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub design: String,
    pub rep: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub bias: f64,
    /// Standard deviation across replications (divisor `n_ok`).
    pub sd: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub estimator: String,
    /// Mean over replications of `sum_i ||lambda_tilde_i - lambda_i||^2 / N`.
    pub lambda_risk: Option<f64>,
    /// Same for the effect path `delta_i0..delta_iJ`.
    pub trajectory_risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub design: String,
    pub n_sim: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub aborted: bool,
    pub max_grad_norm: f64,
    pub params: Vec<ParamSummary>,
    /// `(test name, rejection rate)`
    pub tests: Vec<(String, f64)>,
    pub risks: Vec<RiskSummary>,
}

impl DesignSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn rejection_rate(&self, test: &str) -> Option<f64> {
        self.tests.iter().find(|(n, _)| n == test).map(|(_, r)| *r)
    }

    pub fn risk(&self, estimator: &str) -> Option<&RiskSummary> {
        self.risks.iter().find(|r| r.estimator == estimator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub design: String,
    pub unit: usize,
    pub estimator: String,
    pub j: usize,
    #[serde(serialize_with = "ser17")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct McReport {
    pub designs: Vec<DesignSummary>,
    pub failures: Vec<RepFailure>,
    pub trajectories: Vec<TrajectorySample>,
}

impl McReport {
    pub fn design(&self, name: &str) -> Option<&DesignSummary> {
        self.designs.iter().find(|d| d.design == name)
    }
}

struct RepResult {
    eta: DVector<f64>,
    grad_norm: f64,
    rejections: Vec<(String, bool)>,
    /// `(estimator, lambda risk, trajectory risk)`, all divided by `N`
    risks: Vec<(String, Option<f64>, f64)>,
    samples: Vec<TrajectorySample>,
}

fn path_risk(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    Ok(compound_risk(estimate, truth)? / truth.nrows() as f64)
}

fn baseline_paths(fit: &EventStudyFit, n: usize, horizon: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, horizon + 1, |_, j| fit.coefficient(j as i64).unwrap_or(0.0))
}

fn run_replication(cfg: &McConfig, spec: &DgpSpec, rep: usize, seed: u64) -> Result<RepResult> {
    let spec = DgpSpec { seed, ..spec.clone() };
    let sim = simulate(&spec)?;
    let n = spec.n_units;
    let horizon = spec.design.horizon;
    let qopts = QmleOptions { seed: splitmix64(seed ^ 1), ..cfg.qmle.clone() };
    let qmle = fit(&sim.panel, &spec.design, &qopts)?;
    let rejections = all_tests(&qmle, cfg.alpha)?.into_iter().map(|t| (t.name, t.reject)).collect();

    let truth_lambda = sim.true_lambda();
    let truth_paths = &sim.true_trajectories;
    let keep = if rep == 0 { cfg.trajectory_units.min(n) } else { 0 };
    let mut samples = Vec::new();
    let mut push_paths = |estimator: &str, paths: &DMatrix<f64>| {
        for i in 0..keep {
            for j in 0..=horizon {
                samples.push(TrajectorySample {
                    design: spec.name.clone(),
                    unit: i,
                    estimator: estimator.to_string(),
                    j,
                    value: paths[(i, j)],
                });
            }
        }
    };
    push_paths("truth", truth_paths);

    let mut risks = Vec::new();
    let backends: Vec<BackendKind> = cfg.estimators.iter().filter_map(|e| e.backend()).collect();
    if !backends.is_empty() {
        let ss = sufficient_stats(&sim.panel, &spec.design, &qmle.eta.theta)?;
        let raw_paths = crate::eb::effect_paths(&ss.lambda_hat, &ss.init_coeffs);
        risks.push((
            "raw".to_string(),
            Some(path_risk(&ss.lambda_hat, &truth_lambda)?),
            path_risk(&raw_paths, truth_paths)?,
        ));
        let popts = PipelineOptions {
            mixture: MixtureOptions { seed: splitmix64(seed ^ 2), ..cfg.mixture.clone() },
            ..PipelineOptions::default()
        };
        let radius = Some(default_truncation(&ss));
        for kind in backends {
            let backend = fit_backend(kind, &ss, &qmle, &popts, Some(&sim.true_prior))?;
            let eb = tweedie(&ss, &backend, radius)?;
            risks.push((
                kind.to_string(),
                Some(path_risk(&eb.lambda_tilde, &truth_lambda)?),
                path_risk(&eb.trajectories, truth_paths)?,
            ));
            push_paths(kind.as_str(), &eb.trajectories);
        }
    }
    let leads = default_leads(&spec.design);
    for est in &cfg.estimators {
        let fit = match est {
            Estimator::Twfe => twfe(&sim.panel, &spec.design, leads)?,
            Estimator::TwfeAr1 => twfe_ar1(&sim.panel, &spec.design, leads)?,
            _ => continue,
        };
        let paths = baseline_paths(&fit, n, horizon);
        risks.push((est.as_str().to_string(), None, path_risk(&paths, truth_paths)?));
        push_paths(est.as_str(), &paths);
    }
    Ok(RepResult { eta: qmle.eta_vector(), grad_norm: qmle.convergence.grad_norm, rejections, risks, samples })
}

fn summarize(spec: &DgpSpec, n_sim: usize, ok: &[RepResult], n_failed: usize) -> Result<DesignSummary> {
    let aborted = n_failed * 10 > n_sim;
    let layout = ParamLayout::new(spec.design.ar_order);
    let truth = true_eta(spec)?.to_vector();
    let n_ok = ok.len();
    let mut summary = DesignSummary {
        design: spec.name.clone(),
        n_sim,
        n_ok,
        n_failed,
        aborted,
        max_grad_norm: ok.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
        params: Vec::new(),
        tests: Vec::new(),
        risks: Vec::new(),
    };
    if aborted || ok.is_empty() {
        return Ok(summary);
    }
    let m = n_ok as f64;
    for (k, name) in layout.names().into_iter().enumerate() {
        let errs: Vec<f64> = ok.iter().map(|r| r.eta[k] - truth[k]).collect();
        let bias = errs.iter().sum::<f64>() / m;
        let var = errs.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / m;
        let mse = errs.iter().map(|e| e * e).sum::<f64>() / m;
        summary.params.push(ParamSummary { name, truth: truth[k], bias, sd: var.sqrt(), rmse: mse.sqrt() });
    }
    for (t, (name, _)) in ok[0].rejections.iter().enumerate() {
        let rate = ok.iter().filter(|r| r.rejections[t].1).count() as f64 / m;
        summary.tests.push((name.clone(), rate));
    }
    for (e, (name, lam, _)) in ok[0].risks.iter().enumerate() {
        summary.risks.push(RiskSummary {
            estimator: name.clone(),
            lambda_risk: lam.map(|_| ok.iter().map(|r| r.risks[e].1.unwrap_or(f64::NAN)).sum::<f64>() / m),
            trajectory_risk: ok.iter().map(|r| r.risks[e].2).sum::<f64>() / m,
        });
    }
    Ok(summary)
}

pub fn run_montecarlo(cfg: &McConfig) -> Result<McReport> {
    let designs = cfg.resolve_designs()?;
    let jobs: Vec<(usize, usize, u64)> = designs
        .iter()
        .enumerate()
        .flat_map(|(d, spec)| (0..cfg.n_sim).map(move |rep| (d, rep, replication_seed(cfg.seed, &spec.name, rep))))
        .collect();
    let work = || -> Vec<Result<RepResult>> {
        jobs.par_iter().map(|(d, rep, seed)| run_replication(cfg, &designs[*d], *rep, *seed)).collect()
    };
    let results = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };

    let mut report = McReport::default();
    let mut by_design: BTreeMap<usize, Vec<RepResult>> = BTreeMap::new();
    let mut failed = vec![0usize; designs.len()];
    for ((d, rep, seed), res) in jobs.iter().zip(results) {
        match res {
            Ok(r) => by_design.entry(*d).or_default().push(r),
            Err(e) => {
                log::warn!("{} replication {rep} (seed {seed}) failed: {e}", designs[*d].name);
                failed[*d] += 1;
                report.failures.push(RepFailure {
                    design: designs[*d].name.clone(),
                    rep: *rep,
                    seed: *seed,
                    error: e.to_string(),
                });
            }
        }
    }
    for (d, spec) in designs.iter().enumerate() {
        let ok = by_design.remove(&d).unwrap_or_default();
        let summary = summarize(spec, cfg.n_sim, &ok, failed[d])?;
        if summary.aborted {
            log::error!(
                "{}",
                Error::TooManyFailures { design: spec.name.clone(), failed: failed[d], total: cfg.n_sim }
            );
        }
        if !summary.aborted {
            if let Some(first) = ok.into_iter().next() {
                report.trajectories.extend(first.samples);
            }
        }
        report.designs.push(summary);
    }
    Ok(report)
}

/// One line of `mc_report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub design: String,
    pub kind: String,
    pub item: String,
    pub metric: String,
    #[serde(serialize_with = "ser17")]
    pub value: f64,
}

pub fn report_rows(report: &McReport) -> Vec<McRow> {
    let mut rows = Vec::new();
    for d in &report.designs {
        let mut push = |kind: &str, item: &str, metric: &str, value: f64| {
            rows.push(McRow {
                design: d.design.clone(),
                kind: kind.into(),
                item: item.into(),
                metric: metric.into(),
                value,
            })
        };
        push("run", "", "n_sim", d.n_sim as f64);
        push("run", "", "n_ok", d.n_ok as f64);
        push("run", "", "n_failed", d.n_failed as f64);
        push("run", "", "aborted", if d.aborted { 1.0 } else { 0.0 });
        push("run", "", "max_grad_norm", d.max_grad_norm);
        for p in &d.params {
            push("param", &p.name, "truth", p.truth);
            push("param", &p.name, "bias", p.bias);
            push("param", &p.name, "sd", p.sd);
            push("param", &p.name, "rmse", p.rmse);
        }
        for (name, rate) in &d.tests {
            push("test", name, "rejection_rate", *rate);
        }
        for r in &d.risks {
            if let Some(l) = r.lambda_risk {
                push("risk", &r.estimator, "lambda_risk", l);
            }
            push("risk", &r.estimator, "trajectory_risk", r.trajectory_risk);
        }
    }
    rows
}

/// Rebuilds the design summaries from `mc_report.csv` rows.
pub fn summaries_from_rows(rows: &[McRow]) -> Result<Vec<DesignSummary>> {
    let mut out: Vec<DesignSummary> = Vec::new();
    for row in rows {
        if out.last().is_none_or(|d| d.design != row.design) {
            out.push(DesignSummary {
                design: row.design.clone(),
                n_sim: 0,
                n_ok: 0,
                n_failed: 0,
                aborted: false,
                max_grad_norm: 0.0,
                params: Vec::new(),
                tests: Vec::new(),
                risks: Vec::new(),
            });
        }
        let d = out.last_mut().expect("pushed above");
        let bad = || Error::Config(format!("unexpected mc_report row {row:?}"));
        match (row.kind.as_str(), row.metric.as_str()) {
            ("run", "n_sim") => d.n_sim = row.value as usize,
            ("run", "n_ok") => d.n_ok = row.value as usize,
            ("run", "n_failed") => d.n_failed = row.value as usize,
            ("run", "aborted") => d.aborted = row.value != 0.0,
            ("run", "max_grad_norm") => d.max_grad_norm = row.value,
            ("param", metric) => {
                if d.params.last().is_none_or(|p| p.name != row.item) {
                    d.params.push(ParamSummary { name: row.item.clone(), truth: 0.0, bias: 0.0, sd: 0.0, rmse: 0.0 });
                }
                let p = d.params.last_mut().expect("pushed above");
                match metric {
                    "truth" => p.truth = row.value,
                    "bias" => p.bias = row.value,
                    "sd" => p.sd = row.value,
                    "rmse" => p.rmse = row.value,
                    _ => return Err(bad()),
                }
            }
            ("test", "rejection_rate") => d.tests.push((row.item.clone(), row.value)),
            ("risk", metric) => {
                if d.risks.last().is_none_or(|r| r.estimator != row.item) {
                    d.risks.push(RiskSummary { estimator: row.item.clone(), lambda_risk: None, trajectory_risk: 0.0 });
                }
                let r = d.risks.last_mut().expect("pushed above");
                match metric {
                    "lambda_risk" => r.lambda_risk = Some(row.value),
                    "trajectory_risk" => r.trajectory_risk = row.value,
                    _ => return Err(bad()),
                }
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}

pub const MC_REPORT_CSV: &str = "mc_report.csv";
pub const TRAJECTORIES_CSV: &str = "trajectories.csv";
pub const MANIFEST_JSON: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub design: String,
    pub rep: usize,
    pub seed: u64,
}

/// Reproducibility record; deliberately free of timestamps and hostnames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<SeedRecord>,
    pub failures: Vec<RepFailure>,
}

impl RunManifest {
    pub fn new<T: Serialize>(command: &str, config: &T) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            seeds: Vec::new(),
            failures: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_JSON), self)
    }
}

pub fn write_montecarlo(dir: &Path, cfg: &McConfig, report: &McReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(&dir.join(MC_REPORT_CSV), &report_rows(report))?;
    write_rows(&dir.join(TRAJECTORIES_CSV), &report.trajectories)?;
    let mut manifest = RunManifest::new("montecarlo", cfg)?;
    for spec in cfg.resolve_designs()? {
        for rep in 0..cfg.n_sim {
            manifest.seeds.push(SeedRecord {
                design: spec.name.clone(),
                rep,
                seed: replication_seed(cfg.seed, &spec.name, rep),
            });
        }
    }
    manifest.failures = report.failures.clone();
    manifest.write(dir)
}

pub fn read_mc_report(dir: &Path) -> Result<Vec<DesignSummary>> {
    summaries_from_rows(&read_rows::<McRow>(&dir.join(MC_REPORT_CSV))?)
}
