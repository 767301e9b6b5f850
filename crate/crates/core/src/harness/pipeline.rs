//! End-to-end estimation on one panel.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{common_param_rows, event_study_rows, write_rows, TestRow, UnitEffectsTable};
use crate::baselines::{default_leads, twfe, twfe_ar1, EventStudyFit};
use crate::eb::{
    fit_kernel, fit_mixture, fit_mixture_bic, fit_oracle, fit_parametric, sufficient_stats, tweedie, BackendKind,
    DensityBackend, EbResult, MixtureOptions, SuffStats,
};
use crate::error::{Error, Result};
use crate::model::{EventDesign, PanelData};
use crate::qmle::{fit, QmleOptions, QmleResult};
use crate::simulate::TruePrior;
use crate::wald::{all_tests, WaldTest};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub qmle: QmleOptions,
    pub backends: Vec<BackendKind>,
    /// Tweedie truncation radius; `None` disables clipping.
    pub truncation: Option<f64>,
    /// Common kernel bandwidth; `None` uses per-dimension Silverman.
    pub bandwidth: Option<f64>,
    /// Fixed mixture size; `None` selects `K` by BIC.
    pub mixture_components: Option<usize>,
    pub mixture: MixtureOptions,
    pub baselines: bool,
    pub leads: Option<usize>,
    pub alpha: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            qmle: QmleOptions::default(),
            backends: vec![BackendKind::Parametric, BackendKind::Kernel, BackendKind::Mixture],
            truncation: None,
            bandwidth: None,
            mixture_components: None,
            mixture: MixtureOptions::default(),
            baselines: true,
            leads: None,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub design: EventDesign,
    pub qmle: QmleResult,
    pub suff: SuffStats,
    pub eb: Vec<EbResult>,
    pub baselines: Vec<EventStudyFit>,
    pub tests: Vec<WaldTest>,
}

pub fn fit_backend(
    kind: BackendKind,
    ss: &SuffStats,
    qmle: &QmleResult,
    opts: &PipelineOptions,
    truth: Option<&TruePrior>,
) -> Result<DensityBackend> {
    match kind {
        BackendKind::Parametric => fit_parametric(ss, &qmle.eta.prior),
        BackendKind::Kernel => fit_kernel(ss, opts.bandwidth),
        BackendKind::Mixture => match opts.mixture_components {
            Some(k) => fit_mixture(ss, k, &opts.mixture),
            None => fit_mixture_bic(ss, &opts.mixture),
        },
        BackendKind::Oracle => {
            let truth = truth.ok_or_else(|| Error::Config("the oracle backend needs the true prior".into()))?;
            fit_oracle(ss, truth)
        }
    }
}

pub fn fit_pipeline(
    panel: &PanelData,
    design: &EventDesign,
    opts: &PipelineOptions,
    truth: Option<&TruePrior>,
) -> Result<PipelineOutput> {
    let qmle = fit(panel, design, &opts.qmle)?;
    let suff = sufficient_stats(panel, design, &qmle.eta.theta)?;
    let mut eb = Vec::with_capacity(opts.backends.len());
    for kind in &opts.backends {
        let backend = fit_backend(*kind, &suff, &qmle, opts, truth)?;
        eb.push(tweedie(&suff, &backend, opts.truncation)?);
    }
    let baselines = if opts.baselines {
        let leads = opts.leads.unwrap_or_else(|| default_leads(design));
        vec![twfe(panel, design, leads)?, twfe_ar1(panel, design, leads)?]
    } else {
        Vec::new()
    };
    let tests = all_tests(&qmle, opts.alpha)?;
    Ok(PipelineOutput { design: *design, qmle, suff, eb, baselines, tests })
}

pub const COMMON_PARAMS_CSV: &str = "common_params.csv";
pub const UNIT_EFFECTS_CSV: &str = "unit_effects.csv";
pub const EVENT_STUDY_CSV: &str = "event_study.csv";
pub const TESTS_CSV: &str = "tests.csv";

pub fn write_pipeline(dir: &Path, panel: &PanelData, out: &PipelineOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_rows(&dir.join(COMMON_PARAMS_CSV), &common_param_rows(&out.qmle))?;
    let units = (0..panel.n_units()).map(|i| panel.label(i)).collect();
    UnitEffectsTable::from_results(units, &out.eb).write(&dir.join(UNIT_EFFECTS_CSV))?;
    write_rows(&dir.join(EVENT_STUDY_CSV), &event_study_rows(&out.baselines))?;
    let tests: Vec<TestRow> = out.tests.iter().map(TestRow::from).collect();
    write_rows(&dir.join(TESTS_CSV), &tests)?;
    Ok(())
}
