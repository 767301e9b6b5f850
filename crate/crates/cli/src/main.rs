use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tvhte::baselines::ovb_demo;
use tvhte::eb::{sufficient_stats, tweedie, BackendKind};
use tvhte::harness::io::{write_rows, OvbCsvRow, TestRow};
use tvhte::harness::pipeline::{fit_backend, PipelineOptions};
use tvhte::harness::{
    aggregate_monthly, fit_pipeline, ingest_csv, run_montecarlo, write_montecarlo, write_panel, write_pipeline,
    CsvSchema, McConfig, RunManifest, UnitEffectsTable,
};
use tvhte::qmle::QmleResult;
use tvhte::simulate::{lookup_design, simulate, DgpSpec};
use tvhte::wald::all_tests;

#[derive(Parser)]
#[command(name = "tvhte", version, about = "Heterogeneous dynamic event-study estimation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel from a named grid design or a JSON design file.
    Simulate(SimulateArgs),
    /// QMLE, empirical Bayes, baselines and tests on a long-format panel CSV.
    Fit(FitArgs),
    /// Empirical-Bayes effects from a panel and a saved QMLE result.
    Eb(EbArgs),
    /// Wald tests from a saved QMLE result.
    Test(TestArgs),
    /// Monte Carlo experiment from a JSON config.
    Montecarlo(McArgs),
    /// Omitted-lag bias of the naive event-study regression.
    OvbDemo(OvbArgs),
    /// Average (unit, year, month, value) rows to annual (unit, time, outcome).
    Aggregate(AggregateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Grid design name, e.g. case3-nonnormal-crc-corr.
    #[arg(long, conflicts_with = "config")]
    design: Option<String>,
    /// JSON file with a full design.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_units: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PanelArgs {
    /// Long-format CSV with unit, time and outcome columns.
    #[arg(long)]
    panel: PathBuf,
    #[arg(long, default_value = "unit")]
    unit_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
}

impl PanelArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema { unit: self.unit_col.clone(), time: self.time_col.clone(), outcome: self.outcome_col.clone() }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// Treatment period (after remapping times to 0..T).
    #[arg(long)]
    t0: usize,
    /// Last event time J.
    #[arg(long)]
    horizon: usize,
    /// AR order of the effect process.
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[command(flatten)]
    eb: EbOptions,
    /// Number of TWFE leads (default: t0).
    #[arg(long)]
    leads: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EbOptions {
    /// Comma-separated EB backends (parametric, kernel, mixture).
    #[arg(long, value_delimiter = ',', default_value = "parametric,kernel,mixture")]
    backends: Vec<BackendKind>,
    /// Tweedie truncation radius (default: none).
    #[arg(long)]
    truncation: Option<f64>,
    /// Kernel bandwidth used in every dimension (default: Silverman).
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Mixture size (default: chosen by BIC).
    #[arg(long)]
    components: Option<usize>,
}

impl EbOptions {
    fn apply(&self, opts: &mut PipelineOptions) -> Result<()> {
        if self.backends.contains(&BackendKind::Oracle) {
            bail!("the oracle backend is only available inside montecarlo runs");
        }
        opts.backends = self.backends.clone();
        opts.truncation = self.truncation;
        opts.bandwidth = self.bandwidth;
        opts.mixture_components = self.components;
        Ok(())
    }
}

#[derive(Args)]
struct EbArgs {
    #[command(flatten)]
    panel: PanelArgs,
    /// qmle.json written by `fit`.
    #[arg(long)]
    qmle: PathBuf,
    #[command(flatten)]
    eb: EbOptions,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    qmle: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct McArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_sim: Option<usize>,
    #[arg(long)]
    n_units: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OvbArgs {
    #[arg(long, default_value_t = 0.8)]
    rho_y: f64,
    #[arg(long, value_delimiter = ',', default_value = "1,1.2,0.5")]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    n_units: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum months per unit-year.
    #[arg(long, default_value_t = 12)]
    min_months: usize,
}

fn read_qmle(path: &Path) -> Result<QmleResult> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(f).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut spec: DgpSpec = match (&a.design, &a.config) {
        (Some(name), None) => lookup_design(name)?,
        (None, Some(path)) => serde_json::from_reader(std::fs::File::open(path)?)?,
        _ => bail!("pass either --design or --config"),
    };
    if let Some(n) = a.n_units {
        spec.n_units = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let sim = simulate(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    write_panel(&a.out.join("panel.csv"), &sim.panel)?;
    let truth = UnitEffectsTable {
        units: (0..sim.panel.n_units()).map(|i| sim.panel.label(i)).collect(),
        ar_order: spec.design.ar_order,
        horizon: spec.design.horizon,
        blocks: vec![("truth".into(), sim.true_lambda(), sim.true_trajectories.clone())],
    };
    truth.write(&a.out.join("truth.csv"))?;
    tvhte::harness::io::write_json(&a.out.join("dgp.json"), &spec)?;
    RunManifest::new("simulate", &spec)?.write(&a.out)?;
    println!("simulated {} units x {} periods into {}", spec.n_units, spec.periods + 1, a.out.display());
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let (panel, design) = ingest_csv(&a.panel.panel, &a.panel.schema(), a.t0, a.horizon, a.p)?;
    let mut opts = PipelineOptions { leads: a.leads, alpha: a.alpha, ..PipelineOptions::default() };
    opts.qmle.seed = a.seed;
    opts.mixture.seed = a.seed;
    a.eb.apply(&mut opts)?;
    let out = fit_pipeline(&panel, &design, &opts, None)?;
    write_pipeline(&a.out, &panel, &out)?;
    tvhte::harness::io::write_json(&a.out.join("qmle.json"), &out.qmle)?;
    RunManifest::new("fit", &opts)?.write(&a.out)?;

    println!("N = {}, T = {}, loglik = {:.6}", panel.n_units(), panel.periods(), out.qmle.loglik);
    println!("{:<28} {:>12} {:>12}", "parameter", "estimate", "s.e.");
    let se = out.qmle.std_errors();
    for (k, name) in out.qmle.names().iter().enumerate() {
        println!("{:<28} {:>12.4} {:>12.4}", name, out.qmle.eta_vector()[k], se[k]);
    }
    print_tests(&out.tests.iter().map(TestRow::from).collect::<Vec<_>>());
    Ok(())
}

fn print_tests(rows: &[TestRow]) {
    println!("{:<16} {:>12} {:>4} {:>8} {:>10} {:>7}", "test", "statistic", "df", "crit", "p", "reject");
    for t in rows {
        println!(
            "{:<16} {:>12.3} {:>4} {:>8.3} {:>10.4} {:>7}",
            t.name, t.statistic, t.df, t.critical_value, t.p_value, t.reject
        );
    }
}

fn cmd_eb(a: EbArgs) -> Result<()> {
    let qmle = read_qmle(&a.qmle)?;
    let design = qmle.design;
    let (panel, _) = ingest_csv(&a.panel.panel, &a.panel.schema(), design.t0, design.horizon, design.ar_order)?;
    if panel.n_units() != qmle.n_units || panel.periods() != qmle.periods {
        bail!("panel shape does not match the saved QMLE result");
    }
    let mut opts = PipelineOptions::default();
    a.eb.apply(&mut opts)?;
    let ss = sufficient_stats(&panel, &design, &qmle.eta.theta)?;
    let mut results = Vec::new();
    for kind in &opts.backends {
        let backend = fit_backend(*kind, &ss, &qmle, &opts, None)?;
        let res = tweedie(&ss, &backend, opts.truncation)?;
        println!(
            "{kind}: {} units, {} truncated, {} fell back to lambda_hat",
            ss.n_units(),
            res.truncation_count,
            res.fallback_count
        );
        results.push(res);
    }
    std::fs::create_dir_all(&a.out)?;
    let units = (0..panel.n_units()).map(|i| panel.label(i)).collect();
    UnitEffectsTable::from_results(units, &results).write(&a.out.join("unit_effects.csv"))?;
    RunManifest::new("eb", &opts)?.write(&a.out)?;
    Ok(())
}

fn cmd_test(a: TestArgs) -> Result<()> {
    let qmle = read_qmle(&a.qmle)?;
    let rows: Vec<TestRow> = all_tests(&qmle, a.alpha)?.iter().map(TestRow::from).collect();
    std::fs::create_dir_all(&a.out)?;
    write_rows(&a.out.join("tests.csv"), &rows)?;
    print_tests(&rows);
    Ok(())
}

fn cmd_montecarlo(a: McArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = McConfig::from_json_file(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_sim {
        cfg.n_sim = n;
    }
    if let Some(n) = a.n_units {
        cfg.n_units = Some(n);
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let out = a.out.or_else(|| cfg.out_dir.clone()).context("pass --out or set out_dir in the config")?;
    let report = run_montecarlo(&cfg)?;
    write_montecarlo(&out, &cfg, &report)?;
    for d in &report.designs {
        let rho = d.param("rho_Y");
        println!(
            "{:<28} ok {:>4}/{:<4} rho_Y bias {:>9.4} sd {:>7.4}  rejections {}",
            d.design,
            d.n_ok,
            d.n_sim,
            rho.map_or(f64::NAN, |p| p.bias),
            rho.map_or(f64::NAN, |p| p.sd),
            d.tests.iter().map(|(n, r)| format!("{n}={r:.2}")).collect::<Vec<_>>().join(" ")
        );
    }
    let aborted: Vec<&str> = report.designs.iter().filter(|d| d.aborted).map(|d| d.design.as_str()).collect();
    if !aborted.is_empty() {
        bail!("more than 10% of replications failed in: {}", aborted.join(", "));
    }
    Ok(())
}

fn cmd_ovb(a: OvbArgs) -> Result<()> {
    let delta: [f64; 3] = a.delta.as_slice().try_into().context("--delta needs exactly three values")?;
    let rows = ovb_demo(a.rho_y, delta, a.n_units, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    write_rows(&a.out.join("ovb.csv"), &rows.iter().map(OvbCsvRow::from).collect::<Vec<_>>())?;
    println!("{:>2} {:>8} {:>10} {:>8} {:>10} {:>10}", "j", "delta", "naive", "s.e.", "bias", "analytic");
    for r in &rows {
        println!(
            "{:>2} {:>8.3} {:>10.4} {:>8.4} {:>10.4} {:>10.4}",
            r.j, r.true_delta, r.naive_delta, r.naive_se, r.simulated_bias, r.analytic_bias
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().ok();
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eb(a) => cmd_eb(a),
        Command::Test(a) => cmd_test(a),
        Command::Montecarlo(a) => cmd_montecarlo(a, cli.threads),
        Command::OvbDemo(a) => cmd_ovb(a),
        Command::Aggregate(a) => {
            let n = aggregate_monthly(&a.input, &a.out, a.min_months)?;
            println!("wrote {n} unit-years to {}", a.out.display());
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
