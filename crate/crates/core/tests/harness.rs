use std::fs;
use std::path::Path;

use tvhte::harness::io::{read_rows, EventStudyRow, ParamRow, TestRow};
use tvhte::harness::pipeline::{PipelineOptions, COMMON_PARAMS_CSV, EVENT_STUDY_CSV, TESTS_CSV, UNIT_EFFECTS_CSV};
use tvhte::harness::{
    fit_pipeline, ingest_csv, read_mc_report, read_panel, run_montecarlo, write_montecarlo, write_panel,
    write_pipeline, CsvSchema, Estimator, McConfig, UnitEffectsTable, MANIFEST_JSON, MC_REPORT_CSV, TRAJECTORIES_CSV,
};
use tvhte::simulate::{lookup_design, simulate, DgpSpec};
use tvhte::Error;

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn pipeline_outputs_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DgpSpec { n_units: 300, seed: 3, ..lookup_design("case3-normal-crc-corr").unwrap() };
    let sim = simulate(&spec).unwrap();
    let out = fit_pipeline(&sim.panel, &spec.design, &PipelineOptions::default(), None).unwrap();
    write_pipeline(dir.path(), &sim.panel, &out).unwrap();

    let params: Vec<ParamRow> = read_rows(&dir.path().join(COMMON_PARAMS_CSV)).unwrap();
    assert_eq!(params.len(), 17);
    let est = out.qmle.eta_vector();
    let se = out.qmle.std_errors();
    for (k, row) in params.iter().enumerate() {
        assert_eq!(row.parameter, out.qmle.names()[k]);
        assert_eq!(row.estimate, est[k]);
        assert_eq!(row.std_error, se[k]);
        assert!(row.std_error > 0.0);
    }

    let es: Vec<EventStudyRow> = read_rows(&dir.path().join(EVENT_STUDY_CSV)).unwrap();
    let n_es: usize = out.baselines.iter().map(|b| b.event_times.len()).sum();
    assert_eq!(es.len(), n_es);
    let first = &out.baselines[0];
    assert_eq!(es[0].coefficient, first.coefficients[0]);
    assert_eq!(es[0].std_error, first.std_errors[0]);

    let tests: Vec<TestRow> = read_rows(&dir.path().join(TESTS_CSV)).unwrap();
    let expected: Vec<TestRow> = out.tests.iter().map(TestRow::from).collect();
    assert_eq!(tests, expected);

    let table = UnitEffectsTable::read(&dir.path().join(UNIT_EFFECTS_CSV)).unwrap();
    assert_eq!(table.units.len(), 300);
    assert_eq!(table.blocks.len(), out.eb.len());
    for ((name, lam, traj), eb) in table.blocks.iter().zip(&out.eb) {
        assert_eq!(name, &eb.backend.to_string());
        assert_eq!(lam, &eb.lambda_tilde);
        assert_eq!(traj, &eb.trajectories);
    }
}

#[test]
fn panel_roundtrip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DgpSpec { n_units: 25, seed: 1, ..lookup_design("case2-nonnormal-rc-corr").unwrap() };
    let sim = simulate(&spec).unwrap();
    let path = dir.path().join("panel.csv");
    write_panel(&path, &sim.panel).unwrap();
    let back = read_panel(&path, &CsvSchema::default()).unwrap();
    assert_eq!(back.outcomes(), sim.panel.outcomes());
    assert_eq!(back.label(10), "11");
}

#[test]
fn toy_csv_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.csv");
    let mut text = String::from("county,year,rate\n");
    for u in ["10", "9", "100"] {
        for t in 2003..2007 {
            text.push_str(&format!("{u},{t},{}\n", u.len() as f64 + (t - 2003) as f64 * 0.5));
        }
    }
    write(&path, &text);
    let schema = CsvSchema { unit: "county".into(), time: "year".into(), outcome: "rate".into() };
    let panel = read_panel(&path, &schema).unwrap();
    assert_eq!(panel.outcomes().shape(), (3, 4));
    assert_eq!(panel.unit_labels().unwrap(), ["9", "10", "100"]);
    assert_eq!(panel.outcomes()[(2, 3)], 4.5);
    // too short for t0 >= 3 with J >= 1
    assert!(matches!(ingest_csv(&path, &schema, 3, 1, 1), Err(Error::InvalidDesign(_))));
}

#[test]
fn unbalanced_csv_names_the_holes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("holes.csv");
    write(&path, "unit,time,outcome\na,0,1\na,1,2\na,2,3\nb,0,1\nb,2,3\nc,0,1\nc,1,1\n");
    match read_panel(&path, &CsvSchema::default()) {
        Err(Error::Unbalanced(msg)) => {
            assert!(msg.contains("(b, 1)"), "{msg}");
            assert!(msg.contains("(c, 2)"), "{msg}");
        }
        other => panic!("expected an unbalanced-panel error, got {other:?}"),
    }
}

#[test]
fn case1_common_parameter_accuracy() {
    let mut cfg = McConfig::new(&["case1-normal-rc-indep"], 100);
    cfg.estimators = Vec::new();
    cfg.seed = 2;
    let report = run_montecarlo(&cfg).unwrap();
    let d = &report.designs[0];
    assert_eq!(d.n_ok, 100);
    let rho = d.param("rho_Y").unwrap();
    eprintln!("rho_Y bias {:.5} sd {:.5}", rho.bias, rho.sd);
    assert!(rho.bias.abs() <= 0.004, "bias {}", rho.bias);
    assert!(rho.sd <= 0.01, "sd {}", rho.sd);
    for p in &d.params {
        assert!((p.rmse.powi(2) - p.bias.powi(2) - p.sd.powi(2)).abs() <= 1e-10, "{}", p.name);
    }
    assert!(d.max_grad_norm < 1e-5);
}

#[test]
fn smoke_run_emits_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = McConfig::new(&["case3-nonnormal-crc-corr"], 1);
    cfg.n_units = Some(300);
    cfg.estimators = Estimator::ALL.to_vec();
    let report = run_montecarlo(&cfg).unwrap();
    write_montecarlo(dir.path(), &cfg, &report).unwrap();
    for f in [MC_REPORT_CSV, TRAJECTORIES_CSV, MANIFEST_JSON] {
        assert!(dir.path().join(f).metadata().unwrap().len() > 0, "{f}");
    }
    let back = read_mc_report(dir.path()).unwrap();
    assert_eq!(back, report.designs);
    let d = &report.designs[0];
    for name in ["raw", "oracle", "parametric", "kernel", "mixture", "twfe", "twfe_ar1"] {
        assert!(d.risk(name).is_some(), "{name}");
    }
    assert_eq!(d.tests.len(), 4);
}

fn run_to_dir(cfg: &McConfig, dir: &Path) -> Vec<(String, Vec<u8>)> {
    let report = run_montecarlo(cfg).unwrap();
    write_montecarlo(dir, cfg, &report).unwrap();
    [MC_REPORT_CSV, TRAJECTORIES_CSV].iter().map(|f| (f.to_string(), fs::read(dir.join(f)).unwrap())).collect()
}

#[test]
fn montecarlo_is_deterministic_across_thread_counts() {
    let mut cfg = McConfig::new(&["case2-nonnormal-crc-corr", "case4-normal-rc-indep"], 3);
    cfg.n_units = Some(200);
    cfg.seed = 9;
    cfg.estimators = vec![Estimator::Parametric, Estimator::Kernel, Estimator::Mixture, Estimator::TwfeAr1];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    cfg.threads = Some(1);
    let first = run_to_dir(&cfg, a.path());
    let second = run_to_dir(&cfg, b.path());
    cfg.threads = Some(3);
    let third = run_to_dir(&cfg, c.path());
    assert_eq!(first, second);
    assert_eq!(first, third);
}

#[test]
fn config_rejects_unknown_fields_and_designs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    write(&path, r#"{"designs": ["case1-normal-rc-indep"], "n_sim": 2, "bogus": 1}"#);
    assert!(McConfig::from_json_file(&path).is_err());
    write(&path, r#"{"designs": ["case1-normal-rc-indep"], "n_sim": 2, "estimators": ["parametric", "twfe"]}"#);
    let cfg = McConfig::from_json_file(&path).unwrap();
    assert_eq!(cfg.estimators, vec![Estimator::Parametric, Estimator::Twfe]);
    let bad = McConfig::new(&["case9-normal-rc-indep"], 1);
    assert!(run_montecarlo(&bad).is_err());
    let zero = McConfig::new(&["case1-normal-rc-indep"], 0);
    assert!(run_montecarlo(&zero).is_err());
}
