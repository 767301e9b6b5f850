use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tvhte(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tvhte")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tvhte(args);
    assert!(
        out.status.success(),
        "tvhte {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_owned).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_fit_eb_test_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--design", "case3-normal-crc-corr", "--n-units", "200", "--seed", "4", "--out", s(&sim)]);
    let panel = sim.join("panel.csv");
    // header plus 200 units x 11 periods
    assert_eq!(lines(&panel).len(), 1 + 200 * 11);
    assert!(sim.join("truth.csv").exists());
    assert!(sim.join("dgp.json").exists());

    let fit = dir.path().join("fit");
    let stdout = ok(&[
        "--threads",
        "2",
        "fit",
        "--panel",
        s(&panel),
        "--t0",
        "5",
        "--horizon",
        "5",
        "--backends",
        "parametric,mixture",
        "--out",
        s(&fit),
    ]);
    assert!(stdout.contains("rho_Y"), "{stdout}");
    let params = lines(&fit.join("common_params.csv"));
    assert_eq!(params.len(), 1 + 17);
    assert!(params[1].starts_with("rho_Y,"));
    let tests = lines(&fit.join("tests.csv"));
    for name in ["test1_rc", "test2_joint", "test3_statedep", "parallel_trends"] {
        assert!(tests.iter().any(|l| l.starts_with(name)), "{name} missing");
    }
    let qmle = fit.join("qmle.json");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&qmle).unwrap()).unwrap();
    assert!(json.is_object());

    let eb = dir.path().join("eb");
    ok(&["eb", "--panel", s(&panel), "--qmle", s(&qmle), "--backends", "kernel", "--out", s(&eb)]);
    assert_eq!(lines(&eb.join("unit_effects.csv")).len(), 1 + 200);

    let wald = dir.path().join("wald");
    ok(&["test", "--qmle", s(&qmle), "--alpha", "0.1", "--out", s(&wald)]);
    assert_eq!(lines(&wald.join("tests.csv")).len(), 1 + 4);
}

#[test]
fn montecarlo_and_ovb_demo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.json");
    fs::write(&cfg, r#"{"designs": ["case1-normal-rc-indep"], "n_sim": 2, "estimators": ["parametric", "twfe"]}"#)
        .unwrap();
    let mc = dir.path().join("mc");
    let stdout = ok(&["montecarlo", "--config", s(&cfg), "--n-units", "150", "--seed", "3", "--out", s(&mc)]);
    assert!(stdout.contains("case1-normal-rc-indep"), "{stdout}");
    for f in ["mc_report.csv", "trajectories.csv", "run_manifest.json"] {
        assert!(mc.join(f).metadata().unwrap().len() > 0, "{f}");
    }

    let ovb = dir.path().join("ovb");
    ok(&["ovb-demo", "--n-units", "5000", "--seed", "1", "--out", s(&ovb)]);
    assert_eq!(lines(&ovb.join("ovb.csv")).len(), 1 + 3);
}

#[test]
fn aggregate_monthly_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("monthly.csv");
    let mut text = String::from("unit,year,month,value\n");
    for m in 1..=12 {
        text.push_str(&format!("a,2010,{m},{m}\n"));
    }
    fs::write(&input, text).unwrap();
    let out = dir.path().join("annual.csv");
    ok(&["aggregate", "--input", s(&input), "--out", s(&out)]);
    let rows = lines(&out);
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("a,2010,6.5"), "{}", rows[1]);
    assert!(!tvhte(&["aggregate", "--input", s(&input), "--out", s(&out), "--min-months", "13"]).status.success());
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let r = tvhte(&["simulate", "--design", "case9-normal-rc-indep", "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("error"));

    let sim = dir.path().join("sim");
    ok(&["simulate", "--design", "case1-normal-rc-indep", "--n-units", "50", "--out", s(&sim)]);
    let panel = sim.join("panel.csv");
    let r =
        tvhte(&["fit", "--panel", s(&panel), "--t0", "5", "--horizon", "5", "--backends", "oracle", "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(!tvhte(&["--threads", "0", "ovb-demo", "--out", s(&out)]).status.success());
    assert!(!tvhte(&["ovb-demo", "--delta", "1,2", "--out", s(&out)]).status.success());
}
