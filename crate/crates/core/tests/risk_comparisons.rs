use nalgebra::DMatrix;
use tvhte::eb::{
    compound_risk, fit_kernel, fit_mixture, fit_oracle, fit_parametric, sufficient_stats, tweedie, DensityBackend,
    MixtureOptions, SuffStats,
};
use tvhte::harness::true_eta;
use tvhte::simulate::{lookup_design, simulate, DgpSpec, SimulatedPanel};

fn truth_stats(name: &str, n: usize, seed: u64) -> (DgpSpec, SimulatedPanel, SuffStats) {
    let spec = DgpSpec { n_units: n, seed, ..lookup_design(name).unwrap() };
    let sim = simulate(&spec).unwrap();
    let ss = sufficient_stats(&sim.panel, &spec.design, &spec.theta).unwrap();
    (spec, sim, ss)
}

fn lambda_risk(ss: &SuffStats, backend: &DensityBackend, truth: &DMatrix<f64>) -> f64 {
    compound_risk(&tweedie(ss, backend, None).unwrap().lambda_tilde, truth).unwrap()
}

#[test]
fn kernel_risk_close_to_parametric_on_gaussian_design() {
    let (spec, sim, ss) = truth_stats("case3-normal-crc-corr", 10_000, 71);
    let truth = sim.true_lambda();
    let prior = true_eta(&spec).unwrap().prior;
    let par = lambda_risk(&ss, &fit_parametric(&ss, &prior).unwrap(), &truth);
    let ker = lambda_risk(&ss, &fit_kernel(&ss, None).unwrap(), &truth);
    eprintln!("kernel/parametric risk ratio {:.4}", ker / par);
    assert!(ker <= 1.10 * par, "kernel {ker} vs parametric {par}");
}

#[test]
fn two_component_mixture_beats_parametric_on_bimodal_design() {
    let (spec, sim, ss) = truth_stats("case3-nonnormal-crc-corr", 10_000, 81);
    let truth = sim.true_lambda();
    let prior = true_eta(&spec).unwrap().prior;
    let par = lambda_risk(&ss, &fit_parametric(&ss, &prior).unwrap(), &truth);
    let mix = lambda_risk(&ss, &fit_mixture(&ss, 2, &MixtureOptions::default()).unwrap(), &truth);
    let raw = compound_risk(&ss.lambda_hat, &truth).unwrap();
    assert!(mix < par && par < raw, "mixture {mix}, parametric {par}, raw {raw}");
}

#[test]
fn oracle_is_the_lower_envelope() {
    let (spec, sim, ss) = truth_stats("case4-nonnormal-crc-corr", 3000, 91);
    let truth = sim.true_lambda();
    let oracle = lambda_risk(&ss, &fit_oracle(&ss, &sim.true_prior).unwrap(), &truth);
    let prior = true_eta(&spec).unwrap().prior;
    for (name, r) in [
        ("parametric", lambda_risk(&ss, &fit_parametric(&ss, &prior).unwrap(), &truth)),
        ("kernel", lambda_risk(&ss, &fit_kernel(&ss, None).unwrap(), &truth)),
        ("mixture", lambda_risk(&ss, &fit_mixture(&ss, 2, &MixtureOptions::default()).unwrap(), &truth)),
        ("raw", compound_risk(&ss.lambda_hat, &truth).unwrap()),
    ] {
        assert!(oracle <= 1.05 * r, "oracle {oracle} vs {name} {r}");
    }
}
