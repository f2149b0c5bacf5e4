use adrc_lab::metrics::{fit_exponential, instability_percent};
use adrc_lab::plantmodel::CoefficientFactors;
use adrc_lab::sim::scenarios::{
    e1_configs, scenario_e2, scenario_e3, ExperimentSettings, E1_OMEGA_C,
};
use adrc_lab::sim::{
    run_scenario, ControllerKind, NoiseProfile, ReferenceProfile, ScenarioConfig, SimulationTrace,
};

fn quiet() -> ExperimentSettings {
    ExperimentSettings::default().quiet()
}

fn columns(tr: &SimulationTrace) -> Vec<(String, Vec<f64>)> {
    SimulationTrace::header(tr.n())
        .into_iter()
        .filter(|h| h != "t")
        .map(|h| {
            let v = tr.column(&h).unwrap().to_vec();
            (h, v)
        })
        .collect()
}

#[test]
fn regulation_holds_setpoint_under_mismatch() {
    for kind in [ControllerKind::Dladrc, ControllerKind::Sadrc, ControllerKind::Pid] {
        let s = quiet();
        let mut c = s.dladrc("reg".into(), 2, 300.0, 300.0, 1000.0, ReferenceProfile::constant(1.5), 2.0);
        c.controller = kind;
        c.mismatch = CoefficientFactors { beta: 1.2, alpha3: 0.9, ..Default::default() };
        let tr = run_scenario(&c).unwrap();
        let e = tr.e.last().unwrap().abs();
        assert!(e < 1e-6 * 1.5, "{kind}: final error {e:e}");
    }
}

#[test]
fn unforced_loop_decays_to_zero() {
    // r drops to 0 at t = 0 with every other input silent: the loop must
    // drain all of its internal energy.
    let s = quiet();
    let c = s.dladrc("drain".into(), 1, 300.0, 1000.0, 1000.0, ReferenceProfile::step(1.0, 0.0, 0.0), 15.0);
    let tr = run_scenario(&c).unwrap();
    for (name, v) in columns(&tr) {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let last = v.last().unwrap().abs();
        assert!(last <= 1e-9 * peak, "{name}: last {last:e}, peak {peak:e}");
    }
}

#[test]
fn halving_dt_changes_little() {
    let s = quiet();
    let mut a = s.dladrc("coarse".into(), 3, 300.0, 150.0, 1000.0, ReferenceProfile::step(1.0, 1.5, 0.0), 2.0);
    a.record_every = 20;
    let mut b = a.clone();
    b.dt = a.dt / 2.0;
    b.record_every = 40;
    let (ta, tb) = (run_scenario(&a).unwrap(), run_scenario(&b).unwrap());
    assert_eq!(ta.len(), tb.len());
    let worst = ta.e.iter().zip(&tb.e).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "max |e_dt - e_dt/2| = {worst:e}");
}

#[test]
fn step_error_is_exponential() {
    let s = quiet();
    let c = s.dladrc("up".into(), 3, 150.0, 150.0, 1000.0, ReferenceProfile::step(1.0, 1.5, 0.0), 10.0);
    let tr = run_scenario(&c).unwrap();
    let cut = tr.e.iter().position(|e| e.abs() < 0.01).unwrap_or(tr.len());
    let fit = fit_exponential(&tr.t[..cut], &tr.e[..cut]).unwrap();
    assert!(fit.r_squared >= 0.95, "{fit:?}");
}

#[test]
fn zero_amplitude_step_gives_zero_error() {
    let s = quiet();
    for mut c in e1_configs(&s, &E1_OMEGA_C) {
        c.reference = ReferenceProfile::step(1.5, 1.5, 0.0);
        c.duration = 2.0;
        let tr = run_scenario(&c).unwrap();
        assert!(tr.e.iter().all(|&e| e == 0.0), "{}", c.name);
    }
}

#[test]
fn e2_nominal_quiet_is_flat() {
    let s = ExperimentSettings { long_duration: 3.0, ..quiet() };
    let rep = scenario_e2(&s, false, 0).unwrap();
    for r in &rep.rows {
        assert!(r.sadrc < 1e-9 && r.dladrc < 1e-9, "{r:?}");
    }
}

#[test]
fn e3_quiet_depths_agree() {
    let s = ExperimentSettings { long_duration: 3.0, ..quiet() };
    let rep = scenario_e3(&s, 0).unwrap();
    let first = rep.points[0].instability;
    for q in &rep.points {
        assert!((q.instability - first).abs() < 1e-9, "{}: {}", q.name, q.instability);
    }
}

fn noise_only(kind: ControllerKind, p: usize) -> ScenarioConfig {
    let s = ExperimentSettings { disturbance: Default::default(), ..Default::default() };
    let r = ReferenceProfile::constant(1.5);
    match kind {
        ControllerKind::Sadrc => s.sadrc("sadrc".into(), 300.0, 1000.0, r, 10.0),
        _ => s.dladrc("dladrc".into(), p, 300.0, 150.0, 1000.0, r, 10.0),
    }
}

fn output_variance(c: &ScenarioConfig) -> f64 {
    let tr = run_scenario(c).unwrap();
    let y = &tr.y_plant[tr.index_at(1.0)..];
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64
}

#[test]
fn cascade_output_variance_below_single_observer() {
    let a = noise_only(ControllerKind::Sadrc, 1);
    let b = noise_only(ControllerKind::Dladrc, 3);
    assert_eq!(a.seed, b.seed);
    assert_eq!(a.noise, b.noise);
    let (va, vb) = (output_variance(&a), output_variance(&b));
    assert!(vb < va, "output variance: single observer {va:e}, three-level cascade {vb:e}");
}

#[test]
fn noise_is_what_moves_the_output() {
    let mut c = noise_only(ControllerKind::Dladrc, 3);
    c.duration = 3.0;
    let noisy = run_scenario(&c).unwrap();
    c.noise = NoiseProfile::none();
    let clean = run_scenario(&c).unwrap();
    let a = instability_percent(&noisy.y_plant, 1.5).unwrap();
    let b = instability_percent(&clean.y_plant, 1.5).unwrap();
    assert!(a > 1e-5 && b == 0.0, "{a} {b}");
}
