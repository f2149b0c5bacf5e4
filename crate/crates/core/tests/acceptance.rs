//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

use std::cell::OnceCell;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use adrc_lab::bounds::{
    scaling_transform, solve_lyapunov, envelope_margin, xi_matrix, CompanionGamma, EnvelopeCheck,
};
use adrc_lab::controller::controller_gains;
use adrc_lab::metrics::{allan_variance, log_spaced_taus};
use adrc_lab::observers::eso_gain;
use adrc_lab::sim::scenarios::{
    run_batch, scenario_e1, scenario_e2, scenario_e3, E1Report, E2Report, E3Report, ExperimentSettings,
    RunRecord, E1_OMEGA_C,
};
use adrc_lab::sim::{
    run_scenario, ControllerKind, NoiseProfile, ReferenceProfile, ScenarioConfig, SimulationTrace,
};

// Pinned tolerances.
const SCALING_TOL: f64 = 1e-9;
const LYAPUNOV_TOL: f64 = 1e-10;
const LYAPUNOV_TRAJECTORIES: usize = 100;
const E1_MIN_R2: f64 = 0.95;
const E1_MAX_RATE_MISMATCH: f64 = 0.01;
const E1_MIN_SETTLING_REDUCTION: f64 = 0.25;
const E2_MIN_IMPROVEMENT_PERCENT: f64 = 30.0;
const E3_MIN_BASELINE_RATIO: f64 = 10.0;
const ALLAN_SLOPE: f64 = -1.0;
const ALLAN_SLOPE_TOL: f64 = 0.1;
const ALLAN_REPETITIONS: u64 = 10;

const LIMIT_FAST: Duration = Duration::from_secs(1);
const LIMIT_30S: Duration = Duration::from_secs(30);
const LIMIT_1MIN: Duration = Duration::from_secs(60);
const LIMIT_2MIN: Duration = Duration::from_secs(120);
const LIMIT_5MIN: Duration = Duration::from_secs(300);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn within(limit: Duration, took: Duration) -> (bool, String) {
    (took < limit, format!("{:.2}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

/// Experiment reports are shared between the criterion that owns them and
/// the envelope criterion.
#[derive(Default)]
struct Experiments {
    settings: ExperimentSettings,
    e1: OnceCell<(adrc_lab::Result<E1Report>, Duration)>,
    e2: OnceCell<(adrc_lab::Result<E2Report>, Duration)>,
    e3: OnceCell<(adrc_lab::Result<E3Report>, Duration)>,
}

impl Experiments {
    fn e1(&self) -> &(adrc_lab::Result<E1Report>, Duration) {
        self.e1.get_or_init(|| timed(|| scenario_e1(&self.settings, &E1_OMEGA_C, 0)))
    }
    fn e2(&self) -> &(adrc_lab::Result<E2Report>, Duration) {
        self.e2.get_or_init(|| timed(|| scenario_e2(&self.settings, true, 0)))
    }
    fn e3(&self) -> &(adrc_lab::Result<E3Report>, Duration) {
        self.e3.get_or_init(|| timed(|| scenario_e3(&self.settings, 0)))
    }
}

fn factorial(k: usize) -> u128 {
    (1..=k as u128).product()
}

fn criterion1() -> Outcome {
    let (bad, took) = timed(|| {
        let mut bad = Vec::new();
        for n in 1..=6 {
            let eso = eso_gain(n, 2.0).expect("valid order");
            for m in 1..=n + 1 {
                let want = factorial(n + 1) / (factorial(m) * factorial(n + 1 - m));
                if eso.l_vec[m - 1] != (want << m) as f64 {
                    bad.push(format!("eso n={n} m={m}"));
                }
            }
            let g = controller_gains(n, 2.0).expect("valid order");
            for l in 1..=n {
                let want = factorial(n) / (factorial(n + 1 - l) * factorial(l - 1));
                if g.kappa[l - 1] as u128 != want {
                    bad.push(format!("kappa n={n} l={l}"));
                }
            }
        }
        bad
    });
    let (fast, t) = within(LIMIT_FAST, took);
    outcome(bad.is_empty() && fast, format!("mismatches {:?}; {t}", bad))
}

fn criterion2() -> Outcome {
    let (worst, took) = timed(|| {
        let mut worst: f64 = 0.0;
        for n in 1..=5 {
            for w in [2.0, 10.0, 100.0, 800.0] {
                let (_, res) = scaling_transform(n, w).expect("valid inputs");
                worst = worst.max(res);
            }
        }
        worst
    });
    let (fast, t) = within(LIMIT_FAST, took);
    outcome(worst < SCALING_TOL && fast, format!("worst residual {worst:.3e} (< {SCALING_TOL:e}); {t}"))
}

fn criterion3() -> Outcome {
    let (bad, took) = timed(|| {
        (1..=6)
            .filter(|&n| {
                let cp = CompanionGamma::new(n).expect("valid order").char_poly();
                let want: Vec<i128> = (0..=n + 1)
                    .map(|k| (factorial(n + 1) / (factorial(k) * factorial(n + 1 - k))) as i128)
                    .collect();
                cp != want
            })
            .collect::<Vec<_>>()
    });
    let (fast, t) = within(LIMIT_FAST, took);
    outcome(bad.is_empty() && fast, format!("orders failing {bad:?}; {t}"))
}

/// Random sum of sinusoids plus an offset, one per component.
fn random_forcing(rng: &mut ChaCha8Rng, dim: usize, omega: f64) -> impl Fn(f64) -> DVector<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..dim)
        .map(|_| {
            (
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..2.0),
                rng.random_range(0.01..3.0) * omega,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let scale = rng.random_range(0.0..5.0);
    move |t| DVector::from_iterator(dim, params.iter().map(|&(c, a, w, ph)| scale * (c + a * (w * t + ph).sin())))
}

fn criterion4() -> Outcome {
    let (res, took) = timed(|| -> Result<(f64, f64, usize), String> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst_residual: f64 = 0.0;
        let mut worst_margin = f64::INFINITY;
        let mut failures = 0;
        for k in 0..LYAPUNOV_TRAJECTORIES {
            let n = 1 + k % 4;
            let g = if k % 2 == 0 {
                CompanionGamma::new(n).map_err(|e| e.to_string())?.gamma_matrix
            } else {
                xi_matrix(n).map_err(|e| e.to_string())?
            };
            let omega = rng.random_range(1.5..20.0);
            let omega_cap = rng.random_range(0.5..5.0);
            let q: DMatrix<f64> = omega * g;
            let cert = solve_lyapunov(&q, omega_cap).map_err(|e| e.to_string())?;
            worst_residual = worst_residual.max(cert.residual);
            let dim = q.nrows();
            let eta0: Vec<f64> = (0..dim)
                .map(|_| rng.random_range(0.0..10.0) * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let f = random_forcing(&mut rng, dim, omega);
            let dt = 0.02 / q.norm();
            let horizon = 4.0 / cert.norm_rate();
            let m = envelope_margin(&cert, &q, f, &eta0, horizon, dt).map_err(|e| e.to_string())?;
            worst_margin = worst_margin.min(m);
            if m < 0.0 {
                failures += 1;
            }
        }
        Ok((worst_residual, worst_margin, failures))
    });
    let (fast, t) = within(LIMIT_30S, took);
    match res {
        Ok((r, m, f)) => outcome(
            r < LYAPUNOV_TOL && f == 0 && fast,
            format!("residual {r:.2e}; {f}/{LYAPUNOV_TRAJECTORIES} violated; min margin {m:.3e}; {t}"),
        ),
        Err(e) => outcome(false, e),
    }
}

fn criterion5(x: &Experiments) -> Outcome {
    let (e1, d1) = x.e1();
    let (e2, d2) = x.e2();
    let (e3, d3) = x.e3();
    let took = *d1 + *d2 + *d3;
    let runs: [(&str, Result<&Vec<RunRecord>, String>); 3] = [
        ("e1", e1.as_ref().map(|r| &r.runs).map_err(|e| e.to_string())),
        ("e2", e2.as_ref().map(|r| &r.runs).map_err(|e| e.to_string())),
        ("e3", e3.as_ref().map(|r| &r.runs).map_err(|e| e.to_string())),
    ];
    let mut checks: Vec<&EnvelopeCheck> = Vec::new();
    let mut errors = Vec::new();
    for (name, r) in runs {
        match r {
            Ok(rs) => checks.extend(rs.iter().flat_map(|run| &run.envelopes)),
            Err(e) => errors.push(format!("{name}: {e}")),
        }
    }
    let violated: Vec<String> = checks
        .iter()
        .filter(|c| !c.holds())
        .map(|c| format!("{} ratio {:.3}", c.signal, c.worst_ratio))
        .collect();
    let worst = checks.iter().map(|c| c.worst_ratio).fold(0.0, f64::max);
    let (fast, t) = within(LIMIT_5MIN, took);
    outcome(
        errors.is_empty() && !checks.is_empty() && violated.is_empty() && fast,
        format!(
            "{} signal checks, violations {:?}, worst |sim|/envelope {:.3e}, errors {:?}; {t}",
            checks.len(),
            violated,
            worst,
            errors
        ),
    )
}

fn criterion6(x: &Experiments) -> Outcome {
    let (rep, took) = x.e1();
    let rep = match rep {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for s in &rep.steps {
        match &s.fit {
            Ok(f) => {
                pass &= f.r_squared >= E1_MIN_R2;
                parts.push(format!("{} rate {:.4} R2 {:.4}", s.label(), f.rate, f.r_squared));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{} fit failed: {e}", s.label()));
            }
        }
    }
    for wc in E1_OMEGA_C {
        let m = rep.rate_mismatch(wc);
        pass &= m.is_some_and(|m| m <= E1_MAX_RATE_MISMATCH);
        parts.push(format!("wc{wc} mismatch {:?}", m));
    }
    let (slow, fastc) = (rep.settling(E1_OMEGA_C[0]), rep.settling(E1_OMEGA_C[1]));
    let reduction = slow.zip(fastc).map(|(a, b)| 1.0 - b / a);
    pass &= reduction.is_some_and(|r| r >= E1_MIN_SETTLING_REDUCTION);
    parts.push(format!("settling {slow:?} -> {fastc:?}, reduction {reduction:?}"));
    let (fast, t) = within(LIMIT_1MIN, *took);
    outcome(pass && fast, format!("{}; {t}", parts.join("; ")))
}

fn criterion7(x: &Experiments) -> Outcome {
    let (rep, took) = x.e2();
    let rep = match rep {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let pass = rep.rows.len() == 5
        && rep.rows.iter().all(|r| r.dladrc < r.sadrc && r.improvement() >= E2_MIN_IMPROVEMENT_PERCENT);
    let rows: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{}W {:.4}% vs {:.4}% ({:.1}%)", r.setpoint, r.dladrc, r.sadrc, r.improvement()))
        .collect();
    let (fast, t) = within(LIMIT_2MIN, *took);
    outcome(
        pass && fast,
        format!("DLADRC vs SADRC instability, need >= {E2_MIN_IMPROVEMENT_PERCENT}%: {}; {t}", rows.join(", ")),
    )
}

fn criterion8(x: &Experiments) -> Outcome {
    let (rep, took) = x.e3();
    let rep = match rep {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let inst: Vec<f64> = (1..=3).map(|p| rep.mean_instability(p)).collect();
    let allan: Vec<f64> = (1..=3).map(|p| rep.mean_long_tau_allan(p)).collect();
    let spread = (rep.allan_spread(2), rep.allan_spread(3));
    let ratio = rep.baseline().map(|b| b.long_tau_allan / allan[2]).unwrap_or(f64::NAN);
    let checks = [
        ("instability decreasing", inst[0] > inst[1] && inst[1] > inst[2]),
        ("long-tau Allan decreasing", allan[0] > allan[1] && allan[1] > allan[2]),
        ("spread p3 < p2", spread.1 < spread.0),
        ("baseline ratio", ratio >= E3_MIN_BASELINE_RATIO),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let (fast, t) = within(LIMIT_5MIN, *took);
    outcome(
        failed.is_empty() && fast,
        format!(
            "instability {inst:.4?}; long-tau Allan [{:.4e}, {:.4e}, {:.4e}]; spread p2 {:.4} p3 {:.4}; \
             SADRC/p3 {ratio:.2} (need >= {E3_MIN_BASELINE_RATIO}); failed {failed:?}; {t}",
            allan[0], allan[1], allan[2], spread.0, spread.1
        ),
    )
}

fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn criterion9() -> Outcome {
    let (res, took) = timed(|| -> adrc_lab::Result<(Vec<f64>, bool, bool)> {
        let dt = 1e-3;
        let len = 200_000;
        let taus: Vec<f64> = log_spaced_taus(dt, len, 5, 2).into_iter().filter(|&t| t <= 100.0 * dt * 1.0001).collect();
        let mut slopes = Vec::new();
        let mut scale_exact = true;
        for seed in 0..ALLAN_REPETITIONS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            let c = allan_variance(&x, dt, &taus)?;
            let lx: Vec<f64> = c.taus.iter().map(|t| t.log10()).collect();
            let ly: Vec<f64> = c.sigma2.iter().map(|s| s.log10()).collect();
            slopes.push(slope(&lx, &ly));
            for s in [0.5, 2.0, 8.0] {
                let xs: Vec<f64> = x.iter().map(|v| v * s).collect();
                let cs = allan_variance(&xs, dt, &taus)?;
                scale_exact &= cs.sigma2.iter().zip(&c.sigma2).all(|(a, b)| *a == s * s * b);
            }
        }
        let flat = allan_variance(&vec![1.234; len], dt, &taus)?;
        let const_zero = flat.sigma2.iter().all(|&s| s == 0.0);
        Ok((slopes, const_zero, scale_exact))
    });
    let (fast, t) = within(LIMIT_30S, took);
    match res {
        Ok((slopes, zero, scale)) => {
            let ok = slopes.iter().all(|s| (s - ALLAN_SLOPE).abs() <= ALLAN_SLOPE_TOL);
            outcome(
                ok && zero && scale && fast,
                format!("slopes {slopes:.3?}; constant exactly 0: {zero}; scale-exact: {scale}; {t}"),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn csv_bytes(trace: &SimulationTrace) -> Vec<u8> {
    let mut buf = Vec::new();
    trace.write_csv_to(&mut buf).expect("write to memory");
    buf
}

fn determinism_configs() -> Vec<ScenarioConfig> {
    let s = ExperimentSettings { noise: NoiseProfile::band_limited(1e-3, 1e4), ..Default::default() };
    let r = ReferenceProfile::step(1.0, 1.5, 0.2);
    let mut pid = s.sadrc("pid".into(), 300.0, 1000.0, r.clone(), 2.0);
    pid.controller = ControllerKind::Pid;
    vec![
        s.dladrc("dladrc".into(), 3, 300.0, 150.0, 1000.0, r.clone(), 2.0),
        s.sadrc("sadrc".into(), 300.0, 1000.0, r, 2.0),
        pid,
    ]
}

fn criterion10() -> Outcome {
    let (res, took) = timed(|| -> adrc_lab::Result<Vec<String>> {
        let cfgs = determinism_configs();
        let mut diffs = Vec::new();
        let serial: Vec<Vec<u8>> = cfgs.iter().map(|c| run_scenario(c).map(|t| csv_bytes(&t))).collect::<Result<_, _>>()?;
        let again: Vec<Vec<u8>> = cfgs.iter().map(|c| run_scenario(c).map(|t| csv_bytes(&t))).collect::<Result<_, _>>()?;
        let parallel: Vec<Vec<u8>> = run_batch(&cfgs, 3)?.iter().map(csv_bytes).collect();
        for (i, c) in cfgs.iter().enumerate() {
            if serial[i] != again[i] {
                diffs.push(format!("{} repeat", c.name));
            }
            if serial[i] != parallel[i] {
                diffs.push(format!("{} parallel", c.name));
            }
        }
        Ok(diffs)
    });
    let (fast, t) = within(LIMIT_1MIN, took);
    match res {
        Ok(d) => outcome(d.is_empty() && fast, format!("differences {d:?}; {t}")),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn main() {
    let x = Experiments::default();
    let results = [
        ("1 gain formulas", criterion1()),
        ("2 scaling identity", criterion2()),
        ("3 companion spectrum", criterion3()),
        ("4 Lyapunov certificate", criterion4()),
        ("6 E1 step response", criterion6(&x)),
        ("7 E2 mismatch", criterion7(&x)),
        ("8 E3 cascade depth", criterion8(&x)),
        ("5 envelope soundness", criterion5(&x)),
        ("9 Allan estimator", criterion9()),
        ("10 determinism", criterion10()),
    ];
    let mut failed = 0;
    for (name, o) in &results {
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
