//! The three comparison experiments: step response (E1), model mismatch
//! across setpoints (E2) and cascade depth versus noise (E3).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::closed_loop::run_scenario;
use super::config::{default_disturbance, default_noise, ControllerKind, ReferenceProfile, ScenarioConfig};
use super::signals::{DisturbanceProfile, NoiseProfile};
use super::trace::SimulationTrace;
use crate::bounds::{check_envelopes, EnvelopeCheck};
use crate::error::{Error, Result};
use crate::metrics::{allan_variance, fit_exponential, instability_percent, log_spaced_taus, settling_time, AllanCurve, ExpFit};
use crate::plantmodel::CoefficientFactors;

/// Shared knobs for every experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub dt: f64,
    pub record_every: usize,
    pub seed: u64,
    pub noise: NoiseProfile,
    pub disturbance: DisturbanceProfile,
    /// Simulated length of each step-response run (s).
    pub step_duration: f64,
    /// Simulated length of the long E2/E3 runs (s).
    pub long_duration: f64,
    /// Initial span excluded from E2/E3 statistics (s).
    pub warmup: f64,
    /// Real seconds per simulated second; 60 maps one hour onto one minute.
    pub time_scale: f64,
    /// Fit window ends when `|e|` first drops below this fraction of the step.
    pub fit_floor: f64,
    /// Settling band as a fraction of the step.
    pub settle_band: f64,
    /// Apply the disturbance profile to step-response runs as well.
    pub step_disturbance: bool,
    /// Keep full traces in the reports.
    pub keep_traces: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            dt: 5e-5,
            record_every: 20,
            seed: 2024,
            noise: default_noise(),
            disturbance: default_disturbance(),
            step_duration: 30.0,
            long_duration: 60.0,
            warmup: 1.0,
            time_scale: 60.0,
            fit_floor: 0.02,
            settle_band: 0.05,
            step_disturbance: false,
            keep_traces: false,
        }
    }
}

impl ExperimentSettings {
    /// No noise and no disturbance.
    pub fn quiet(mut self) -> Self {
        self.noise = NoiseProfile::none();
        self.disturbance = DisturbanceProfile::none();
        self
    }

    fn base(&self, name: String, controller: ControllerKind, reference: ReferenceProfile, duration: f64) -> ScenarioConfig {
        ScenarioConfig {
            name,
            controller,
            n: 3,
            p: 1,
            omega_c: 300.0,
            omega_in: 800.0,
            omega_o1: 1000.0,
            alpha: None,
            omega_op: None,
            b_hat_in: None,
            pid: None,
            plant: Default::default(),
            mismatch: Default::default(),
            reference,
            disturbance: self.disturbance.clone(),
            noise: self.noise,
            dt: self.dt,
            duration,
            record_every: self.record_every,
            seed: self.seed,
            time_scale: self.time_scale,
        }
    }

    /// Dual-loop controller with a ladder topped at `omega_op`.
    pub fn dladrc(
        &self,
        name: String,
        p: usize,
        omega_c: f64,
        omega_o1: f64,
        omega_op: f64,
        reference: ReferenceProfile,
        duration: f64,
    ) -> ScenarioConfig {
        let mut c = self.base(name, ControllerKind::Dladrc, reference, duration);
        c.p = p;
        c.omega_c = omega_c;
        c.omega_o1 = omega_o1;
        c.omega_op = (p > 1).then_some(omega_op);
        c
    }

    pub fn sadrc(&self, name: String, omega_c: f64, omega_o: f64, reference: ReferenceProfile, duration: f64) -> ScenarioConfig {
        let mut c = self.base(name, ControllerKind::Sadrc, reference, duration);
        c.omega_c = omega_c;
        c.omega_o1 = omega_o;
        c
    }
}

/// Outcome of one run inside an experiment.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: ScenarioConfig,
    pub envelopes: Vec<EnvelopeCheck>,
    pub trace: Option<SimulationTrace>,
}

impl RunRecord {
    pub fn envelopes_hold(&self) -> bool {
        self.envelopes.iter().all(EnvelopeCheck::holds)
    }
}

/// Run independent scenarios on `jobs` threads (0 = rayon default); results
/// come back in input order.
pub fn run_batch(configs: &[ScenarioConfig], jobs: usize) -> Result<Vec<SimulationTrace>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| configs.par_iter().map(run_scenario).collect())
}

/// Like [`run_batch`], reducing each trace with `f` as soon as it finishes.
fn run_reduce<T, F>(configs: &[ScenarioConfig], jobs: usize, keep: bool, f: F) -> Result<Vec<(T, RunRecord)>>
where
    T: Send,
    F: Fn(&ScenarioConfig, &SimulationTrace) -> Result<T> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| {
                let trace = run_scenario(cfg).inspect_err(|e| log::error!("{}: {e}", cfg.name))?;
                let value = f(cfg, &trace)?;
                let envelopes = check_envelopes(&trace)?;
                Ok((
                    value,
                    RunRecord {
                        config: cfg.clone(),
                        envelopes,
                        trace: keep.then_some(trace),
                    },
                ))
            })
            .collect()
    })
}

/// One row of the experiment summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub scenario: String,
    pub metric: String,
    pub tau_or_param: String,
    pub value: f64,
}

impl SummaryRow {
    pub fn new(scenario: &str, metric: &str, param: impl ToString, value: f64) -> Self {
        Self {
            scenario: scenario.to_string(),
            metric: metric.to_string(),
            tau_or_param: param.to_string(),
            value,
        }
    }
}

fn envelope_rows(runs: &[RunRecord]) -> Vec<SummaryRow> {
    runs.iter()
        .flat_map(|r| {
            r.envelopes
                .iter()
                .map(|c| SummaryRow::new(&r.config.name, "envelope_ratio", &c.signal, c.worst_ratio))
        })
        .collect()
}

// ---------------------------------------------------------------- E1

#[derive(Debug, Clone)]
pub struct StepResult {
    pub omega_c: f64,
    pub from: f64,
    pub to: f64,
    /// `Err` holds the reason the fit failed; not fatal to the experiment.
    pub fit: std::result::Result<ExpFit, String>,
    pub settling_time: Option<f64>,
}

impl StepResult {
    pub fn label(&self) -> String {
        format!("wc{}_{}to{}", self.omega_c, self.from, self.to)
    }
}

#[derive(Debug, Clone)]
pub struct E1Report {
    pub steps: Vec<StepResult>,
    pub runs: Vec<RunRecord>,
}

impl E1Report {
    /// Relative difference of the two fitted rates at `omega_c`.
    pub fn rate_mismatch(&self, omega_c: f64) -> Option<f64> {
        let rates: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.omega_c == omega_c)
            .map(|s| s.fit.as_ref().ok().map(|f| f.rate))
            .collect::<Option<_>>()?;
        let [a, b] = rates[..] else { return None };
        Some((a - b).abs() / (0.5 * (a + b)).abs())
    }

    /// Slowest settling time over both step directions at `omega_c`.
    pub fn settling(&self, omega_c: f64) -> Option<f64> {
        self.steps
            .iter()
            .filter(|s| s.omega_c == omega_c)
            .map(|s| s.settling_time)
            .try_fold(0.0f64, |acc, t| t.map(|t| acc.max(t)))
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for s in &self.steps {
            let name = s.label();
            match &s.fit {
                Ok(f) => {
                    rows.push(SummaryRow::new(&name, "decay_rate", s.omega_c, f.rate));
                    rows.push(SummaryRow::new(&name, "r_squared", s.omega_c, f.r_squared));
                }
                Err(_) => rows.push(SummaryRow::new(&name, "decay_rate", s.omega_c, f64::NAN)),
            }
            rows.push(SummaryRow::new(&name, "settling_time", s.omega_c, s.settling_time.unwrap_or(f64::NAN)));
        }
        rows.extend(envelope_rows(&self.runs));
        rows
    }
}

pub const E1_OMEGA_C: [f64; 2] = [150.0, 300.0];
pub const E1_STEPS: [(f64, f64); 2] = [(1.0, 1.5), (2.0, 1.5)];

/// Dual-loop (p = 3) step runs for each `omega_c` and both step directions.
pub fn e1_configs(settings: &ExperimentSettings, omega_cs: &[f64]) -> Vec<ScenarioConfig> {
    omega_cs
        .iter()
        .flat_map(|&wc| {
            E1_STEPS.iter().map(move |&(from, to)| {
                let mut c = settings.dladrc(
                    format!("e1_wc{wc}_{from}to{to}"),
                    3,
                    wc,
                    150.0,
                    1000.0,
                    ReferenceProfile::step(from, to, 0.0),
                    settings.step_duration,
                );
                if !settings.step_disturbance {
                    c.disturbance = DisturbanceProfile::none();
                }
                c
            })
        })
        .collect()
}

/// Fit window: from the step until `|e|` first falls below `floor·|step|`.
fn step_metrics(settings: &ExperimentSettings, trace: &SimulationTrace, amp: f64) -> (std::result::Result<ExpFit, String>, Option<f64>) {
    let cut = trace
        .e
        .iter()
        .position(|e| e.abs() < settings.fit_floor * amp.abs())
        .unwrap_or(trace.len());
    let fit = fit_exponential(&trace.t[..cut], &trace.e[..cut]).map_err(|e| e.to_string());
    (fit, settling_time(&trace.t, &trace.e, settings.settle_band, amp))
}

pub fn scenario_e1(settings: &ExperimentSettings, omega_cs: &[f64], jobs: usize) -> Result<E1Report> {
    let configs = e1_configs(settings, omega_cs);
    let out = run_reduce(&configs, jobs, settings.keep_traces, |cfg, tr| {
        let amp = cfg.reference.final_value() - cfg.reference.initial;
        Ok(step_metrics(settings, tr, amp))
    })?;
    let mut steps = Vec::new();
    let mut runs = Vec::new();
    for ((fit, settle), run) in out {
        let r = &run.config.reference;
        steps.push(StepResult {
            omega_c: run.config.omega_c,
            from: r.initial,
            to: r.final_value(),
            fit,
            settling_time: settle,
        });
        runs.push(run);
    }
    Ok(E1Report { steps, runs })
}

// ---------------------------------------------------------------- E2

pub const E2_SETPOINTS: [f64; 5] = [1.0, 1.25, 1.5, 1.75, 2.0];

/// Setpoint-dependent plant drift: zero at 1.5 W, growing linearly to
/// ±20 % on β at the ends of the 1–2 W range.
pub fn e2_mismatch(setpoint: f64) -> CoefficientFactors {
    let x = (setpoint - 1.5) / 0.5;
    CoefficientFactors {
        beta: 1.0 + 0.2 * x,
        alpha3: 1.0 + 0.1 * x,
        alpha2: 1.0 - 0.1 * x,
        alpha1: 1.0 + 0.1 * x,
        alpha0: 1.0 - 0.05 * x,
    }
}

#[derive(Debug, Clone)]
pub struct E2Row {
    pub setpoint: f64,
    pub sadrc: f64,
    pub dladrc: f64,
}

impl E2Row {
    /// Relative reduction in percent.
    pub fn improvement(&self) -> f64 {
        (self.sadrc - self.dladrc) / self.sadrc * 100.0
    }
}

#[derive(Debug, Clone)]
pub struct E2Report {
    pub rows: Vec<E2Row>,
    pub runs: Vec<RunRecord>,
}

impl E2Report {
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for r in &self.rows {
            let name = format!("e2_{}", r.setpoint);
            out.push(SummaryRow::new(&name, "instability_sadrc", r.setpoint, r.sadrc));
            out.push(SummaryRow::new(&name, "instability_dladrc", r.setpoint, r.dladrc));
            out.push(SummaryRow::new(&name, "improvement_percent", r.setpoint, r.improvement()));
        }
        out.extend(envelope_rows(&self.runs));
        out
    }
}

/// SADRC then DLADRC (p = 1) at every setpoint.
pub fn e2_configs(settings: &ExperimentSettings, mismatch: bool) -> Vec<ScenarioConfig> {
    E2_SETPOINTS
        .iter()
        .flat_map(|&s| {
            let r = ReferenceProfile::constant(s);
            let mut a = settings.sadrc(format!("e2_sadrc_{s}"), 300.0, 1000.0, r.clone(), settings.long_duration);
            let mut b = settings.dladrc(format!("e2_dladrc_{s}"), 1, 300.0, 1000.0, 1000.0, r, settings.long_duration);
            if mismatch {
                a.mismatch = e2_mismatch(s);
                b.mismatch = e2_mismatch(s);
            }
            [a, b]
        })
        .collect()
}

fn post_warmup<'a>(settings: &ExperimentSettings, trace: &'a SimulationTrace) -> &'a [f64] {
    &trace.y_plant[trace.index_at(settings.warmup)..]
}

pub fn scenario_e2(settings: &ExperimentSettings, mismatch: bool, jobs: usize) -> Result<E2Report> {
    let configs = e2_configs(settings, mismatch);
    let out = run_reduce(&configs, jobs, settings.keep_traces, |cfg, tr| {
        instability_percent(post_warmup(settings, tr), cfg.reference.final_value())
    })?;
    let (vals, runs): (Vec<f64>, Vec<RunRecord>) = out.into_iter().unzip();
    let rows = E2_SETPOINTS
        .iter()
        .zip(vals.chunks(2))
        .map(|(&setpoint, v)| E2Row { setpoint, sadrc: v[0], dladrc: v[1] })
        .collect();
    Ok(E2Report { rows, runs })
}

// ---------------------------------------------------------------- E3

pub const E3_OMEGA_OP: f64 = 1000.0;

/// `(p, ω_o1 sweep)` at matched top bandwidth.
pub fn e3_sweep() -> Vec<(usize, Vec<f64>)> {
    vec![
        (1, vec![E3_OMEGA_OP]),
        (2, vec![300.0, 400.0, 500.0]),
        (3, vec![150.0, 200.0, 250.0]),
    ]
}

#[derive(Debug, Clone)]
pub struct E3Point {
    pub name: String,
    /// 0 for the single-observer baseline.
    pub p: usize,
    pub omega_o1: f64,
    pub instability: f64,
    pub allan: AllanCurve,
    /// Mean σ² over the long-τ window; NaN if the record is too short.
    pub long_tau_allan: f64,
}

#[derive(Debug, Clone)]
pub struct E3Report {
    pub points: Vec<E3Point>,
    /// Long-τ window in simulated seconds.
    pub long_window: (f64, f64),
    pub runs: Vec<RunRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

impl E3Report {
    fn of_p(&self, p: usize) -> impl Iterator<Item = &E3Point> {
        self.points.iter().filter(move |q| q.p == p)
    }

    pub fn baseline(&self) -> Option<&E3Point> {
        self.of_p(0).next()
    }

    /// Sweep-mean instability per cascade depth.
    pub fn mean_instability(&self, p: usize) -> f64 {
        mean(self.of_p(p).map(|q| q.instability))
    }

    pub fn mean_long_tau_allan(&self, p: usize) -> f64 {
        mean(self.of_p(p).map(|q| q.long_tau_allan))
    }

    /// Spread of the Allan curves across the ω_o1 sweep: mean over τ of
    /// `log10(max σ² / min σ²)`. Zero for a single curve.
    pub fn allan_spread(&self, p: usize) -> f64 {
        let curves: Vec<&AllanCurve> = self.of_p(p).map(|q| &q.allan).collect();
        if curves.is_empty() {
            return f64::NAN;
        }
        let len = curves.iter().map(|c| c.sigma2.len()).min().unwrap_or(0);
        mean((0..len).map(|k| {
            let vals = curves.iter().map(|c| c.sigma2[k]);
            let hi = vals.clone().fold(f64::NEG_INFINITY, f64::max);
            let lo = vals.fold(f64::INFINITY, f64::min);
            if hi == lo { 0.0 } else { (hi / lo).log10() }
        }))
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut out = Vec::new();
        for q in &self.points {
            out.push(SummaryRow::new(&q.name, "instability_percent", q.omega_o1, q.instability));
            out.push(SummaryRow::new(&q.name, "long_tau_allan", q.omega_o1, q.long_tau_allan));
            for (tau, s2) in q.allan.taus.iter().zip(&q.allan.sigma2) {
                out.push(SummaryRow::new(&q.name, "allan_variance", tau, *s2));
            }
        }
        for p in 1..=3 {
            let name = format!("e3_p{p}");
            out.push(SummaryRow::new(&name, "mean_instability_percent", p, self.mean_instability(p)));
            out.push(SummaryRow::new(&name, "mean_long_tau_allan", p, self.mean_long_tau_allan(p)));
            out.push(SummaryRow::new(&name, "allan_spread", p, self.allan_spread(p)));
        }
        out.extend(envelope_rows(&self.runs));
        out
    }
}

/// Every cascade point of the sweep, then the SADRC baseline, at 1.5 W.
pub fn e3_configs(settings: &ExperimentSettings) -> Vec<ScenarioConfig> {
    let r = ReferenceProfile::constant(1.5);
    let mut out: Vec<ScenarioConfig> = e3_sweep()
        .into_iter()
        .flat_map(|(p, sweep)| {
            let r = r.clone();
            sweep.into_iter().map(move |wo1| {
                settings.dladrc(format!("e3_p{p}_wo{wo1}"), p, 300.0, wo1, E3_OMEGA_OP, r.clone(), settings.long_duration)
            })
        })
        .collect();
    out.push(settings.sadrc("e3_sadrc".into(), 300.0, E3_OMEGA_OP, r, settings.long_duration));
    out
}

/// Long-τ window: 10²–10³ real seconds mapped through the time scale.
pub fn long_tau_window(settings: &ExperimentSettings) -> (f64, f64) {
    (1e2 / settings.time_scale, 1e3 / settings.time_scale)
}

pub fn scenario_e3(settings: &ExperimentSettings, jobs: usize) -> Result<E3Report> {
    let configs = e3_configs(settings);
    let (lo, hi) = long_tau_window(settings);
    let out = run_reduce(&configs, jobs, settings.keep_traces, |cfg, tr| {
        let y = post_warmup(settings, tr);
        let dt = tr.sample_dt().ok_or_else(|| Error::Config("trace too short".into()))?;
        let taus = log_spaced_taus(dt, y.len(), 10, 3);
        let allan = allan_variance(y, dt, &taus)?;
        let instability = instability_percent(y, cfg.reference.final_value())?;
        Ok((instability, allan))
    })?;
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for ((instability, allan), run) in out {
        let c = &run.config;
        let p = if c.controller == ControllerKind::Sadrc { 0 } else { c.p };
        points.push(E3Point {
            name: c.name.clone(),
            p,
            omega_o1: c.omega_o1,
            instability,
            long_tau_allan: allan.mean_over(lo, hi).unwrap_or(f64::NAN),
            allan,
        });
        runs.push(run);
    }
    Ok(E3Report { points, long_window: (lo, hi), runs })
}
