//! Scenario configuration and its TOML file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::signals::{DisturbanceComponent, DisturbanceProfile, NoiseProfile};
use crate::controller::PidGains;
use crate::error::{Error, Result};
use crate::observers::CascadeConfig;
use crate::plantmodel::{derive_plant_coefficients, CoefficientFactors, PlantCoefficients, PlantPhysicalParams};

/// Explicit integration needs `dt·ω_max` below this.
pub const MAX_DT_OMEGA: f64 = 0.05;
/// Upper bound on recorded rows per trace.
pub const TRACE_CAPACITY: usize = 20_000_000;
/// A run aborts once `|y|` exceeds this multiple of `max(|r|, 1)`.
pub const INSTABILITY_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Pid,
    Sadrc,
    Dladrc,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pid => "pid",
            Self::Sadrc => "sadrc",
            Self::Dladrc => "dladrc",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepChange {
    pub time: f64,
    pub value: f64,
}

/// Piecewise-constant reference. The loop starts at rest on `initial`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceProfile {
    pub initial: f64,
    #[serde(default)]
    pub steps: Vec<StepChange>,
}

impl ReferenceProfile {
    pub fn constant(value: f64) -> Self {
        Self { initial: value, steps: Vec::new() }
    }

    pub fn step(from: f64, to: f64, at: f64) -> Self {
        Self {
            initial: from,
            steps: vec![StepChange { time: at, value: to }],
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map_or(self.initial, |s| s.value)
    }

    /// Value after the last step.
    pub fn final_value(&self) -> f64 {
        self.steps.last().map_or(self.initial, |s| s.value)
    }

    fn validate(&self) -> Result<()> {
        if !self.initial.is_finite() || self.steps.iter().any(|s| !(s.time.is_finite() && s.value.is_finite())) {
            return Err(Error::invalid("reference", "values must be finite"));
        }
        if self.steps.windows(2).any(|w| w[1].time <= w[0].time) || self.steps.first().is_some_and(|s| s.time < 0.0) {
            return Err(Error::invalid("reference", "step times must be non-negative and increasing"));
        }
        Ok(())
    }
}

fn default_record_every() -> usize {
    20
}

fn default_time_scale() -> f64 {
    1.0
}

/// Everything needed to reproduce one closed-loop run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub controller: ControllerKind,
    /// Observer order; the simulated plant is third order.
    #[serde(default = "ScenarioConfig::plant_order")]
    pub n: usize,
    #[serde(default = "ScenarioConfig::one")]
    pub p: usize,
    #[serde(default)]
    pub omega_c: f64,
    /// Inner observer bandwidth (DLADRC only).
    #[serde(default)]
    pub omega_in: f64,
    /// First cascade level; the single observer bandwidth for SADRC.
    #[serde(default)]
    pub omega_o1: f64,
    /// Ladder ratio. Mutually exclusive with `omega_op`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Top-level bandwidth; sets `alpha = (omega_op/omega_o1)^{1/(p−1)}`.
    #[serde(default)]
    pub omega_op: Option<f64>,
    /// Defaults to the nominal plant's `β/α₃`.
    #[serde(default)]
    pub b_hat_in: Option<f64>,
    #[serde(default)]
    pub pid: Option<PidGains>,
    #[serde(default)]
    pub plant: PlantPhysicalParams,
    #[serde(default)]
    pub mismatch: CoefficientFactors,
    pub reference: ReferenceProfile,
    #[serde(default)]
    pub disturbance: DisturbanceProfile,
    #[serde(default)]
    pub noise: NoiseProfile,
    pub dt: f64,
    pub duration: f64,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
    /// Real seconds represented by one simulated second (metrics only).
    #[serde(default = "default_time_scale")]
    pub time_scale: f64,
}

impl ScenarioConfig {
    fn plant_order() -> usize {
        3
    }

    fn one() -> usize {
        1
    }

    /// Nominal plant coefficients, before mismatch.
    pub fn nominal_coefficients(&self) -> Result<PlantCoefficients> {
        derive_plant_coefficients(&self.plant)
    }

    /// Coefficients of the simulated (possibly mismatched) plant.
    pub fn true_coefficients(&self) -> Result<PlantCoefficients> {
        let c = self.nominal_coefficients()?.perturbed(&self.mismatch);
        c.validate()?;
        Ok(c)
    }

    pub fn b_hat(&self) -> Result<f64> {
        match self.b_hat_in {
            Some(b) => Ok(b),
            None => Ok(self.nominal_coefficients()?.input_gain()),
        }
    }

    /// Outer ladder for DLADRC; `None` otherwise.
    pub fn cascade(&self) -> Result<Option<CascadeConfig>> {
        if self.controller != ControllerKind::Dladrc {
            return Ok(None);
        }
        let cfg = match (self.alpha, self.omega_op) {
            (Some(_), Some(_)) => return Err(Error::Config("set at most one of `alpha` and `omega_op`".into())),
            (None, Some(op)) => CascadeConfig::matched(self.p, self.omega_o1, op)?,
            (Some(a), None) => CascadeConfig::new(self.p, self.omega_o1, a)?,
            (None, None) if self.p == 1 => CascadeConfig::new(1, self.omega_o1, 2.0)?,
            (None, None) => return Err(Error::Config("cascade with p > 1 needs `alpha` or `omega_op`".into())),
        };
        Ok(Some(cfg))
    }

    pub fn pid_gains(&self) -> PidGains {
        self.pid
            .unwrap_or_else(default_pid)
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Largest bandwidth the integrator has to resolve.
    pub fn max_bandwidth(&self) -> Result<f64> {
        Ok(match self.controller {
            ControllerKind::Dladrc => {
                let top = self.cascade()?.map_or(0.0, |c| c.omega_op());
                self.omega_c.max(self.omega_in).max(top)
            }
            ControllerKind::Sadrc => self.omega_c.max(self.omega_o1),
            ControllerKind::Pid => {
                let g = self.pid_gains();
                if g.tf > 0.0 { 1.0 / g.tf } else { 0.0 }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration", format!("must be positive, got {}", self.duration)));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every", "must be at least 1"));
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return Err(Error::invalid("time_scale", "must be positive"));
        }
        if self.n != 3 {
            return Err(Error::invalid("n", format!("the simulated plant is third order, got n = {}", self.n)));
        }
        self.plant.validate()?;
        self.true_coefficients()?;
        let b = self.b_hat()?;
        if !(b.is_finite() && b > 0.0) {
            return Err(Error::invalid("b_hat_in", format!("must be positive, got {b}")));
        }
        self.reference.validate()?;
        self.disturbance.validate()?;
        self.noise.validate()?;
        match self.controller {
            ControllerKind::Dladrc => {
                positive("omega_c", self.omega_c)?;
                positive("omega_in", self.omega_in)?;
                self.cascade()?;
            }
            ControllerKind::Sadrc => {
                positive("omega_c", self.omega_c)?;
                positive("omega_o1", self.omega_o1)?;
            }
            ControllerKind::Pid => {
                let g = self.pid_gains();
                if ![g.kp, g.ki, g.kd, g.tf].iter().all(|v| v.is_finite()) || g.tf < 0.0 {
                    return Err(Error::invalid("pid", "gains must be finite and tf non-negative"));
                }
            }
        }
        let w = self.max_bandwidth()?;
        if self.dt * w > MAX_DT_OMEGA * (1.0 + 1e-9) {
            return Err(Error::invalid(
                "dt",
                format!("dt·ω_max = {:.3} exceeds {MAX_DT_OMEGA}; reduce dt below {:e}", self.dt * w, MAX_DT_OMEGA / w),
            ));
        }
        let rows = self.steps() / self.record_every + 1;
        if rows > TRACE_CAPACITY {
            return Err(Error::invalid("duration", format!("{rows} trace rows exceed capacity {TRACE_CAPACITY}")));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

/// PID tuned on the nominal plant: Ziegler–Nichols detuned until the slowest
/// closed-loop pole sits near −12 rad/s.
pub fn default_pid() -> PidGains {
    PidGains {
        kp: 2.0,
        ki: 40.0,
        kd: 0.04,
        tf: 1e-3,
        integral_limit: f64::INFINITY,
    }
}

/// Default environment: slow thermal drift, mains pickup and two load steps.
pub fn default_disturbance() -> DisturbanceProfile {
    DisturbanceProfile {
        components: vec![
            DisturbanceComponent::Ramp { slope: 2e-3 },
            DisturbanceComponent::Sinusoid { amplitude: 0.01, frequency_hz: 50.0, phase: 0.0 },
            DisturbanceComponent::SmoothedStep { time: 20.0, amplitude: 0.02, rise_time: 0.5 },
            DisturbanceComponent::SmoothedStep { time: 40.0, amplitude: -0.02, rise_time: 0.5 },
        ],
    }
}

/// Photodetector noise: 0.1 mV rms through a 10 kHz pole.
pub fn default_noise() -> NoiseProfile {
    NoiseProfile::band_limited(1e-4, 1e4)
}

/// A file holds either one scenario at top level or a `[[scenarios]]` array.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioList {
    scenarios: Vec<ScenarioConfig>,
}

pub fn parse_scenarios(text: &str) -> Result<Vec<ScenarioConfig>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let list = if table.contains_key("scenarios") {
        toml::from_str::<ScenarioList>(text).map_err(|e| Error::Config(e.to_string()))?.scenarios
    } else {
        vec![ScenarioConfig::from_toml_str(text)?]
    };
    if list.is_empty() {
        return Err(Error::Config("no scenarios defined".into()));
    }
    for (i, s) in list.iter().enumerate() {
        s.validate().map_err(|e| Error::Config(format!("scenario {i} ({}): {e}", s.name)))?;
    }
    Ok(list)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenarios(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        controller = "dladrc"
        p = 3
        omega_c = 150.0
        omega_in = 800.0
        omega_o1 = 150.0
        omega_op = 1000.0
        dt = 5e-5
        duration = 1.0
        [reference]
        initial = 1.0
        steps = [{ time = 0.0, value = 1.5 }]
    "#;

    #[test]
    fn parses_minimal_file() {
        let s = parse_scenarios(MINIMAL).unwrap();
        assert_eq!(s.len(), 1);
        let c = &s[0];
        assert_eq!(c.record_every, 20);
        assert_eq!(c.reference.at(-1.0), 1.0);
        assert_eq!(c.reference.at(0.0), 1.5);
        let ladder = c.cascade().unwrap().unwrap();
        assert!((ladder.omega_op() - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_unknown_fields_and_coarse_steps() {
        let bad = MINIMAL.replace("p = 3", "p = 3\nbogus = 1");
        assert!(matches!(parse_scenarios(&bad), Err(Error::Config(_))));
        let coarse = MINIMAL.replace("dt = 5e-5", "dt = 1e-4");
        assert!(parse_scenarios(&coarse).is_err());
        let wrong_order = MINIMAL.replace("p = 3", "p = 3\nn = 2");
        assert!(parse_scenarios(&wrong_order).is_err());
    }

    #[test]
    fn parses_scenario_list_and_partial_plant() {
        let text = format!(
            "[[scenarios]]\n{}\n[scenarios.plant]\nbeta_override_absent = 0\n",
            MINIMAL.replace("[reference]", "[scenarios.reference]")
        );
        // Unknown plant keys are rejected.
        assert!(parse_scenarios(&text).is_err());
        let text = format!(
            "[[scenarios]]\n{}\n[scenarios.plant]\ng_m = 0.25\n[scenarios.noise]\nkind = \"band-limited-white\"\nsigma = 1e-4\n",
            MINIMAL.replace("[reference]", "[scenarios.reference]")
        );
        let s = parse_scenarios(&text).unwrap();
        assert_eq!(s[0].plant.g_m, 0.25);
        assert_eq!(s[0].plant.r_f, PlantPhysicalParams::reference().r_f);
        assert_eq!(s[0].noise.cutoff_hz, 1e4);
    }
}
