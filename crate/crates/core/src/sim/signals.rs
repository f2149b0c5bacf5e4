//! Exogenous signals: input disturbance `d(t)` and measurement noise `ρ(t)`.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisturbanceComponent {
    Constant {
        value: f64,
    },
    /// `slope·t` from t = 0.
    Ramp {
        slope: f64,
    },
    Sinusoid {
        amplitude: f64,
        frequency_hz: f64,
        #[serde(default)]
        phase: f64,
    },
    /// Raised-cosine transition of height `amplitude` starting at `time`.
    SmoothedStep {
        time: f64,
        amplitude: f64,
        rise_time: f64,
    },
}

impl DisturbanceComponent {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::Constant { value } => value.is_finite(),
            Self::Ramp { slope } => slope.is_finite(),
            Self::Sinusoid { amplitude, frequency_hz, phase } => {
                amplitude.is_finite() && frequency_hz.is_finite() && frequency_hz >= 0.0 && phase.is_finite()
            }
            Self::SmoothedStep { time, amplitude, rise_time } => {
                time.is_finite() && amplitude.is_finite() && rise_time > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("disturbance", format!("invalid component {self:?}")))
        }
    }

    /// `(d, ḋ)` at time `t`.
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            Self::Constant { value } => (value, 0.0),
            Self::Ramp { slope } => (slope * t, slope),
            Self::Sinusoid { amplitude, frequency_hz, phase } => {
                let w = 2.0 * PI * frequency_hz;
                let arg = w * t + phase;
                (amplitude * arg.sin(), amplitude * w * arg.cos())
            }
            Self::SmoothedStep { time, amplitude, rise_time } => {
                if t <= time {
                    (0.0, 0.0)
                } else if t >= time + rise_time {
                    (amplitude, 0.0)
                } else {
                    let s = (t - time) / rise_time;
                    (
                        0.5 * amplitude * (1.0 - (PI * s).cos()),
                        0.5 * amplitude * PI / rise_time * (PI * s).sin(),
                    )
                }
            }
        }
    }
}

/// Sum of components; continuously differentiable by construction.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisturbanceProfile {
    pub components: Vec<DisturbanceComponent>,
}

impl DisturbanceProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        self.components.iter().try_for_each(DisturbanceComponent::validate)
    }

    pub fn eval(&self, t: f64) -> (f64, f64) {
        self.components.iter().fold((0.0, 0.0), |(d, dd), c| {
            let (a, b) = c.eval(t);
            (d + a, dd + b)
        })
    }

    /// Upper bounds on `‖d‖∞` and `‖ḋ‖∞` over `[0, horizon]`.
    pub fn sup_bounds(&self, horizon: f64) -> (f64, f64) {
        self.components.iter().fold((0.0, 0.0), |(d, dd), c| {
            let (a, b) = match *c {
                DisturbanceComponent::Constant { value } => (value.abs(), 0.0),
                DisturbanceComponent::Ramp { slope } => (slope.abs() * horizon, slope.abs()),
                DisturbanceComponent::Sinusoid { amplitude, frequency_hz, .. } => {
                    (amplitude.abs(), amplitude.abs() * 2.0 * PI * frequency_hz)
                }
                DisturbanceComponent::SmoothedStep { amplitude, rise_time, .. } => {
                    (amplitude.abs(), amplitude.abs() * PI / (2.0 * rise_time))
                }
            };
            (d + a, dd + b)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    #[default]
    None,
    /// Independent Gaussian sample held over each integration step.
    GaussianWhite,
    /// Gaussian white noise through a first-order low-pass at `cutoff_hz`.
    BandLimitedWhite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    pub kind: NoiseKind,
    /// Standard deviation of ρ itself (V).
    pub sigma: f64,
    pub cutoff_hz: f64,
    /// Overrides the scenario seed when set.
    pub seed: Option<u64>,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma: 0.0,
            cutoff_hz: 1e4,
            seed: None,
        }
    }
}

impl NoiseProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn band_limited(sigma: f64, cutoff_hz: f64) -> Self {
        Self {
            kind: NoiseKind::BandLimitedWhite,
            sigma,
            cutoff_hz,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid("noise.sigma", "must be non-negative"));
        }
        if self.kind == NoiseKind::BandLimitedWhite && !(self.cutoff_hz > 0.0) {
            return Err(Error::invalid("noise.cutoff_hz", "must be positive"));
        }
        Ok(())
    }

    pub fn is_silent(&self) -> bool {
        self.kind == NoiseKind::None || self.sigma == 0.0
    }
}

/// Step-wise noise source. Within step `[t_k, t_k + h)` the band-limited
/// signal is the exact filter response to the held white sample `w_k`:
/// `ρ(t_k + s) = w_k + (ρ_k − w_k)·e^{−ω_f s}`, so ρ stays continuous.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    kind: NoiseKind,
    omega_f: f64,
    decay: f64,
    sample_sigma: f64,
    rng: ChaCha8Rng,
    rho_k: f64,
    w_k: f64,
}

impl NoiseSource {
    pub fn new(profile: &NoiseProfile, dt: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(profile.seed.unwrap_or(seed));
        let kind = if profile.is_silent() { NoiseKind::None } else { profile.kind };
        let omega_f = 2.0 * PI * profile.cutoff_hz;
        let decay = (-omega_f * dt).exp();
        let sample_sigma = match kind {
            NoiseKind::None => 0.0,
            NoiseKind::GaussianWhite => profile.sigma,
            // Stationary variance of the sampled filter is σ_w²(1−a)/(1+a).
            NoiseKind::BandLimitedWhite => profile.sigma * ((1.0 + decay) / (1.0 - decay)).sqrt(),
        };
        let rho_k = match kind {
            NoiseKind::BandLimitedWhite => {
                let z: f64 = StandardNormal.sample(&mut rng);
                profile.sigma * z
            }
            _ => 0.0,
        };
        Self {
            kind,
            omega_f,
            decay,
            sample_sigma,
            rng,
            rho_k,
            w_k: 0.0,
        }
    }

    /// Draw the sample held over the next step.
    pub fn begin_step(&mut self) {
        if self.kind != NoiseKind::None {
            let z: f64 = StandardNormal.sample(&mut self.rng);
            self.w_k = self.sample_sigma * z;
        }
    }

    /// Close the current step of length `dt` (the same `dt` used in [`Self::new`]).
    pub fn end_step(&mut self) {
        if self.kind == NoiseKind::BandLimitedWhite {
            self.rho_k = self.w_k + (self.rho_k - self.w_k) * self.decay;
        }
    }

    pub fn held(&self) -> HeldNoise {
        HeldNoise {
            kind: self.kind,
            omega_f: self.omega_f,
            rho_k: self.rho_k,
            w_k: self.w_k,
        }
    }
}

/// Noise state frozen for one integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldNoise {
    kind: NoiseKind,
    omega_f: f64,
    rho_k: f64,
    w_k: f64,
}

impl HeldNoise {
    /// `(ρ, ρ̇)` at offset `s` into the step.
    #[inline]
    pub fn eval(&self, s: f64) -> (f64, f64) {
        match self.kind {
            NoiseKind::None => (0.0, 0.0),
            NoiseKind::GaussianWhite => (self.w_k, 0.0),
            NoiseKind::BandLimitedWhite => {
                let g = (self.rho_k - self.w_k) * (-self.omega_f * s).exp();
                (self.w_k + g, -self.omega_f * g)
            }
        }
    }

    /// `(ω_f, w_k)` of `ρ̇ = ω_f·(w_k − ρ)` over the step; zero rate when `ρ`
    /// is constant within the step.
    pub fn relaxation(&self) -> (f64, f64) {
        match self.kind {
            NoiseKind::BandLimitedWhite => (self.omega_f, self.w_k),
            _ => (0.0, 0.0),
        }
    }

    /// Exact `sup |ρ|` over a step: the filter moves monotonically toward `w_k`.
    pub fn step_sup(&self, dt: f64) -> f64 {
        match self.kind {
            NoiseKind::None => 0.0,
            NoiseKind::GaussianWhite => self.w_k.abs(),
            NoiseKind::BandLimitedWhite => self.rho_k.abs().max(self.eval(dt).0.abs()),
        }
    }
}
