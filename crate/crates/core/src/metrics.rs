//! Stability and convergence metrics: Allan variance, peak-to-peak instability,
//! log-domain exponential fits and settling time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitudes below this are excluded from log-domain fits.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllanMode {
    #[default]
    NonOverlapping,
    Overlapping,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllanCurve {
    pub taus: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl AllanCurve {
    /// Mean σ² over the taus in `[lo, hi]`, if any fall there.
    pub fn mean_over(&self, lo: f64, hi: f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .taus
            .iter()
            .zip(&self.sigma2)
            .filter(|(t, _)| **t >= lo * (1.0 - 1e-9) && **t <= hi * (1.0 + 1e-9))
            .map(|(_, s)| *s)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

fn bin_factor(tau: f64, dt: f64) -> Result<usize> {
    let m = (tau / dt).round();
    if !(m >= 1.0) || (m * dt - tau).abs() > 1e-9 * tau.max(dt) {
        return Err(Error::invalid("taus", format!("tau {tau} is not a multiple of dt {dt}")));
    }
    Ok(m as usize)
}

/// Non-overlapping Allan variance, `σ²(τ) = ½·mean_k (ȳ_{k+1} − ȳ_k)²`.
pub fn allan_variance(samples: &[f64], dt: f64, taus: &[f64]) -> Result<AllanCurve> {
    allan_variance_with(samples, dt, taus, AllanMode::NonOverlapping)
}

pub fn allan_variance_with(samples: &[f64], dt: f64, taus: &[f64], mode: AllanMode) -> Result<AllanCurve> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", "must be positive"));
    }
    if taus.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("taus", "must be strictly increasing"));
    }
    // Prefix sums make every bin mean O(1). Offsetting by the first sample
    // keeps a constant signal at exactly zero variance.
    let origin = samples.first().copied().unwrap_or(0.0);
    let mut prefix = Vec::with_capacity(samples.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &s in samples {
        acc += s - origin;
        prefix.push(acc);
    }
    let mean = |start: usize, m: usize| (prefix[start + m] - prefix[start]) / m as f64;
    let mut sigma2 = Vec::with_capacity(taus.len());
    for &tau in taus {
        let m = bin_factor(tau, dt)?;
        let bins = samples.len() / m;
        if bins < 2 {
            return Err(Error::invalid("taus", format!("tau {tau} leaves fewer than 2 bins")));
        }
        let (sum, count) = match mode {
            AllanMode::NonOverlapping => (0..bins - 1).fold((0.0, 0usize), |(s, c), k| {
                let d = mean((k + 1) * m, m) - mean(k * m, m);
                (s + d * d, c + 1)
            }),
            AllanMode::Overlapping => (0..=samples.len() - 2 * m).fold((0.0, 0usize), |(s, c), k| {
                let d = mean(k + m, m) - mean(k, m);
                (s + d * d, c + 1)
            }),
        };
        sigma2.push(0.5 * sum / count as f64);
    }
    Ok(AllanCurve {
        taus: taus.to_vec(),
        sigma2,
    })
}

/// Log-spaced taus aligned to `dt`, from one sample up to the longest tau with
/// at least `min_bins` bins.
pub fn log_spaced_taus(dt: f64, len: usize, per_decade: usize, min_bins: usize) -> Vec<f64> {
    let max_m = len / min_bins.max(2);
    let mut ms: Vec<usize> = Vec::new();
    let mut k = 0;
    loop {
        let m = 10f64.powf(k as f64 / per_decade as f64).round() as usize;
        if m > max_m {
            break;
        }
        if ms.last() != Some(&m) {
            ms.push(m);
        }
        k += 1;
    }
    ms.into_iter().map(|m| m as f64 * dt).collect()
}

/// `(max − min) / (2·setpoint) × 100`.
pub fn instability_percent(samples: &[f64], setpoint: f64) -> Result<f64> {
    if !(setpoint > 0.0) {
        return Err(Error::invalid("setpoint", format!("must be positive, got {setpoint}")));
    }
    if samples.is_empty() {
        return Err(Error::invalid("samples", "must be non-empty"));
    }
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    Ok((hi - lo) / (2.0 * setpoint) * 100.0)
}

/// `|e(t)| ≈ amplitude·e^{−rate·t} + offset`, fitted in the log domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpFit {
    pub amplitude: f64,
    pub rate: f64,
    /// Always 0 for the log-domain fit; kept so reports have a fixed shape.
    pub offset: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least squares on `log|e| = log A − rate·t`. Samples with `|e| < 1e-12`
/// are dropped before fitting.
pub fn fit_exponential(t: &[f64], e: &[f64]) -> Result<ExpFit> {
    if t.len() != e.len() {
        return Err(Error::invalid("trace", "time and error columns differ in length"));
    }
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(e)
        .filter(|(_, v)| v.abs() >= LOG_FLOOR)
        .map(|(t, v)| (*t, v.abs().ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::DegenerateFit(format!("{} usable points, need at least 5", pts.len())));
    }
    // Centre on the first point so a constant magnitude fits with slope exactly 0.
    let (t0, y0) = pts[0];
    let pts: Vec<(f64, f64)> = pts.iter().map(|(t, y)| (t - t0, y - y0)).collect();
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateFit("all samples at one time".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * tm;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - ym).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) } else { 0.0 };
    Ok(ExpFit {
        amplitude: (y0 + intercept + slope * t0).exp(),
        rate: -slope,
        offset: 0.0,
        r_squared,
        points: pts.len(),
    })
}

/// First time after which `|e|` stays within `band_fraction·step_amplitude`.
/// `None` if the final sample is still outside the band.
pub fn settling_time(t: &[f64], e: &[f64], band_fraction: f64, step_amplitude: f64) -> Option<f64> {
    let band = band_fraction * step_amplitude.abs();
    match e.iter().rposition(|v| v.abs() > band) {
        None => t.first().copied(),
        Some(i) if i + 1 < t.len() => Some(t[i + 1]),
        Some(_) => None,
    }
}
