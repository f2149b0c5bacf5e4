//! Extended state observers: the inner supplemental ESO on the clean channel and
//! the p-level cascade of outer ESOs on the noisy error measurement.
//!
//! State vectors are plain slices of length n+1; cascade states are stored
//! level-major in one slice of length p·(n+1).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plantmodel::StateSpaceSystem;

/// Largest order for which binomials are tabulated exactly in `u64`.
pub const MAX_ORDER: usize = 20;

/// Exact binomial coefficient for small arguments.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // Stays integral at every step: acc·(n−i)/(i+1) = C(n, i+1).
        acc = acc * (n - i) as u64 / (i as u64 + 1);
    }
    acc
}

/// Observer bandwidth in rad/s; always strictly above 1.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(omega: f64) -> Result<Self> {
        if !(omega.is_finite() && omega > 1.0) {
            return Err(Error::invalid("omega", format!("observer bandwidth must exceed 1, got {omega}")));
        }
        Ok(Self(omega))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsoGains {
    pub n: usize,
    pub omega: Bandwidth,
    /// `l[m] = C(n+1, m+1)·ω^{m+1}`.
    pub l_vec: Vec<f64>,
}

fn check_order(n: usize) -> Result<()> {
    if n == 0 || n > MAX_ORDER {
        return Err(Error::invalid("n", format!("order must be in 1..={MAX_ORDER}, got {n}")));
    }
    Ok(())
}

pub fn eso_gain(n: usize, omega: f64) -> Result<EsoGains> {
    check_order(n)?;
    let omega = Bandwidth::new(omega)?;
    let w = omega.get();
    let l_vec = (1..=n + 1)
        .map(|m| binomial(n + 1, m) as f64 * w.powi(m as i32))
        .collect();
    Ok(EsoGains { n, omega, l_vec })
}

/// Geometric bandwidth ladder `ω_oj = α^{j−1}·ω_o1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    pub p: usize,
    pub omega_o1: f64,
    pub alpha: f64,
}

impl CascadeConfig {
    pub fn new(p: usize, omega_o1: f64, alpha: f64) -> Result<Self> {
        if p == 0 {
            return Err(Error::invalid("p", "cascade depth must be at least 1"));
        }
        Bandwidth::new(omega_o1)?;
        if !(alpha.is_finite() && alpha > 1.0) {
            return Err(Error::invalid("alpha", format!("ladder ratio must exceed 1, got {alpha}")));
        }
        Ok(Self { p, omega_o1, alpha })
    }

    /// Ladder whose top level sits at `omega_op`. For `p = 1` the ratio is
    /// irrelevant and `omega_o1` must equal `omega_op`.
    pub fn matched(p: usize, omega_o1: f64, omega_op: f64) -> Result<Self> {
        if p == 1 {
            if (omega_o1 - omega_op).abs() > 1e-12 * omega_op {
                return Err(Error::invalid("omega_o1", "single-level cascade needs omega_o1 = omega_op"));
            }
            return Self::new(1, omega_o1, 2.0);
        }
        if omega_op <= omega_o1 {
            return Err(Error::invalid("omega_o1", "must lie below omega_op for p > 1"));
        }
        Self::new(p, omega_o1, (omega_op / omega_o1).powf(1.0 / (p - 1) as f64))
    }

    pub fn bandwidth(&self, level: usize) -> f64 {
        self.alpha.powi(level as i32) * self.omega_o1
    }

    pub fn bandwidths(&self) -> Vec<f64> {
        (0..self.p).map(|j| self.bandwidth(j)).collect()
    }

    /// Bandwidth of the last level.
    pub fn omega_op(&self) -> f64 {
        self.bandwidth(self.p - 1)
    }
}

pub fn gain_ladder(n: usize, config: &CascadeConfig) -> Result<Vec<EsoGains>> {
    config.bandwidths().into_iter().map(|w| eso_gain(n, w)).collect()
}

/// `out = A·x` for the shift-structured A.
#[inline]
fn shift(x: &[f64], out: &mut [f64]) {
    let n1 = x.len();
    out[..n1 - 1].copy_from_slice(&x[1..]);
    out[n1 - 1] = 0.0;
}

/// `ẋ̂ = A·x̂ + d·b̂·u + L·(y − c⊤x̂)`.
pub fn inner_eso_derivative(
    sys: &StateSpaceSystem,
    gains: &EsoGains,
    x_hat: &[f64],
    y_in: f64,
    u_in: f64,
    b_hat_in: f64,
    out: &mut [f64],
) {
    let n = sys.n;
    debug_assert_eq!(x_hat.len(), n + 1);
    shift(x_hat, out);
    out[n - 1] += b_hat_in * u_in;
    let innov = y_in - x_hat[0];
    for (o, l) in out.iter_mut().zip(&gains.l_vec) {
        *o += l * innov;
    }
}

/// Cascade observer vector field. Level 1 is driven by the measurement,
/// level i by the first component of level i−1 plus the accumulated
/// disturbance estimates of the levels below it.
pub fn cascade_eso_derivative(
    sys: &StateSpaceSystem,
    ladder: &[EsoGains],
    xi: &[f64],
    y_out: f64,
    u_out: f64,
    out: &mut [f64],
) {
    let n = sys.n;
    let dim = n + 1;
    debug_assert_eq!(xi.len(), ladder.len() * dim);
    let mut accumulated = 0.0;
    for (i, gains) in ladder.iter().enumerate() {
        let level = &xi[i * dim..(i + 1) * dim];
        let dlevel = &mut out[i * dim..(i + 1) * dim];
        shift(level, dlevel);
        dlevel[n - 1] += accumulated - u_out;
        let innov = if i == 0 { y_out - level[0] } else { xi[(i - 1) * dim] - level[0] };
        for (o, l) in dlevel.iter_mut().zip(&gains.l_vec) {
            *o += l * innov;
        }
        accumulated += level[n];
    }
}

/// `ẑ_p = ξ_p + b·b⊤·Σ_{k<p} ξ_k`.
pub fn combine_cascade(dim: usize, xi: &[f64], out: &mut [f64]) {
    let p = xi.len() / dim;
    out.copy_from_slice(&xi[(p - 1) * dim..]);
    out[dim - 1] += (0..p - 1).map(|k| xi[k * dim + dim - 1]).sum::<f64>();
}

/// Combined estimate of level `level` (0-based), i.e. `ẑ_{level+1}`.
pub fn level_estimate(dim: usize, xi: &[f64], level: usize, out: &mut [f64]) {
    combine_cascade(dim, &xi[..(level + 1) * dim], out);
}

/// Snapshot of every observer state in a DLADRC loop.
#[derive(Debug, Clone, PartialEq)]
pub struct EsoBank {
    pub n: usize,
    pub x_hat: Vec<f64>,
    /// Level-major, `p·(n+1)` entries.
    pub xi: Vec<f64>,
    pub z_hat_p: Vec<f64>,
}

impl EsoBank {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            n,
            x_hat: vec![0.0; n + 1],
            xi: vec![0.0; p * (n + 1)],
            z_hat_p: vec![0.0; n + 1],
        }
    }

    pub fn from_states(n: usize, x_hat: &[f64], xi: &[f64]) -> Self {
        let mut bank = Self {
            n,
            x_hat: x_hat.to_vec(),
            xi: xi.to_vec(),
            z_hat_p: vec![0.0; n + 1],
        };
        bank.refresh();
        bank
    }

    pub fn p(&self) -> usize {
        self.xi.len() / (self.n + 1)
    }

    pub fn level(&self, i: usize) -> &[f64] {
        let dim = self.n + 1;
        &self.xi[i * dim..(i + 1) * dim]
    }

    /// Recompute `z_hat_p` after the cascade states changed.
    pub fn refresh(&mut self) {
        combine_cascade(self.n + 1, &self.xi, &mut self.z_hat_p);
    }
}
