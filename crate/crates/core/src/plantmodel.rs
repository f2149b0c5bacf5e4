//! Amplified-laser plant: physical constants, third-order transfer coefficients,
//! the extended state-space matrices used by every observer, and the plant vector field.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the driver/laser chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantPhysicalParams {
    /// AL conversion coefficient (V/A).
    pub phi_al: f64,
    /// Op-amp open-loop gain, the product of both stages (V/V).
    pub mu_oa: f64,
    /// Op-amp low pole (Hz).
    pub f_oal: f64,
    /// Op-amp high pole (Hz).
    pub f_oah: f64,
    /// MOSFET transconductance (A/V).
    pub g_m: f64,
    /// Series combination of gate-source and compensation capacitance (F).
    pub c_gs_eff: f64,
    /// Compensation resistance (Ω).
    pub r_c: f64,
    /// Current-sense feedback resistance (Ω).
    pub r_f: f64,
}

impl PlantPhysicalParams {
    /// Bench values of the reference driver.
    pub const fn reference() -> Self {
        Self {
            phi_al: 1.5e-3,
            mu_oa: 2e5,
            f_oal: 1.0,
            f_oah: 5e5,
            g_m: 0.2,
            c_gs_eff: 2.2e-6,
            r_c: 2e5,
            r_f: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phi_al", self.phi_al),
            ("mu_oa", self.mu_oa),
            ("f_oal", self.f_oal),
            ("f_oah", self.f_oah),
            ("g_m", self.g_m),
            ("c_gs_eff", self.c_gs_eff),
            ("r_c", self.r_c),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        // A zero sense resistor just removes the current feedback term.
        if !(self.r_f.is_finite() && self.r_f >= 0.0) {
            return Err(Error::invalid("r_f", format!("must be non-negative, got {}", self.r_f)));
        }
        if self.f_oal >= self.f_oah {
            return Err(Error::invalid(
                "f_oal",
                format!("low pole {} Hz must lie below high pole {} Hz", self.f_oal, self.f_oah),
            ));
        }
        Ok(())
    }
}

impl Default for PlantPhysicalParams {
    fn default() -> Self {
        Self::reference()
    }
}

/// Coefficients of `α₃y''' + α₂y'' + α₁y' + α₀y = β(u + d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantCoefficients {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta: f64,
}

/// Multiplicative perturbation of each plant coefficient (1.0 = nominal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientFactors {
    pub alpha0: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta: f64,
}

impl Default for CoefficientFactors {
    fn default() -> Self {
        Self {
            alpha0: 1.0,
            alpha1: 1.0,
            alpha2: 1.0,
            alpha3: 1.0,
            beta: 1.0,
        }
    }
}

impl PlantCoefficients {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha3.is_finite() && self.alpha3 > 0.0) {
            return Err(Error::invalid("alpha3", "must be positive"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::invalid("beta", "must be positive"));
        }
        for (name, v) in [("alpha0", self.alpha0), ("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        Ok(())
    }

    /// High-frequency input gain β/α₃, the quantity b̂_in estimates.
    pub fn input_gain(&self) -> f64 {
        self.beta / self.alpha3
    }

    /// Static gain β/α₀ from control voltage to output.
    pub fn dc_gain(&self) -> f64 {
        self.beta / self.alpha0
    }

    pub fn perturbed(&self, f: &CoefficientFactors) -> Self {
        Self {
            alpha0: self.alpha0 * f.alpha0,
            alpha1: self.alpha1 * f.alpha1,
            alpha2: self.alpha2 * f.alpha2,
            alpha3: self.alpha3 * f.alpha3,
            beta: self.beta * f.beta,
        }
    }
}

pub fn derive_plant_coefficients(params: &PlantPhysicalParams) -> Result<PlantCoefficients> {
    params.validate()?;
    let tau_l = 1.0 / (2.0 * PI * params.f_oal);
    let tau_h = 1.0 / (2.0 * PI * params.f_oah);
    let tau_c = params.r_c * params.c_gs_eff;
    let coeffs = PlantCoefficients {
        alpha0: params.mu_oa * params.g_m * params.r_f + 1.0,
        alpha1: tau_l + tau_h + tau_c,
        alpha2: tau_l * tau_h + tau_h * tau_c + tau_l * tau_c,
        alpha3: tau_l * tau_h * tau_c,
        beta: params.phi_al * params.mu_oa * params.g_m,
    };
    coeffs.validate()?;
    Ok(coeffs)
}

/// Extended state-space quadruple `(A, b, c, d)` of order `n` (dimension n+1).
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceSystem {
    pub n: usize,
    pub a_matrix: DMatrix<f64>,
    pub b_vec: DVector<f64>,
    pub c_vec: DVector<f64>,
    pub d_vec: DVector<f64>,
}

impl StateSpaceSystem {
    pub fn dim(&self) -> usize {
        self.n + 1
    }
}

pub fn build_system_matrices(n: usize) -> Result<StateSpaceSystem> {
    if n == 0 {
        return Err(Error::invalid("n", "plant order must be at least 1"));
    }
    let dim = n + 1;
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..n {
        a[(i, i + 1)] = 1.0;
    }
    let mut b = DVector::zeros(dim);
    b[n] = 1.0;
    let mut c = DVector::zeros(dim);
    c[0] = 1.0;
    let mut d = DVector::zeros(dim);
    d[n - 1] = 1.0;
    Ok(StateSpaceSystem {
        n,
        a_matrix: a,
        b_vec: b,
        c_vec: c,
        d_vec: d,
    })
}

/// `[y, ẏ, …, y⁽ⁿ⁻¹⁾, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: Vec<f64>,
}

impl ExtendedState {
    pub fn new(output_derivatives: &[f64], f: f64) -> Self {
        let mut x = output_derivatives.to_vec();
        x.push(f);
        Self { x }
    }

    pub fn output(&self) -> f64 {
        self.x[0]
    }

    pub fn disturbance(&self) -> f64 {
        self.x[self.x.len() - 1]
    }
}

/// Time derivative of `(y, ẏ, ÿ)`.
pub fn plant_derivative(coeffs: &PlantCoefficients, y: [f64; 3], u_ctl: f64, d: f64) -> [f64; 3] {
    let a3 = coeffs.alpha3;
    let y3 = -(coeffs.alpha2 / a3) * y[2] - (coeffs.alpha1 / a3) * y[1] - (coeffs.alpha0 / a3) * y[0]
        + (coeffs.beta / a3) * (u_ctl + d);
    [y[1], y[2], y3]
}

/// Everything the inner observer has to estimate: `y''' − b̂·u`.
pub fn compute_generalized_disturbance(
    coeffs: &PlantCoefficients,
    y: [f64; 3],
    u_ctl: f64,
    d: f64,
    b_hat_in: f64,
) -> Result<f64> {
    if !(b_hat_in > 0.0) {
        return Err(Error::invalid("b_hat_in", format!("must be positive, got {b_hat_in}")));
    }
    Ok(plant_derivative(coeffs, y, u_ctl, d)[2] - b_hat_in * u_ctl)
}

/// The plant split as `(s − λ)(s² + p·s + q)` with λ the fastest real pole.
///
/// The driver's high pole sits near −3e6 rad/s while the optical dynamics live
/// below 100 rad/s. Realising the plant with states `(y, ẏ, w)`, where
/// `ẇ = λw + g(u + d)` and `ÿ = w − pẏ − qy`, confines the stiffness to a single
/// diagonal entry that an exponential integrator can treat exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactoredPlant {
    pub lambda: f64,
    pub p: f64,
    pub q: f64,
    /// β/α₃.
    pub gain: f64,
}

impl FactoredPlant {
    pub fn new(coeffs: &PlantCoefficients) -> Result<Self> {
        coeffs.validate()?;
        let a2 = coeffs.alpha2 / coeffs.alpha3;
        let a1 = coeffs.alpha1 / coeffs.alpha3;
        let a0 = coeffs.alpha0 / coeffs.alpha3;
        let poly = |s: f64| ((s + a2) * s + a1) * s + a0;
        let dpoly = |s: f64| (3.0 * s + 2.0 * a2) * s + a1;
        // Left of every root the cubic is increasing and concave, so Newton
        // converges monotonically to the leftmost real root.
        let mut s = -(1.0 + a0.abs().max(a1.abs()).max(a2.abs()));
        for _ in 0..500 {
            let step = poly(s) / dpoly(s);
            s -= step;
            if step.abs() <= 1e-15 * s.abs().max(1.0) {
                break;
            }
        }
        if !s.is_finite() || s == 0.0 {
            return Err(Error::invalid("alpha0", "plant has no usable nonzero real pole"));
        }
        let q = -a0 / s;
        let p = (q - a1) / s;
        Ok(Self {
            lambda: s,
            p,
            q,
            gain: coeffs.input_gain(),
        })
    }

    /// `(y, ẏ, ÿ)` from the factored state `(y, ẏ, w)`.
    pub fn output_derivatives(&self, s: &[f64]) -> [f64; 3] {
        [s[0], s[1], s[2] - self.p * s[1] - self.q * s[0]]
    }

    /// Inverse of [`Self::output_derivatives`].
    pub fn state_from_output(&self, y: [f64; 3]) -> [f64; 3] {
        [y[0], y[1], y[2] + self.p * y[1] + self.q * y[0]]
    }

    /// Derivative of the factored state.
    pub fn derivative(&self, s: &[f64], u_plus_d: f64, out: &mut [f64]) {
        out[0] = s[1];
        out[1] = s[2] - self.p * s[1] - self.q * s[0];
        out[2] = self.lambda * s[2] + self.gain * u_plus_d;
    }
}
