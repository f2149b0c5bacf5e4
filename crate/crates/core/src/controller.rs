//! Control laws: the dual-loop ADRC law, the single-observer ADRC baseline and a
//! positional PID baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observers::binomial;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    pub n: usize,
    pub omega_c: f64,
    /// `κ_l = C(n, l−1)` for l = 1..n.
    pub kappa: Vec<u64>,
    /// `[0, κ₂ω_c^{n−1}, …, κ_n·ω_c, 0]`, length n+1.
    pub k_out: Vec<f64>,
    /// `κ₁·ω_cⁿ`.
    pub kappa1_wn: f64,
}

pub fn controller_gains(n: usize, omega_c: f64) -> Result<ControllerGains> {
    if n == 0 || n > crate::observers::MAX_ORDER {
        return Err(Error::invalid("n", format!("order must be in 1..=20, got {n}")));
    }
    if !(omega_c.is_finite() && omega_c > 0.0) {
        return Err(Error::invalid("omega_c", format!("must be positive, got {omega_c}")));
    }
    let kappa: Vec<u64> = (1..=n).map(|l| binomial(n, l - 1)).collect();
    let mut k_out = vec![0.0; n + 1];
    for l in 2..=n {
        k_out[l - 1] = kappa[l - 1] as f64 * omega_c.powi((n + 1 - l) as i32);
    }
    Ok(ControllerGains {
        n,
        omega_c,
        kappa1_wn: kappa[0] as f64 * omega_c.powi(n as i32),
        kappa,
        k_out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlCommand {
    pub u_out: f64,
    pub u_in: f64,
}

fn check_b_hat(b_hat: f64) -> Result<()> {
    if !(b_hat.is_finite() && b_hat > 0.0) {
        return Err(Error::invalid("b_hat_in", format!("must be positive, got {b_hat}")));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `u_out = κ₁ω_cⁿ·y_out + K_out·ẑ_p`, `u_in = (u_out − x̂_{n+1}) / b̂`.
pub fn dladrc_control(
    gains: &ControllerGains,
    y_out: f64,
    x_hat: &[f64],
    z_hat_p: &[f64],
    b_hat_in: f64,
) -> Result<ControlCommand> {
    check_b_hat(b_hat_in)?;
    let u_out = gains.kappa1_wn * y_out + dot(&gains.k_out, z_hat_p);
    Ok(ControlCommand {
        u_out,
        u_in: (u_out - x_hat[gains.n]) / b_hat_in,
    })
}

/// Single-observer law: `u = (ω_cⁿ(r − x̂₁) − K_out·x̂ − x̂_{n+1}) / b̂`.
///
/// The observer is the ordinary ESO fed by the noisy measurement, so sensor
/// noise reaches every estimate it uses.
pub fn sadrc_control(gains: &ControllerGains, x_hat: &[f64], r: f64, b_hat: f64) -> Result<f64> {
    check_b_hat(b_hat)?;
    let u0 = gains.kappa1_wn * (r - x_hat[0]) - dot(&gains.k_out, x_hat);
    Ok((u0 - x_hat[gains.n]) / b_hat)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Derivative filter time constant (s); 0 disables filtering.
    #[serde(default)]
    pub tf: f64,
    /// Bound on the integral term's contribution to `u`.
    #[serde(default = "PidGains::unbounded")]
    pub integral_limit: f64,
}

impl PidGains {
    fn unbounded() -> f64 {
        f64::INFINITY
    }

    /// Integral term limited to ±10× the setpoint.
    pub fn with_setpoint_clamp(mut self, setpoint: f64) -> Self {
        self.integral_limit = 10.0 * setpoint.abs();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub derivative: f64,
    pub prev_error: Option<f64>,
}

impl PidState {
    /// State whose next output with zero error equals `u`.
    pub fn holding(gains: &PidGains, u: f64) -> Self {
        let integral = if gains.ki != 0.0 { u / gains.ki } else { 0.0 };
        Self {
            integral,
            derivative: 0.0,
            prev_error: Some(0.0),
        }
    }
}

/// Positional PID with a clamped integral term and an optionally filtered
/// backward-difference derivative.
pub fn pid_control(state: PidState, gains: &PidGains, e: f64, dt: f64) -> Result<(f64, PidState)> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    let mut next = state;
    next.integral += e * dt;
    if gains.ki != 0.0 && gains.integral_limit.is_finite() {
        let lim = gains.integral_limit / gains.ki.abs();
        next.integral = next.integral.clamp(-lim, lim);
    }
    let raw = match state.prev_error {
        Some(prev) => gains.kd * (e - prev) / dt,
        None => 0.0,
    };
    next.derivative = if gains.tf > 0.0 {
        (gains.tf * state.derivative + dt * raw) / (gains.tf + dt)
    } else {
        raw
    };
    next.prev_error = Some(e);
    let u = gains.kp * e + gains.ki * next.integral + next.derivative;
    Ok((u, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn factorial(k: usize) -> u64 {
        (1..=k as u64).product()
    }

    #[test]
    fn kappa_matches_factorials() {
        for n in 1..=6 {
            let g = controller_gains(n, 2.0).unwrap();
            for l in 1..=n {
                let f = factorial(n) / (factorial(n + 1 - l) * factorial(l - 1));
                assert_eq!(g.kappa[l - 1], f);
            }
            assert_eq!(g.k_out[0], 0.0);
            assert_eq!(g.k_out[n], 0.0);
        }
    }

    #[test]
    fn gain_examples() {
        let g = controller_gains(3, 10.0).unwrap();
        assert_eq!(g.kappa, vec![1, 3, 3]);
        assert_eq!(g.k_out, vec![0.0, 300.0, 30.0, 0.0]);
        let g = controller_gains(1, 10.0).unwrap();
        assert_eq!(g.kappa, vec![1]);
        assert_eq!(g.k_out, vec![0.0, 0.0]);
        assert_eq!(controller_gains(3, 300.0).unwrap().kappa1_wn, 2.7e7);
        assert!(controller_gains(3, 0.0).is_err());
    }

    #[test]
    fn dladrc_examples() {
        let g = controller_gains(3, 150.0).unwrap();
        let c = dladrc_control(&g, 0.0, &[0.0; 4], &[0.0; 4], 1.0).unwrap();
        assert_eq!((c.u_out, c.u_in), (0.0, 0.0));
        let c = dladrc_control(&g, 0.0, &[0.0, 0.0, 0.0, 5.0], &[0.0; 4], 2.0).unwrap();
        assert_eq!(c.u_in, -2.5);
        let c = dladrc_control(&g, 0.5, &[0.0; 4], &[0.0, 1.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(c.u_out, 150f64.powi(3) * 0.5 + 3.0 * 150f64.powi(2));
        assert!(dladrc_control(&g, 0.0, &[0.0; 4], &[0.0; 4], 0.0).is_err());
    }

    #[test]
    fn dladrc_is_linear() {
        let g = controller_gains(3, 37.0).unwrap();
        let x1 = [0.1, -0.3, 2.0, 5.0];
        let z1 = [0.4, 0.2, -0.1, 3.0];
        let x2 = [1.1, 0.3, -2.0, -1.0];
        let z2 = [-0.4, 0.7, 0.9, 1.0];
        let a = dladrc_control(&g, 0.3, &x1, &z1, 2.0).unwrap();
        let b = dladrc_control(&g, -0.8, &x2, &z2, 2.0).unwrap();
        let xs: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let zs: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a + b).collect();
        let s = dladrc_control(&g, -0.5, &xs, &zs, 2.0).unwrap();
        assert_relative_eq!(s.u_out, a.u_out + b.u_out, max_relative = 1e-12);
        assert_relative_eq!(s.u_in, a.u_in + b.u_in, max_relative = 1e-12);
    }

    #[test]
    fn sadrc_examples() {
        let g = controller_gains(3, 300.0).unwrap();
        assert_eq!(sadrc_control(&g, &[0.0; 4], 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(sadrc_control(&g, &[1.5, 0.0, 0.0, 0.0], 1.5, 1.0).unwrap(), 0.0);
        // Pure disturbance cancellation.
        assert_eq!(sadrc_control(&g, &[1.5, 0.0, 0.0, 4.0], 1.5, 2.0).unwrap(), -2.0);
    }

    #[test]
    fn pid_examples() {
        let g = PidGains { kp: 2.0, ki: 0.0, kd: 0.0, tf: 0.0, integral_limit: f64::INFINITY };
        let (u, _) = pid_control(PidState::default(), &g, 0.0, 0.01).unwrap();
        assert_eq!(u, 0.0);
        let (u, _) = pid_control(PidState::default(), &g, 0.5, 0.01).unwrap();
        assert_eq!(u, 1.0);
        assert!(pid_control(PidState::default(), &g, 0.5, 0.0).is_err());
    }

    #[test]
    fn pid_integral_is_clamped() {
        let g = PidGains { kp: 0.0, ki: 5.0, kd: 0.0, tf: 0.0, integral_limit: 0.0 }.with_setpoint_clamp(1.5);
        let mut s = PidState::default();
        let mut u = 0.0;
        for _ in 0..10_000 {
            (u, s) = pid_control(s, &g, 1.0, 0.01).unwrap();
        }
        assert_relative_eq!(u, 15.0, max_relative = 1e-12);
    }

    #[test]
    fn pid_holding_state() {
        let g = PidGains { kp: 2.0, ki: 40.0, kd: 0.04, tf: 1e-3, integral_limit: 100.0 };
        let (u, _) = pid_control(PidState::holding(&g, 1.025), &g, 0.0, 5e-5).unwrap();
        assert_relative_eq!(u, 1.025, max_relative = 1e-12);
    }
}
