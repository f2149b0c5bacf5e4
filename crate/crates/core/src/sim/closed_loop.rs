//! The coupled plant/observer/controller vector field and the run loop.

use log::debug;

use super::config::{ControllerKind, ScenarioConfig, INSTABILITY_FACTOR};
use nalgebra::{DMatrix, DVector};

use super::integrate::AffinePropagator;
use super::signals::{DisturbanceProfile, HeldNoise, NoiseSource};
use super::trace::{SimulationTrace, TraceMeta};
use crate::controller::{controller_gains, pid_control, ControllerGains, PidGains, PidState};
use crate::error::{Error, Result};
use crate::observers::{combine_cascade, eso_gain, gain_ladder, level_estimate, EsoGains, MAX_ORDER};
use crate::plantmodel::{build_system_matrices, FactoredPlant, StateSpaceSystem};

const PLANT_DIM: usize = 3;

enum Law {
    Dladrc {
        inner: EsoGains,
        ladder: Vec<EsoGains>,
        gains: ControllerGains,
    },
    Sadrc {
        eso: EsoGains,
        gains: ControllerGains,
    },
    Pid {
        gains: PidGains,
        state: PidState,
        u: f64,
    },
}

/// Inputs evaluated alongside the vector field.
/// Exogenous signals at one instant.
#[derive(Debug, Clone, Copy, Default)]
struct Inputs {
    r: f64,
    rho: f64,
    rho_dot: f64,
    d: f64,
    d_dot: f64,
}

#[derive(Debug, Clone, Copy)]
struct Signals {
    u: f64,
    rho_dot: f64,
    d_dot: f64,
    y_meas: f64,
}

/// Per-row diagnostics; `x_tilde`/`z_tilde_p` are NaN when not applicable.
struct Diagnostics {
    x_tilde: [f64; MAX_ORDER + 1],
    z_tilde_p: [f64; MAX_ORDER + 1],
    eps: [f64; MAX_ORDER],
    f_dot: f64,
}

struct ClosedLoop {
    n: usize,
    sys: StateSpaceSystem,
    plant: FactoredPlant,
    b_hat: f64,
    law: Law,
    disturbance: DisturbanceProfile,
    r_k: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ClosedLoop {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let n = cfg.n;
        let plant = FactoredPlant::new(&cfg.true_coefficients()?)?;
        let law = match cfg.controller {
            ControllerKind::Dladrc => {
                let cascade = cfg.cascade()?.ok_or_else(|| Error::Config("missing cascade".into()))?;
                Law::Dladrc {
                    inner: eso_gain(n, cfg.omega_in)?,
                    ladder: gain_ladder(n, &cascade)?,
                    gains: controller_gains(n, cfg.omega_c)?,
                }
            }
            ControllerKind::Sadrc => Law::Sadrc {
                eso: eso_gain(n, cfg.omega_o1)?,
                gains: controller_gains(n, cfg.omega_c)?,
            },
            ControllerKind::Pid => Law::Pid {
                gains: cfg.pid_gains().with_setpoint_clamp(cfg.reference.final_value()),
                state: PidState::default(),
                u: 0.0,
            },
        };
        Ok(Self {
            n,
            sys: build_system_matrices(n)?,
            plant,
            b_hat: cfg.b_hat()?,
            law,
            disturbance: cfg.disturbance.clone(),
            r_k: cfg.reference.initial,
        })
    }

    fn state_dim(&self) -> usize {
        let dim = self.n + 1;
        PLANT_DIM
            + match &self.law {
                Law::Dladrc { ladder, .. } => dim * (1 + ladder.len()),
                Law::Sadrc { .. } => dim,
                Law::Pid { .. } => 0,
            }
    }

    /// Equilibrium at `y0` with every observer converged.
    fn rest_state(&mut self, y0: f64) -> Vec<f64> {
        let mut x = vec![0.0; self.state_dim()];
        let (d0, _) = self.disturbance.eval(0.0);
        // ẇ = 0 and ÿ = 0 give w = q·y and g(u + d) = −λ·w.
        let w = self.plant.q * y0;
        let u_ss = -self.plant.lambda * w / self.plant.gain - d0;
        x[..PLANT_DIM].copy_from_slice(&[y0, 0.0, w]);
        let n = self.n;
        match &mut self.law {
            Law::Dladrc { .. } | Law::Sadrc { .. } => {
                x[PLANT_DIM] = y0;
                x[PLANT_DIM + n] = -self.b_hat * u_ss;
            }
            Law::Pid { gains, state, u } => {
                *state = PidState::holding(gains, u_ss);
                *u = u_ss;
            }
        }
        x
    }

    /// Vector field without the `λ·w` driver pole, which [`Self::affine_model`]
    /// adds back. `x` excludes the noise state.
    fn eval(&self, x: &[f64], inp: &Inputs, out: &mut [f64]) -> Signals {
        let n = self.n;
        let dim = n + 1;
        let y = x[0];
        let y_meas = y + inp.rho;
        let r = inp.r;
        let (xs, obs) = x.split_at(PLANT_DIM);
        let (dxs, dobs) = out.split_at_mut(PLANT_DIM);
        let u = match &self.law {
            Law::Dladrc { inner, ladder, gains, .. } => {
                let (x_hat, xi) = obs.split_at(dim);
                let mut zp = [0.0; MAX_ORDER + 1];
                combine_cascade(dim, xi, &mut zp[..dim]);
                let y_out = r - y_meas;
                let u_out = gains.kappa1_wn * y_out + dot(&gains.k_out, &zp[..dim]);
                let u = (u_out - x_hat[n]) / self.b_hat;
                let (dx_hat, dxi) = dobs.split_at_mut(dim);
                crate::observers::inner_eso_derivative(&self.sys, inner, x_hat, y, u, self.b_hat, dx_hat);
                crate::observers::cascade_eso_derivative(&self.sys, ladder, xi, y_out, u_out, dxi);
                u
            }
            Law::Sadrc { eso, gains } => {
                let u = (gains.kappa1_wn * (r - obs[0]) - dot(&gains.k_out, obs) - obs[n]) / self.b_hat;
                crate::observers::inner_eso_derivative(&self.sys, eso, obs, y_meas, u, self.b_hat, dobs);
                u
            }
            Law::Pid { u, .. } => *u,
        };
        dxs[0] = xs[1];
        dxs[1] = xs[2] - self.plant.p * xs[1] - self.plant.q * xs[0];
        dxs[2] = self.plant.gain * (u + inp.d);
        Signals { u, rho_dot: inp.rho_dot, d_dot: inp.d_dot, y_meas }
    }

    /// Every law makes the loop affine in its state. With the noise appended
    /// as one more state obeying `ρ̇ = ω_f(w_k − ρ)`, returns `A` and the
    /// disturbance column `b_d` of `ẋ = A·x + c_k + b_d·d(t)`.
    ///
    /// Columns come from differences of [`Self::eval`], so this must run while
    /// a PID law still holds `u = 0`.
    fn affine_model(&self, omega_f: f64) -> (DMatrix<f64>, DVector<f64>) {
        let sdim = self.state_dim();
        let none = Inputs::default();
        let zero = vec![0.0; sdim];
        let mut base = vec![0.0; sdim];
        self.eval(&zero, &none, &mut base);
        let column = |x: &[f64], inp: &Inputs| {
            let mut out = vec![0.0; sdim];
            self.eval(x, inp, &mut out);
            out.iter().zip(&base).map(|(a, b)| a - b).collect::<Vec<f64>>()
        };
        let mut a = DMatrix::zeros(sdim + 1, sdim + 1);
        let mut unit = zero.clone();
        for j in 0..sdim {
            unit[j] = 1.0;
            a.view_mut((0, j), (sdim, 1)).copy_from_slice(&column(&unit, &none));
            unit[j] = 0.0;
        }
        let rho_col = column(&zero, &Inputs { rho: 1.0, ..none });
        a.view_mut((0, sdim), (sdim, 1)).copy_from_slice(&rho_col);
        a[(2, 2)] += self.plant.lambda;
        a[(sdim, sdim)] = -omega_f;
        let mut b = column(&zero, &Inputs { d: 1.0, ..none });
        b.push(0.0);
        (a, DVector::from_vec(b))
    }

    /// Constant part `c_k` of the affine field over one step.
    fn step_input(&self, r: f64, noise: &HeldNoise, zero: &[f64], c: &mut [f64]) {
        let sdim = zero.len();
        self.eval(zero, &Inputs { r, ..Inputs::default() }, &mut c[..sdim]);
        let (omega_f, w_k) = noise.relaxation();
        c[sdim] = omega_f * w_k;
    }

    /// Error signals at a grid point, given `nl = eval(t, x)`.
    fn diagnostics(&self, x: &[f64], nl: &[f64], sig: &Signals) -> Diagnostics {
        let n = self.n;
        let dim = n + 1;
        let pl = &self.plant;
        let y = x[0];
        let yd = x[1];
        let w_dot = pl.lambda * x[2] + nl[2];
        let ydd = nl[1];
        let y3 = w_dot - pl.p * ydd - pl.q * yd;
        let f_true = y3 - self.b_hat * sig.u;
        let mut diag = Diagnostics {
            x_tilde: [f64::NAN; MAX_ORDER + 1],
            z_tilde_p: [f64::NAN; MAX_ORDER + 1],
            eps: [0.0; MAX_ORDER],
            f_dot: 0.0,
        };
        let e = self.r_k - y;
        diag.eps[..3].copy_from_slice(&[e, -yd, -ydd]);
        let truth = [y, yd, ydd, f_true];
        let u_dot = match &self.law {
            Law::Dladrc { gains, .. } => {
                let (x_hat, xi) = x[PLANT_DIM..].split_at(dim);
                let (dx_hat, dxi) = nl[PLANT_DIM..].split_at(dim);
                let mut zp = [0.0; MAX_ORDER + 1];
                let mut dzp = [0.0; MAX_ORDER + 1];
                combine_cascade(dim, xi, &mut zp[..dim]);
                combine_cascade(dim, dxi, &mut dzp[..dim]);
                let z_true = [e, -yd, -ydd, 0.0];
                for j in 0..dim {
                    diag.x_tilde[j] = truth[j] - x_hat[j];
                    diag.z_tilde_p[j] = z_true[j] - zp[j];
                }
                let u_out_dot = gains.kappa1_wn * (-yd - sig.rho_dot) + dot(&gains.k_out, &dzp[..dim]);
                (u_out_dot - dx_hat[n]) / self.b_hat
            }
            Law::Sadrc { gains, .. } => {
                let x_hat = &x[PLANT_DIM..];
                let dx_hat = &nl[PLANT_DIM..];
                for j in 0..dim {
                    diag.x_tilde[j] = truth[j] - x_hat[j];
                }
                (-gains.kappa1_wn * dx_hat[0] - dot(&gains.k_out, dx_hat) - dx_hat[n]) / self.b_hat
            }
            Law::Pid { .. } => 0.0,
        };
        diag.f_dot = pl.lambda * w_dot + (pl.gain - self.b_hat) * u_dot + pl.gain * sig.d_dot
            - pl.p * y3
            - pl.q * ydd;
        diag
    }

    /// `‖z̃_i‖` for every cascade level.
    fn level_error_norms(&self, x: &[f64]) -> Vec<f64> {
        let Law::Dladrc { ladder, .. } = &self.law else {
            return Vec::new();
        };
        let dim = self.n + 1;
        let xi = &x[PLANT_DIM + dim..];
        let e = self.r_k - x[0];
        let ydd = x[2] - self.plant.p * x[1] - self.plant.q * x[0];
        let z_true = [e, -x[1], -ydd, 0.0];
        (0..ladder.len())
            .map(|i| {
                let mut zi = [0.0; MAX_ORDER + 1];
                level_estimate(dim, xi, i, &mut zi[..dim]);
                (0..dim).map(|j| (z_true[j] - zi[j]).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run one scenario to completion.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationTrace> {
    cfg.validate()?;
    let mut lp = ClosedLoop::new(cfg)?;
    let n = lp.n;
    let dim = n + 1;
    let dt = cfg.dt;
    let steps = cfg.steps();
    let mut noise = NoiseSource::new(&cfg.noise, dt, cfg.seed);
    let (a_mat, b_d) = lp.affine_model(noise.held().relaxation().0);
    let mut prop = AffinePropagator::new(&a_mat, &b_d, dt)?;
    // The propagator advances the deviation from the initial rest state;
    // absolute states reach ~1e9 and would otherwise drift by rounding.
    // Last slot carries the noise filter state.
    let mut x0 = lp.rest_state(cfg.reference.initial);
    let sdim = x0.len();
    x0.push(0.0);
    let a_x0 = &a_mat * DVector::from_column_slice(&x0);
    let mut x = x0.clone();
    let mut dx = vec![0.0; sdim + 1];
    let zero = vec![0.0; sdim];
    let mut c = vec![0.0; sdim + 1];
    let mut nl = vec![0.0; sdim];
    let mut trace = SimulationTrace::with_capacity(n, steps / cfg.record_every + 1);
    let mut meta = TraceMeta {
        controller: cfg.controller,
        n,
        omega_c: cfg.omega_c,
        omega_in: cfg.omega_in,
        cascade: cfg.cascade()?,
        dt,
        setpoint: cfg.reference.final_value(),
        time_scale: cfg.time_scale,
        rho_sup: 0.0,
        f_dot_sup: 0.0,
        inner_residual_sup: 0.0,
        x_tilde0_norm: 0.0,
        z_tilde0_norms: Vec::new(),
        eps0_norm: 0.0,
    };
    debug!("running {} ({}), {steps} steps", cfg.name, cfg.controller);

    for k in 0..=steps {
        let t = k as f64 * dt;
        noise.begin_step();
        let held = noise.held();
        let (rho, rho_dot) = held.eval(0.0);
        dx[sdim] = rho;
        for ((xi, x0i), di) in x.iter_mut().zip(&x0).zip(&dx) {
            *xi = x0i + di;
        }
        lp.r_k = cfg.reference.at(t);
        if let Law::Pid { gains, state, u } = &mut lp.law {
            let e_meas = lp.r_k - (x[0] + rho);
            let (u_next, s_next) = pid_control(*state, gains, e_meas, dt)?;
            *u = u_next;
            *state = s_next;
        }
        let (d, d_dot) = lp.disturbance.eval(t);
        let inp = Inputs { r: lp.r_k, rho, rho_dot, d, d_dot };
        let sig = lp.eval(&x[..sdim], &inp, &mut nl);
        let limit = INSTABILITY_FACTOR * lp.r_k.abs().max(1.0);
        if !x[0].is_finite() || !sig.u.is_finite() {
            return Err(Error::NonFinite { t, what: format!("y = {}, u = {}", x[0], sig.u) });
        }
        if x[0].abs() > limit {
            return Err(Error::Unstable { t, y: x[0], limit });
        }
        let diag = lp.diagnostics(&x[..sdim], &nl, &sig);
        if !matches!(lp.law, Law::Pid { .. }) {
            meta.f_dot_sup = meta.f_dot_sup.max(diag.f_dot.abs());
            meta.inner_residual_sup = meta.inner_residual_sup.max(diag.x_tilde[n].abs());
        }
        if k == 0 {
            meta.x_tilde0_norm = if matches!(lp.law, Law::Pid { .. }) { 0.0 } else { norm(&diag.x_tilde[..dim]) };
            meta.z_tilde0_norms = lp.level_error_norms(&x[..sdim]);
            meta.eps0_norm = norm(&diag.eps[..n]);
        }
        if k % cfg.record_every == 0 {
            trace.t.push(t);
            trace.r.push(lp.r_k);
            trace.y_plant.push(x[0]);
            trace.y_meas.push(sig.y_meas);
            trace.u_ctl.push(sig.u);
            trace.e.push(lp.r_k - x[0]);
            for j in 0..dim {
                trace.x_tilde[j].push(diag.x_tilde[j]);
                trace.z_tilde_p[j].push(diag.z_tilde_p[j]);
            }
            for j in 0..n {
                trace.eps[j].push(diag.eps[j]);
            }
        }
        if k == steps {
            break;
        }
        meta.rho_sup = meta.rho_sup.max(held.step_sup(dt));
        lp.step_input(lp.r_k, &held, &zero, &mut c);
        for (ci, ai) in c.iter_mut().zip(a_x0.iter()) {
            *ci += ai;
        }
        let d_mid = lp.disturbance.eval(t + 0.5 * dt).0;
        let d_end = lp.disturbance.eval(t + dt).0;
        prop.step(t, &mut dx, &c, [d, d_mid, d_end])?;
        noise.end_step();
    }
    trace.meta = Some(meta);
    Ok(trace)
}
