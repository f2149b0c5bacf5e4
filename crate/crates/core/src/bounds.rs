//! Lyapunov decay certificates and the explicit error envelopes built on them:
//! inner observation error, cascade observation error and control error.
//!
//! Every constant is computed from an actual solution `P` of
//! `Q⊤P + PQ = −Ω·I` for the bandwidth-normalised error matrices.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::observers::{binomial, gain_ladder, Bandwidth, CascadeConfig};
use crate::plantmodel::build_system_matrices;
use crate::sim::{rk4_step, ControllerKind, SimulationTrace};

/// Solution of the Lyapunov equation together with the decay constants.
#[derive(Debug, Clone, PartialEq)]
pub struct LyapunovCertificate {
    pub p_matrix: DMatrix<f64>,
    pub omega_cap: f64,
    pub m_p: f64,
    pub big_m_p: f64,
    /// `M(P)/m(P)`.
    pub c1: f64,
    /// `Ω/M(P)`, the decay rate of `V = η⊤Pη`.
    pub gamma: f64,
    /// `‖Q⊤P + PQ + ΩI‖_F / ‖ΩI‖_F`.
    pub residual: f64,
}

impl LyapunovCertificate {
    /// `2M(P)²·‖f‖∞ / (m(P)·Ω)`.
    pub fn c2(&self, f_sup: f64) -> f64 {
        2.0 * self.big_m_p * self.big_m_p * f_sup / (self.m_p * self.omega_cap)
    }

    /// Decay rate of `‖η‖` itself. `V` decays at `γ`, and `‖η‖ ~ √V`, so the
    /// norm is only guaranteed to decay at half that rate: for `Q = −1`,
    /// `Ω = 2` one gets `γ = 2` while `η(t) = e^{−t}η(0)`.
    pub fn norm_rate(&self) -> f64 {
        0.5 * self.gamma
    }

    /// `‖η(t)‖ ≤ c₁·e^{−γt/2}·‖η(0)‖ + c₂`.
    pub fn envelope(&self, t: f64, eta0_norm: f64, f_sup: f64) -> f64 {
        self.c1 * (-self.norm_rate() * t).exp() * eta0_norm + self.c2(f_sup)
    }
}

fn max_real_eigenvalue(q: &DMatrix<f64>) -> f64 {
    q.complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `Q⊤P + PQ = −Ω·I` through the vectorised Kronecker system.
pub fn solve_lyapunov(q: &DMatrix<f64>, omega_cap: f64) -> Result<LyapunovCertificate> {
    if !q.is_square() || q.nrows() == 0 {
        return Err(Error::invalid("q_matrix", "must be square and non-empty"));
    }
    if !(omega_cap > 0.0) {
        return Err(Error::invalid("omega_cap", format!("must be positive, got {omega_cap}")));
    }
    let max_re = max_real_eigenvalue(q);
    if !(max_re < 0.0) {
        return Err(Error::NotHurwitz(max_re));
    }
    let d = q.nrows();
    let eye = DMatrix::<f64>::identity(d, d);
    let qt = q.transpose();
    // vec(Q⊤P) = (I ⊗ Q⊤)·vec P, vec(PQ) = (Q⊤ ⊗ I)·vec P, column-major vec.
    let k = eye.kronecker(&qt) + qt.kronecker(&eye);
    let rhs = DVector::from_iterator(d * d, (-omega_cap * &eye).iter().copied());
    let lu = k.clone().lu();
    let mut x = lu.solve(&rhs).ok_or(Error::Singular)?;
    // One round of refinement keeps the residual near machine precision for D ≈ 7.
    let r = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let p = DMatrix::from_column_slice(d, d, x.as_slice());
    let p = 0.5 * (&p + p.transpose());
    let res = &qt * &p + &p * q + omega_cap * &eye;
    let residual = res.norm() / (omega_cap * eye.norm());
    let eig = SymmetricEigen::new(p.clone()).eigenvalues;
    let m_p = eig.min();
    let big_m_p = eig.max();
    if !(m_p > 0.0) {
        return Err(Error::NotPositiveDefinite(m_p));
    }
    Ok(LyapunovCertificate {
        p_matrix: p,
        omega_cap,
        m_p,
        big_m_p,
        c1: big_m_p / m_p,
        gamma: omega_cap / big_m_p,
        residual,
    })
}

/// Integrates `η̇ = Qη + f(t)` with fixed-step RK4 and returns the smallest
/// gap between the certificate envelope and `‖η(t)‖` over the grid.
pub fn envelope_margin<F>(
    cert: &LyapunovCertificate,
    q: &DMatrix<f64>,
    f_fn: F,
    eta0: &[f64],
    horizon: f64,
    dt: f64,
) -> Result<f64>
where
    F: Fn(f64) -> DVector<f64>,
{
    if !(dt > 0.0 && horizon > 0.0) {
        return Err(Error::invalid("dt", "step and horizon must be positive"));
    }
    let steps = (horizon / dt).ceil() as usize;
    // ‖f‖∞ over every point the integrator will sample.
    let f_sup = (0..=2 * steps)
        .map(|k| f_fn(0.5 * k as f64 * dt).norm())
        .fold(0.0, f64::max);
    let eta0_norm = DVector::from_column_slice(eta0).norm();
    let rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
        let v = q * DVector::from_column_slice(x) + f_fn(t);
        dx.copy_from_slice(v.as_slice());
    };
    let mut eta = eta0.to_vec();
    let mut margin = f64::INFINITY;
    for k in 0..=steps {
        let t = k as f64 * dt;
        let norm = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        margin = margin.min(cert.envelope(t, eta0_norm, f_sup) - norm);
        if k < steps {
            eta = rk4_step(&rhs, &eta, t, dt)?;
        }
    }
    Ok(margin)
}

/// Integer matrix characteristic polynomial `det(λI − A)` (Faddeev–LeVerrier),
/// highest power first.
pub fn char_poly_exact(a: &[Vec<i128>]) -> Vec<i128> {
    let n = a.len();
    let mut coeffs = vec![0i128; n + 1];
    coeffs[0] = 1;
    let mut m = vec![vec![0i128; n]; n];
    for k in 1..=n {
        // M_k = A·M_{k−1} + c_{k−1}·I
        let mut next = vec![vec![0i128; n]; n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = (0..n).map(|l| a[i][l] * m[l][j]).sum::<i128>();
            }
            next[i][i] += coeffs[k - 1];
        }
        m = next;
        let trace: i128 = (0..n).map(|i| (0..n).map(|l| a[i][l] * m[l][i]).sum::<i128>()).sum();
        coeffs[k] = -trace / k as i128;
    }
    coeffs
}

/// Normalised observer error matrix: `Γ_{i1} = −C(n+1, i)`, `Γ_{i,i+1} = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompanionGamma {
    pub n: usize,
    pub gamma_matrix: DMatrix<f64>,
}

impl CompanionGamma {
    pub fn new(n: usize) -> Result<Self> {
        let ints = Self::integer_entries(n)?;
        let d = n + 1;
        Ok(Self {
            n,
            gamma_matrix: DMatrix::from_fn(d, d, |i, j| ints[i][j] as f64),
        })
    }

    fn integer_entries(n: usize) -> Result<Vec<Vec<i128>>> {
        if n == 0 || n > crate::observers::MAX_ORDER {
            return Err(Error::invalid("n", "order must be in 1..=20"));
        }
        let d = n + 1;
        let mut g = vec![vec![0i128; d]; d];
        for i in 0..d {
            g[i][0] = -(binomial(n + 1, i + 1) as i128);
            if i + 1 < d {
                g[i][i + 1] += 1;
            }
        }
        Ok(g)
    }

    /// Characteristic polynomial coefficients, exact.
    pub fn char_poly(&self) -> Vec<i128> {
        char_poly_exact(&Self::integer_entries(self.n).expect("validated at construction"))
    }

    /// The coefficient vector `γ` (first column, negated).
    pub fn gamma_vec(&self) -> DVector<f64> {
        -self.gamma_matrix.column(0).into_owned()
    }
}

/// Normalised control error matrix: `Ξ_{i,i+1} = 1`, last row `−κ`.
pub fn xi_matrix(n: usize) -> Result<DMatrix<f64>> {
    let x = xi_integer(n)?;
    Ok(DMatrix::from_fn(n, n, |i, j| x[i][j] as f64))
}

fn xi_integer(n: usize) -> Result<Vec<Vec<i128>>> {
    if n == 0 || n > crate::observers::MAX_ORDER {
        return Err(Error::invalid("n", "order must be in 1..=20"));
    }
    let mut x = vec![vec![0i128; n]; n];
    for i in 0..n - 1 {
        x[i][i + 1] = 1;
    }
    for j in 0..n {
        x[n - 1][j] -= binomial(n, j) as i128;
    }
    Ok(x)
}

/// Exact characteristic polynomial of Ξ; equals `(s+1)ⁿ`.
pub fn xi_char_poly(n: usize) -> Result<Vec<i128>> {
    Ok(char_poly_exact(&xi_integer(n)?))
}

/// `L = diag(1, ω, …, ωⁿ)` and the relative residual of
/// `L⁻¹(A − l·c⊤)L − ω·Γ`.
pub fn scaling_transform(n: usize, omega: f64) -> Result<(DMatrix<f64>, f64)> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::invalid("omega", format!("must be positive, got {omega}")));
    }
    let sys = build_system_matrices(n)?;
    let gamma = CompanionGamma::new(n)?;
    let d = n + 1;
    let l = DVector::from_fn(d, |m, _| binomial(n + 1, m + 1) as f64 * omega.powi(m as i32 + 1));
    let scale = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| omega.powi(i as i32)));
    let scale_inv = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| omega.powi(-(i as i32))));
    let a_cl = &sys.a_matrix - &l * sys.c_vec.transpose();
    let target = omega * &gamma.gamma_matrix;
    let diff = &scale_inv * a_cl * &scale - &target;
    Ok((scale, diff.norm() / target.norm()))
}

/// `envelope(t) = transient_coeff·e^{−rate·t} + floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayEnvelope {
    /// 1-based component index.
    pub j: usize,
    pub transient_coeff: f64,
    pub rate: f64,
    pub floor: f64,
}

impl DecayEnvelope {
    pub fn value(&self, t: f64) -> f64 {
        self.transient_coeff * (-self.rate * t).exp() + self.floor
    }

    /// Largest value, attained at `t = 0`.
    pub fn sup(&self) -> f64 {
        self.transient_coeff + self.floor
    }

    /// Earliest time the envelope drops to `level`, if it ever does.
    pub fn time_to_reach(&self, level: f64) -> Option<f64> {
        if self.floor >= level {
            return None;
        }
        if self.sup() <= level {
            return Some(0.0);
        }
        Some((self.transient_coeff / (level - self.floor)).ln() / self.rate)
    }
}

/// Bandwidth-free constants of a normalised error matrix `G` (Γ or Ξ):
/// with `Q = ω·G` and `Ω = ω`, `‖η(t)‖ ≤ c3·e^{−c4·ω·t}‖η(0)‖ + c5·‖f‖∞/ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConstants {
    pub certificate: LyapunovCertificate,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl NormalizedConstants {
    pub fn from_matrix(g: &DMatrix<f64>) -> Result<Self> {
        let cert = solve_lyapunov(g, 1.0)?;
        Ok(Self {
            c3: cert.c1,
            c4: cert.norm_rate(),
            c5: cert.c2(1.0),
            certificate: cert,
        })
    }

    pub fn observer(n: usize) -> Result<Self> {
        Self::from_matrix(&CompanionGamma::new(n)?.gamma_matrix)
    }

    pub fn control(n: usize) -> Result<Self> {
        Self::from_matrix(&xi_matrix(n)?)
    }

    fn envelope(&self, j: usize, omega: f64, eta0_norm: f64, f_sup: f64) -> DecayEnvelope {
        let wj = omega.powi(j as i32 - 1);
        DecayEnvelope {
            j,
            transient_coeff: self.c3 * wj * eta0_norm,
            rate: self.c4 * omega,
            floor: self.c5 * wj / omega * f_sup,
        }
    }
}

fn check_component(j: usize, dim: usize) -> Result<()> {
    if j == 0 || j > dim {
        return Err(Error::invalid("j", format!("component index must be in 1..={dim}, got {j}")));
    }
    Ok(())
}

/// `|x̃ʲ(t)| ≤ c3·ω^{j−1}e^{−c4ωt}‖x̃(0)‖ + c5‖Ḟ‖∞ / ω^{n−j+2}`.
pub fn inner_bound_envelope(
    n: usize,
    omega_in: f64,
    x_tilde0_norm: f64,
    f_dot_sup: f64,
    j: usize,
) -> Result<DecayEnvelope> {
    check_component(j, n + 1)?;
    let w = Bandwidth::new(omega_in)?.get();
    let k = NormalizedConstants::observer(n)?;
    // Scaled forcing: L⁻¹·b·Ḟ = ω^{−n}·b·Ḟ.
    Ok(k.envelope(j, w, x_tilde0_norm, f_dot_sup * w.powi(-(n as i32))))
}

/// Sup norms of the exogenous signals entering the outer error dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OuterForcing {
    /// Measurement noise `‖ρ‖∞`.
    pub rho_sup: f64,
    /// `‖x̃_{n+1}‖∞`: the inner observer's disturbance residual, which reaches
    /// the error plant through the input channel.
    pub inner_residual_sup: f64,
}

/// Envelopes for every level and component of the cascade error, `[level][j−1]`.
///
/// Level i is driven by `h_k = z̃_k¹` of the levels below it; those are bounded
/// by the sup of the already-built first-component envelopes.
pub fn cascade_level_envelopes(
    n: usize,
    config: &CascadeConfig,
    z_tilde0_norms: &[f64],
    forcing: &OuterForcing,
) -> Result<Vec<Vec<DecayEnvelope>>> {
    if z_tilde0_norms.len() != config.p {
        return Err(Error::invalid("z_tilde0_norms", format!("expected {} entries", config.p)));
    }
    let ladder = gain_ladder(n, config)?;
    let k = NormalizedConstants::observer(n)?;
    let gamma = CompanionGamma::new(n)?.gamma_vec();
    let np1 = (n + 1) as i32;
    let w: Vec<f64> = ladder.iter().map(|g| g.omega.get()).collect();
    let mut levels: Vec<Vec<DecayEnvelope>> = Vec::with_capacity(config.p);
    let mut h_sup: Vec<f64> = Vec::with_capacity(config.p);
    for i in 0..config.p {
        let wi = w[i];
        let mut f_sup = w[0].powi(np1) * wi.powi(-(n as i32)) * forcing.rho_sup
            + wi.powi(1 - n as i32) * forcing.inner_residual_sup;
        if i == 0 {
            // L⁻¹·l₁·ρ = ω₁·γ·ρ
            f_sup = wi * gamma.norm() * forcing.rho_sup + wi.powi(1 - n as i32) * forcing.inner_residual_sup;
        } else {
            // (l_i − b·l_{i−1}^{n+1})·h_{i−1}, scaled.
            let mut v = wi * &gamma;
            v[n] -= w[i - 1].powi(np1) * wi.powi(-(n as i32));
            f_sup += v.norm() * h_sup[i - 1];
            for kk in 0..i.saturating_sub(1) {
                f_sup += (w[kk + 1].powi(np1) - w[kk].powi(np1)) * wi.powi(-(n as i32)) * h_sup[kk];
            }
        }
        let env: Vec<DecayEnvelope> = (1..=n + 1)
            .map(|j| k.envelope(j, wi, z_tilde0_norms[i], f_sup))
            .collect();
        h_sup.push(env[0].sup());
        levels.push(env);
    }
    Ok(levels)
}

/// Envelope of component `j` of the combined outer error `z̃_p`.
pub fn cascade_bound_envelope(
    n: usize,
    config: &CascadeConfig,
    z_tilde0_norms: &[f64],
    forcing: &OuterForcing,
    j: usize,
) -> Result<DecayEnvelope> {
    check_component(j, n + 1)?;
    let levels = cascade_level_envelopes(n, config, z_tilde0_norms, forcing)?;
    Ok(levels[config.p - 1][j - 1])
}

/// Envelope of the control error component `ε^q = e^{(q−1)}`.
#[allow(clippy::too_many_arguments)]
pub fn control_bound_envelope(
    n: usize,
    config: &CascadeConfig,
    omega_c: f64,
    eps0_norm: f64,
    z_tilde0_norms: &[f64],
    forcing: &OuterForcing,
    q: usize,
) -> Result<DecayEnvelope> {
    check_component(q, n)?;
    if !(omega_c >= 1.0) {
        return Err(Error::invalid("omega_c", "envelope scaling needs omega_c ≥ 1"));
    }
    let gains = crate::controller::controller_gains(n, omega_c)?;
    let zp = &cascade_level_envelopes(n, config, z_tilde0_norms, forcing)?[config.p - 1];
    let kz: f64 = gains.k_out.iter().zip(zp).map(|(k, e)| k.abs() * e.sup()).sum();
    let drive = kz + omega_c.powi(n as i32) * forcing.rho_sup + forcing.inner_residual_sup;
    let k = NormalizedConstants::control(n)?;
    Ok(k.envelope(q, omega_c, eps0_norm, omega_c.powi(1 - n as i32) * drive))
}

/// Worst-case comparison of one recorded signal against its envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeCheck {
    /// Trace column name.
    pub signal: String,
    /// `min_t (envelope(t) − |signal(t)|)`; negative means violated.
    pub worst_margin: f64,
    /// `max_t |signal(t)| / envelope(t)`.
    pub worst_ratio: f64,
    pub at_t: f64,
}

impl EnvelopeCheck {
    pub fn holds(&self) -> bool {
        self.worst_margin >= 0.0
    }
}

fn compare(signal: String, t: &[f64], v: &[f64], env: &DecayEnvelope) -> EnvelopeCheck {
    let mut check = EnvelopeCheck {
        signal,
        worst_margin: f64::INFINITY,
        worst_ratio: 0.0,
        at_t: 0.0,
    };
    for (&t, &x) in t.iter().zip(v) {
        let bound = env.value(t);
        let margin = bound - x.abs();
        if margin < check.worst_margin {
            check.worst_margin = margin;
            check.at_t = t;
        }
        check.worst_ratio = check.worst_ratio.max(x.abs() / bound);
    }
    check
}

/// Check every inner, cascade and control error column of a dual-loop trace
/// against its envelope. Other controllers yield no checks.
pub fn check_envelopes(trace: &SimulationTrace) -> Result<Vec<EnvelopeCheck>> {
    let meta = trace
        .meta
        .as_ref()
        .ok_or_else(|| Error::Config("trace carries no run metadata".into()))?;
    let Some(cascade) = meta.cascade.filter(|_| meta.controller == ControllerKind::Dladrc) else {
        return Ok(Vec::new());
    };
    let n = meta.n;
    let forcing = OuterForcing {
        rho_sup: meta.rho_sup,
        inner_residual_sup: meta.inner_residual_sup,
    };
    let mut out = Vec::with_capacity(3 * n + 2);
    for j in 1..=n + 1 {
        let env = inner_bound_envelope(n, meta.omega_in, meta.x_tilde0_norm, meta.f_dot_sup, j)?;
        out.push(compare(format!("xt{j}"), &trace.t, &trace.x_tilde[j - 1], &env));
    }
    let levels = cascade_level_envelopes(n, &cascade, &meta.z_tilde0_norms, &forcing)?;
    for j in 1..=n + 1 {
        let env = levels[cascade.p - 1][j - 1];
        out.push(compare(format!("zt{j}"), &trace.t, &trace.z_tilde_p[j - 1], &env));
    }
    for q in 1..=n {
        let env = control_bound_envelope(n, &cascade, meta.omega_c, meta.eps0_norm, &meta.z_tilde0_norms, &forcing, q)?;
        out.push(compare(format!("eps{q}"), &trace.t, &trace.eps[q - 1], &env));
    }
    Ok(out)
}
