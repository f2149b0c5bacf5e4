//! Fixed-step integrators.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn check_finite(t: f64, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite { t, what: format!("state component {i} is {}", x[i]) }),
    }
}

/// One classical Runge–Kutta step of `ẋ = f(t, x)`.
pub fn rk4_step<F>(f: &F, state: &[f64], t: f64, dt: f64) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
    }
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, state, &mut k1);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = state[i] + dt * k3[i];
    }
    f(t + dt, &tmp, &mut k4);
    let next: Vec<f64> = (0..n)
        .map(|i| state[i] + dt / 6.0 * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]))
        .collect();
    check_finite(t + dt, &next)?;
    Ok(next)
}

/// Radix-2 diagonal balancing: returns `B = D⁻¹MD` and `D`. Powers of two
/// keep the similarity exact in floating point.
fn balance(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows();
    let mut b = m.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut converged = false;
    while !converged {
        converged = true;
        for i in 0..n {
            let c: f64 = (0..n).filter(|&j| j != i).map(|j| b[(j, i)].abs()).sum();
            let r: f64 = (0..n).filter(|&j| j != i).map(|j| b[(i, j)].abs()).sum();
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let mut f = 1.0;
            let (mut cc, mut rr) = (c, r);
            while cc < rr / 2.0 {
                cc *= 2.0;
                rr /= 2.0;
                f *= 2.0;
            }
            while cc >= rr * 2.0 {
                cc /= 2.0;
                rr *= 2.0;
                f /= 2.0;
            }
            if (cc + rr) < 0.95 * (c + r) {
                converged = false;
                d[i] *= f;
                for j in 0..n {
                    b[(i, j)] /= f;
                    b[(j, i)] *= f;
                }
            }
        }
    }
    (b, d)
}

/// `e^{Z}, φ₁(Z), φ₂(Z), φ₃(Z)` from one exponential of the block matrix
/// `[[Z, I, 0, 0], [0, 0, I, 0], [0, 0, 0, I], [0, 0, 0, 0]]`.
pub fn phi_functions(z: &DMatrix<f64>) -> Result<[DMatrix<f64>; 4]> {
    if !z.is_square() {
        return Err(Error::invalid("matrix", "must be square"));
    }
    let d = z.nrows();
    let mut big = DMatrix::<f64>::zeros(4 * d, 4 * d);
    big.view_mut((0, 0), (d, d)).copy_from(z);
    for k in 0..3 {
        for i in 0..d {
            big[(k * d + i, (k + 1) * d + i)] = 1.0;
        }
    }
    let (bal, scale) = balance(&big);
    let mut ex = bal.exp();
    for i in 0..4 * d {
        for j in 0..4 * d {
            ex[(i, j)] *= scale[i] / scale[j];
        }
    }
    if ex.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: 0.0, what: "matrix exponential".into() });
    }
    Ok(std::array::from_fn(|k| ex.view((0, k * d), (d, d)).into_owned()))
}

/// Exact one-step map of the affine system `ẋ = A·x + c + b·s(t)` with `c`
/// constant over the step and a smooth scalar input `s` sampled at the start,
/// middle and end of the step.
///
/// The homogeneous part and the constant input are propagated exactly, so
/// the step size does not have to resolve the fastest mode of `A`. The scalar
/// input goes through a three-point exponential quadrature, exact for `s`
/// quadratic in time.
#[derive(Debug, Clone)]
pub struct AffinePropagator {
    dt: f64,
    e: DMatrix<f64>,
    /// `h·φ₁(hA)`.
    hphi1: DMatrix<f64>,
    /// Quadrature weights applied to `b`: start, middle, end.
    g: [DVector<f64>; 3],
    scratch: DVector<f64>,
}

impl AffinePropagator {
    pub fn new(a: &DMatrix<f64>, b: &DVector<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if b.len() != a.nrows() {
            return Err(Error::invalid("b", "length must match the system matrix"));
        }
        let [e, p1, p2, p3] = phi_functions(&(dt * a))?;
        let w0 = dt * (&p1 - 3.0 * &p2 + 4.0 * &p3);
        let wm = dt * (4.0 * &p2 - 8.0 * &p3);
        let w1 = dt * (-&p2 + 4.0 * &p3);
        Ok(Self {
            dt,
            e,
            hphi1: dt * p1,
            g: [w0 * b, wm * b, w1 * b],
            scratch: DVector::zeros(a.nrows()),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advance `x` in place given the constant input `c` and the scalar input
    /// at the start, middle and end of the step.
    pub fn step(&mut self, t: f64, x: &mut [f64], c: &[f64], s: [f64; 3]) -> Result<()> {
        let n = x.len();
        let xv = DVector::from_column_slice(x);
        let cv = DVector::from_column_slice(c);
        self.scratch.gemv(1.0, &self.e, &xv, 0.0);
        self.scratch.gemv(1.0, &self.hphi1, &cv, 1.0);
        for (g, sk) in self.g.iter().zip(s) {
            self.scratch.axpy(sk, g, 1.0);
        }
        x[..n].copy_from_slice(self.scratch.as_slice());
        check_finite(t + self.dt, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_field_leaves_state() {
        let f = |_: f64, _: &[f64], out: &mut [f64]| out.fill(0.0);
        let x = rk4_step(&f, &[1.0, -2.0, 3.5], 0.0, 0.1).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn exponential_single_step() {
        let f = |_: f64, x: &[f64], out: &mut [f64]| out[0] = -x[0];
        let x = rk4_step(&f, &[1.0], 0.0, 0.1).unwrap();
        // Local error of RK4 on ẋ = −x is h⁵/120.
        assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn fourth_order_convergence() {
        // Harmonic oscillator; halving dt cuts the global error by about 16.
        let f = |_: f64, x: &[f64], out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -4.0 * x[0] - 0.3 * x[1];
        };
        let err = |dt: f64| {
            let steps = (2.0 / dt).round() as usize;
            let mut x = vec![1.0, 0.0];
            for k in 0..steps {
                x = rk4_step(&f, &x, k as f64 * dt, dt).unwrap();
            }
            x
        };
        let fine = err(1e-4);
        let e1 = (err(0.02)[0] - fine[0]).abs();
        let e2 = (err(0.01)[0] - fine[0]).abs();
        let ratio = e1 / e2;
        assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let f = |_: f64, _: &[f64], out: &mut [f64]| out[0] = f64::NAN;
        assert!(matches!(rk4_step(&f, &[0.0], 0.0, 0.0), Err(Error::InvalidParameter { .. })));
        assert!(matches!(rk4_step(&f, &[0.0], 0.0, 0.1), Err(Error::NonFinite { .. })));
    }

    fn integrate_affine(a: &DMatrix<f64>, b: &DVector<f64>, c: &[f64], s: impl Fn(f64) -> f64, x0: &[f64], dt: f64, t_end: f64) -> Vec<f64> {
        let mut p = AffinePropagator::new(a, b, dt).unwrap();
        let mut x = x0.to_vec();
        let steps = (t_end / dt).round() as usize;
        for k in 0..steps {
            let t = k as f64 * dt;
            p.step(t, &mut x, c, [s(t), s(t + 0.5 * dt), s(t + dt)]).unwrap();
        }
        x
    }

    #[test]
    fn phi_functions_of_scalar() {
        for z in [-157.0, -1.0, -1e-3, 0.0, 0.5] {
            let [e, p1, p2, p3] = phi_functions(&DMatrix::from_element(1, 1, z)).unwrap();
            let (ez, p1z) = (f64::exp(z), if z == 0.0 { 1.0 } else { (f64::exp(z) - 1.0) / z });
            assert_relative_eq!(e[(0, 0)], ez, max_relative = 1e-13);
            assert_relative_eq!(p1[(0, 0)], p1z, max_relative = 1e-12);
            if z.abs() > 0.5 {
                let p2z = (p1z - 1.0) / z;
                assert_relative_eq!(p2[(0, 0)], p2z, max_relative = 1e-11);
                assert_relative_eq!(p3[(0, 0)], (p2z - 0.5) / z, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn affine_homogeneous_is_exact_at_any_step() {
        // Stiff and slow modes together: the result must not depend on dt.
        let a = DMatrix::from_row_slice(2, 2, &[-3e6, 3e6, 0.0, -0.5]);
        let b = DVector::zeros(2);
        let exact = |t: f64| {
            let y = (-0.5 * t).exp();
            // w' = −3e6·w + 3e6·y with w(0) = 0
            let k = 3e6 / (3e6 - 0.5);
            [k * (y - (-3e6 * t).exp()), y]
        };
        for dt in [1e-3, 1e-2, 0.1] {
            let x = integrate_affine(&a, &b, &[0.0, 0.0], |_| 0.0, &[0.0, 1.0], dt, 2.0);
            let want = exact(2.0);
            assert_relative_eq!(x[0], want[0], max_relative = 1e-9);
            assert_relative_eq!(x[1], want[1], max_relative = 1e-9);
        }
    }

    #[test]
    fn affine_constant_input_is_exact() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.4]);
        let b = DVector::zeros(2);
        let coarse = integrate_affine(&a, &b, &[0.0, 2.0], |_| 0.0, &[1.0, 0.0], 0.25, 10.0);
        let fine = integrate_affine(&a, &b, &[0.0, 2.0], |_| 0.0, &[1.0, 0.0], 1e-3, 10.0);
        assert_relative_eq!(coarse[0], fine[0], max_relative = 1e-10);
        assert_relative_eq!(coarse[1], fine[1], max_relative = 1e-10);
    }

    #[test]
    fn affine_quadratic_input_is_exact() {
        // ẋ = −x + t², x(0) = 2: x = t² − 2t + 2.
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DVector::from_element(1, 1.0);
        let x = integrate_affine(&a, &b, &[0.0], |t| t * t, &[2.0], 0.5, 3.0);
        assert_relative_eq!(x[0], 9.0 - 6.0 + 2.0, max_relative = 1e-12);
    }

    #[test]
    fn affine_smooth_input_converges() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -9.0, -0.3]);
        let b = DVector::from_column_slice(&[0.0, 1.0]);
        let run = |dt: f64| integrate_affine(&a, &b, &[0.0, 0.0], |t| (2.0 * t).sin(), &[1.0, 0.0], dt, 4.0)[0];
        let fine = run(1e-4);
        let e1 = (run(0.04) - fine).abs();
        let e2 = (run(0.02) - fine).abs();
        assert!(e1 / e2 > 7.0, "ratio {}", e1 / e2);
    }
}
