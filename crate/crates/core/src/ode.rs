//! Adaptive Runge-Kutta integrators.
//!
//! Two methods cover the crate's needs:
//!
//! * [`Dopri5`] — the explicit Dormand-Prince 5(4) pair, used by the bed
//!   simulator at moderate tolerance (1e-8). The thermocline equations are
//!   non-stiff at the operating time scales, so an explicit method wins.
//! * [`Sdirk4`] — a singly diagonally implicit 4(3) pair (γ = 1/4, L-stable,
//!   stiffly accurate) specialized to affine systems ẋ = M·x + c. Identified
//!   surrogate models can carry fast eigenvalues that make explicit methods
//!   hopeless at the 1e-12 rollout tolerance; for an affine right-hand side
//!   each implicit stage is a linear solve, and the iteration matrix
//!   (I − hγM) is refactorized only when the step size changes.
//!
//! Both pairs' order conditions were checked in exact rational arithmetic
//! before the coefficients were frozen here.

use nalgebra::{DMatrix, DVector};

use crate::error::{CoreError, Result};

/// Hard floor on the step size, relative to the integration span.
const MIN_STEP_FRACTION: f64 = 1e-14;
/// Step-size safety factor and growth clamps shared by both methods.
const SAFETY: f64 = 0.9;
const MIN_SHRINK: f64 = 0.2;
const MAX_GROW: f64 = 5.0;

/// Dormand-Prince 5(4) coefficients.
mod dopri {
    pub const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
    pub const A: [[f64; 6]; 7] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
            0.0,
            0.0,
        ],
        [
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
            0.0,
        ],
        [
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    /// Fifth-order weights (identical to the last A row; FSAL pair).
    pub const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    /// Fourth-order embedded weights.
    pub const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
}

/// Explicit adaptive Dormand-Prince 5(4) integrator.
///
/// The struct owns its stage workspace so repeated grid-interval calls do not
/// reallocate, and it carries the last accepted step size across calls.
pub struct Dopri5 {
    rtol: f64,
    atol: f64,
    h_last: Option<f64>,
    k: Vec<Vec<f64>>,
    y_stage: Vec<f64>,
    y_new: Vec<f64>,
}

impl Dopri5 {
    pub fn new(rtol: f64, atol: f64) -> Self {
        Dopri5 {
            rtol,
            atol,
            h_last: None,
            k: vec![Vec::new(); 7],
            y_stage: Vec::new(),
            y_new: Vec::new(),
        }
    }

    /// Advances `y` in place from `t0` to `t1` with adaptive sub-steps.
    ///
    /// `f(t, y, dydt)` fills the derivative; any error it returns aborts the
    /// integration. Step-size underflow reports the time actually reached.
    pub fn integrate<F>(&mut self, f: &mut F, t0: f64, y: &mut [f64], t1: f64) -> Result<()>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
    {
        let n = y.len();
        let span = t1 - t0;
        if span <= 0.0 {
            return Err(CoreError::Parameter {
                name: "t1",
                reason: format!("integration span must be positive, got {span}"),
            });
        }
        for k in &mut self.k {
            k.resize(n, 0.0);
        }
        self.y_stage.resize(n, 0.0);
        self.y_new.resize(n, 0.0);

        let h_min = MIN_STEP_FRACTION * span.max(t0.abs()).max(t1.abs()).max(1.0);
        let mut h = self.h_last.unwrap_or(span / 16.0).min(span).max(h_min);
        let mut t = t0;

        while t < t1 {
            h = h.min(t1 - t);
            f(t, y, &mut self.k[0])?;
            let mut step_err = None;
            for stage in 1..7 {
                for i in 0..n {
                    let mut acc = 0.0;
                    for (j, kj) in self.k.iter().enumerate().take(stage) {
                        acc += dopri::A[stage][j] * kj[i];
                    }
                    self.y_stage[i] = y[i] + h * acc;
                }
                if let Err(e) = f(t + dopri::C[stage] * h, &self.y_stage, &mut self.k[stage]) {
                    step_err = Some(e);
                    break;
                }
            }

            let err_norm = if step_err.is_some() {
                f64::INFINITY
            } else {
                let mut sum = 0.0;
                let mut finite = true;
                for i in 0..n {
                    let mut y5 = 0.0;
                    let mut diff = 0.0;
                    for s in 0..7 {
                        y5 += dopri::B5[s] * self.k[s][i];
                        diff += (dopri::B5[s] - dopri::B4[s]) * self.k[s][i];
                    }
                    let y5 = y[i] + h * y5;
                    if !y5.is_finite() {
                        finite = false;
                        break;
                    }
                    self.y_new[i] = y5;
                    let scale = self.atol + self.rtol * y[i].abs().max(y5.abs());
                    let e = h * diff / scale;
                    sum += e * e;
                }
                if finite {
                    (sum / n as f64).sqrt()
                } else {
                    f64::INFINITY
                }
            };

            if err_norm <= 1.0 {
                t += h;
                y.copy_from_slice(&self.y_new);
                let grow = if err_norm == 0.0 {
                    MAX_GROW
                } else {
                    (SAFETY * err_norm.powf(-0.2)).clamp(MIN_SHRINK, MAX_GROW)
                };
                h *= grow;
                self.h_last = Some(h);
            } else {
                let shrink = if err_norm.is_finite() {
                    (SAFETY * err_norm.powf(-0.2)).clamp(MIN_SHRINK, 1.0)
                } else {
                    MIN_SHRINK
                };
                h *= shrink;
                if h < h_min {
                    if let Some(e) = step_err {
                        return Err(e);
                    }
                    return Err(CoreError::Integration {
                        time: t,
                        reason: format!("step size underflow ({h:.3e} < {h_min:.3e})"),
                    });
                }
            }
        }
        Ok(())
    }
}

/// SDIRK 4(3) coefficients (γ = 1/4; Hairer-Wanner five-stage method).
mod sdirk {
    pub const GAMMA: f64 = 0.25;
    /// Strictly lower-triangular part; the diagonal is GAMMA everywhere.
    pub const A: [[f64; 4]; 5] = [
        [0.0, 0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0, 0.0],
        [17.0 / 50.0, -1.0 / 25.0, 0.0, 0.0],
        [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.0],
        [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0],
    ];
    /// Fourth-order weights (stiffly accurate: equal to the last stage row).
    pub const B: [f64; 5] = [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25];
    /// Third-order embedded weights.
    pub const BHAT: [f64; 5] = [59.0 / 48.0, -17.0 / 96.0, 225.0 / 32.0, -85.0 / 12.0, 0.0];
}

/// Implicit adaptive SDIRK 4(3) integrator for affine systems ẋ = M·x + c.
///
/// Bound to a fixed coupling matrix `M`; the constant term `c` is supplied
/// per integration call, which matches zero-order-hold rollouts where only
/// the input changes between grid intervals. The iteration matrix
/// factorization is cached across calls keyed on the step size.
pub struct Sdirk4 {
    m: DMatrix<f64>,
    rtol: f64,
    atol: f64,
    h_last: Option<f64>,
    factored: Option<(f64, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>,
}

impl Sdirk4 {
    pub fn new(m: DMatrix<f64>, rtol: f64, atol: f64) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(CoreError::Shape {
                context: "sdirk coupling matrix",
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        Ok(Sdirk4 {
            m,
            rtol,
            atol,
            h_last: None,
            factored: None,
        })
    }

    fn iteration_matrix(&mut self, h: f64, t: f64) -> Result<()> {
        if let Some((cached_h, _)) = &self.factored {
            if *cached_h == h {
                return Ok(());
            }
        }
        let n = self.m.nrows();
        let mut mat = -(&self.m) * (h * sdirk::GAMMA);
        for i in 0..n {
            mat[(i, i)] += 1.0;
        }
        let lu = mat.lu();
        if lu.determinant().abs() == 0.0 {
            return Err(CoreError::Integration {
                time: t,
                reason: format!("singular iteration matrix at step size {h:.3e}"),
            });
        }
        self.factored = Some((h, lu));
        Ok(())
    }

    /// Advances `x` in place from `t0` to `t1` under ẋ = M·x + c.
    pub fn integrate(&mut self, c: &DVector<f64>, t0: f64, x: &mut DVector<f64>, t1: f64) -> Result<()> {
        let n = self.m.nrows();
        if x.len() != n || c.len() != n {
            return Err(CoreError::Shape {
                context: "sdirk state/constant dimension",
                expected: n,
                actual: x.len().max(c.len()),
            });
        }
        let span = t1 - t0;
        if span <= 0.0 {
            return Err(CoreError::Parameter {
                name: "t1",
                reason: format!("integration span must be positive, got {span}"),
            });
        }
        let h_min = MIN_STEP_FRACTION * span.max(t0.abs()).max(t1.abs()).max(1.0);
        let mut h = self.h_last.unwrap_or(span / 8.0).min(span).max(h_min);
        let mut t = t0;
        let mut stages: Vec<DVector<f64>> = vec![DVector::zeros(n); 5];

        while t < t1 {
            h = h.min(t1 - t);
            self.iteration_matrix(h, t)?;
            let (_, lu) = self.factored.as_ref().expect("factorization just ensured");

            for s in 0..5 {
                let mut arg = x.clone();
                for (j, stage) in stages.iter().enumerate().take(s) {
                    arg.axpy(h * sdirk::A[s][j], stage, 1.0);
                }
                let rhs = &self.m * arg + c;
                stages[s] = lu.solve(&rhs).ok_or(CoreError::Integration {
                    time: t,
                    reason: "stage solve failed".to_string(),
                })?;
            }

            let mut x_new = x.clone();
            let mut err_vec = DVector::zeros(n);
            for s in 0..5 {
                x_new.axpy(h * sdirk::B[s], &stages[s], 1.0);
                err_vec.axpy(h * (sdirk::B[s] - sdirk::BHAT[s]), &stages[s], 1.0);
            }

            let mut sum = 0.0;
            let mut finite = true;
            for i in 0..n {
                if !x_new[i].is_finite() {
                    finite = false;
                    break;
                }
                let scale = self.atol + self.rtol * x[i].abs().max(x_new[i].abs());
                let e = err_vec[i] / scale;
                sum += e * e;
            }
            let err_norm = if finite {
                (sum / n as f64).sqrt()
            } else {
                f64::INFINITY
            };

            if err_norm <= 1.0 {
                t += h;
                *x = x_new;
                let grow = if err_norm == 0.0 {
                    MAX_GROW
                } else {
                    (SAFETY * err_norm.powf(-0.25)).clamp(MIN_SHRINK, MAX_GROW)
                };
                h *= grow;
                self.h_last = Some(h);
            } else {
                let shrink = if err_norm.is_finite() {
                    (SAFETY * err_norm.powf(-0.25)).clamp(MIN_SHRINK, 1.0)
                } else {
                    MIN_SHRINK
                };
                h *= shrink;
                if h < h_min {
                    return Err(CoreError::Integration {
                        time: t,
                        reason: format!("step size underflow ({h:.3e} < {h_min:.3e})"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed-step DOPRI5 sweep used only to measure convergence order.
    fn dopri_fixed_step(y0: f64, t_end: f64, steps: usize) -> f64 {
        // y' = y cos(t), solution y0 exp(sin t).
        let h = t_end / steps as f64;
        let mut y = vec![y0];
        let mut t = 0.0;
        let f = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[0] * t.cos();
            Ok(())
        };
        let mut k = vec![vec![0.0]; 7];
        for _ in 0..steps {
            f(t, &y, &mut k[0]).unwrap();
            for s in 1..7 {
                let mut acc = 0.0;
                for j in 0..s {
                    acc += dopri::A[s][j] * k[j][0];
                }
                let ys = [y[0] + h * acc];
                f(t + dopri::C[s] * h, &ys, &mut k[s]).unwrap();
            }
            let mut dy = 0.0;
            for s in 0..7 {
                dy += dopri::B5[s] * k[s][0];
            }
            y[0] += h * dy;
            t += h;
        }
        y[0]
    }

    #[test]
    fn dopri_fixed_step_error_scales_at_fifth_order() {
        let exact = 2.0 * (f64::sin(2.0)).exp();
        let e_coarse = (dopri_fixed_step(2.0, 2.0, 8) - exact).abs();
        let e_fine = (dopri_fixed_step(2.0, 2.0, 16) - exact).abs();
        let ratio = e_coarse / e_fine;
        assert!(
            (16.0..80.0).contains(&ratio),
            "expected ~32x error reduction, got {ratio} ({e_coarse} vs {e_fine})"
        );
    }

    #[test]
    fn dopri_adaptive_meets_tolerance() {
        let mut solver = Dopri5::new(1e-10, 1e-10);
        let mut y = vec![1.0, 0.0];
        // Harmonic oscillator, exact solution (cos t, -sin t).
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[1];
            dy[1] = -y[0];
            Ok(())
        };
        solver.integrate(&mut f, 0.0, &mut y, 10.0).unwrap();
        assert!((y[0] - f64::cos(10.0)).abs() < 1e-7);
        assert!((y[1] + f64::sin(10.0)).abs() < 1e-7);
    }

    #[test]
    fn dopri_reports_underflow_on_finite_time_blowup() {
        let mut solver = Dopri5::new(1e-8, 1e-8);
        let mut y = vec![1.0];
        // y' = y^2 escapes to infinity at t = 1.
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[0] * y[0];
            Ok(())
        };
        let err = solver.integrate(&mut f, 0.0, &mut y, 2.0).unwrap_err();
        match err {
            CoreError::Integration { time, .. } => {
                assert!((0.9..1.05).contains(&time), "blowup reported at t = {time}");
            }
            other => panic!("expected integration error, got {other:?}"),
        }
    }

    #[test]
    fn dopri_propagates_rhs_errors() {
        let mut solver = Dopri5::new(1e-8, 1e-8);
        let mut y = vec![1.0];
        let mut f = |t: f64, _y: &[f64], _dy: &mut [f64]| -> Result<()> {
            if t > 0.5 {
                Err(CoreError::NonFiniteState { node: 3, time: t })
            } else {
                Ok(())
            }
        };
        assert!(matches!(
            solver.integrate(&mut f, 0.0, &mut y, 1.0),
            Err(CoreError::NonFiniteState { node: 3, .. })
        ));
    }

    #[test]
    fn sdirk_solves_stiff_affine_system_to_tight_tolerance() {
        // Decoupled equations: x' = a x + c, exact (x0 + c/a) e^{at} - c/a.
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -1000.0]));
        let c = DVector::from_vec(vec![1.0, 2.0]);
        let mut solver = Sdirk4::new(m, 1e-12, 1e-12).unwrap();
        let mut x = DVector::from_vec(vec![3.0, 5.0]);
        solver.integrate(&c, 0.0, &mut x, 2.0).unwrap();
        let exact0 = (3.0 + 1.0 / -1.0) * f64::exp(-2.0) - 1.0 / -1.0;
        let exact1 = (5.0 + 2.0 / -1000.0) * f64::exp(-2000.0) - 2.0 / -1000.0;
        assert!((x[0] - exact0).abs() < 1e-9, "slow mode error {}", x[0] - exact0);
        assert!((x[1] - exact1).abs() < 1e-9, "fast mode error {}", x[1] - exact1);
    }

    #[test]
    fn sdirk_fixed_step_error_scales_at_fourth_order() {
        let run = |steps: usize| -> f64 {
            let m = DMatrix::from_element(1, 1, -2.0);
            let c = DVector::from_element(1, 1.0);
            let mut x = DVector::from_element(1, 1.0);
            let lu_m = m.clone();
            let h = 1.0 / steps as f64;
            let mut iter = DMatrix::identity(1, 1);
            iter[(0, 0)] = 1.0 - h * sdirk::GAMMA * lu_m[(0, 0)];
            let lu = iter.lu();
            for _ in 0..steps {
                let mut stages = [0.0; 5];
                for s in 0..5 {
                    let mut arg = x[0];
                    for j in 0..s {
                        arg += h * sdirk::A[s][j] * stages[j];
                    }
                    let rhs = DVector::from_element(1, lu_m[(0, 0)] * arg + c[0]);
                    stages[s] = lu.solve(&rhs).unwrap()[0];
                }
                for s in 0..5 {
                    x[0] += h * sdirk::B[s] * stages[s];
                }
            }
            x[0]
        };
        let exact = (1.0 - 0.5) * f64::exp(-2.0) + 0.5;
        let e_coarse = (run(4) - exact).abs();
        let e_fine = (run(8) - exact).abs();
        let ratio = e_coarse / e_fine;
        assert!(
            (8.0..40.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn sdirk_matches_dopri_on_nonstiff_affine_system() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -4.0, -0.3]);
        let c = DVector::from_vec(vec![0.0, 1.5]);
        let mut implicit = Sdirk4::new(m.clone(), 1e-12, 1e-12).unwrap();
        let mut x = DVector::from_vec(vec![1.0, 0.0]);
        implicit.integrate(&c, 0.0, &mut x, 3.0).unwrap();

        let mut explicit = Dopri5::new(1e-12, 1e-12);
        let mut y = vec![1.0, 0.0];
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            dy[0] = y[1];
            dy[1] = -4.0 * y[0] - 0.3 * y[1] + 1.5;
            Ok(())
        };
        explicit.integrate(&mut f, 0.0, &mut y, 3.0).unwrap();
        assert!((x[0] - y[0]).abs() < 1e-8);
        assert!((x[1] - y[1]).abs() < 1e-8);
    }
}
