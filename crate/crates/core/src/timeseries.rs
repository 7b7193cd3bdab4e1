//! Resampling, smoothing, and error metrics on sampled channels.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::types::Trajectory;

/// Relative slack allowed when comparing grid spans, to absorb roundoff in
/// grids constructed from a span rather than an explicit dt.
const SPAN_SLACK: f64 = 1e-9;

/// Linear interpolation of uniformly sampled `values` at time `t`.
///
/// `t` must lie within the grid span (callers check; out-of-range values are
/// clamped to the end segments). Knot instants reproduce knot values exactly.
pub fn interp_linear_uniform(grid: &TimeGrid, values: &[f64], t: f64) -> f64 {
    debug_assert_eq!(values.len(), grid.n_steps());
    let raw = (t - grid.t0()) / grid.dt();
    let seg = (raw.floor() as isize).clamp(0, grid.n_steps() as isize - 2) as usize;
    let theta = ((t - grid.time(seg)) / grid.dt()).clamp(0.0, 1.0);
    (1.0 - theta) * values[seg] + theta * values[seg + 1]
}

/// Interpolates every channel of `traj` onto `target`.
///
/// The target span must lie within the source span. Endpoints that coincide
/// with source knots are preserved exactly.
pub fn resample_trajectory(traj: &Trajectory, target: TimeGrid) -> Result<Trajectory> {
    let source = traj.grid;
    let slack = SPAN_SLACK * source.span().max(1.0);
    if target.t0() < source.t0() - slack || target.t_end() > source.t_end() + slack {
        return Err(CoreError::SpanMismatch {
            source_start: source.t0(),
            source_end: source.t_end(),
            target_start: target.t0(),
            target_end: target.t_end(),
        });
    }
    let times = target.times();
    let columns: Vec<Vec<f64>> = traj
        .columns()
        .iter()
        .map(|col| {
            times
                .iter()
                .map(|&t| interp_linear_uniform(&source, col, t))
                .collect()
        })
        .collect();
    Trajectory::from_columns(traj.id, traj.provenance, target, &columns)
}

/// Polynomial-fit weights for a Savitzky-Golay window.
///
/// Returns the matrix `B = (VᵀV)⁻¹Vᵀ` of the least-squares fit on offsets
/// `-half..=half`, so that the fitted polynomial's coefficient vector for a
/// window of samples `y` is `B y` (coefficients in increasing power order).
fn savgol_fit_matrix(window: usize, poly_order: usize) -> DMatrix<f64> {
    let half = (window / 2) as isize;
    let mut v = DMatrix::zeros(window, poly_order + 1);
    for (row, offset) in (-half..=half).enumerate() {
        let x = offset as f64;
        let mut power = 1.0;
        for col in 0..=poly_order {
            v[(row, col)] = power;
            power *= x;
        }
    }
    let vt = v.transpose();
    let normal = &vt * &v;
    let inv = normal
        .cholesky()
        .expect("savgol normal equations are positive definite for window > poly_order")
        .inverse();
    inv * vt
}

/// Evaluates the fitted polynomial described by coefficient rows of `b` at
/// integer offset `x`, as a weight vector over the window samples.
fn savgol_eval_weights(b: &DMatrix<f64>, x: f64) -> Vec<f64> {
    let window = b.ncols();
    let mut weights = vec![0.0; window];
    let mut power = 1.0;
    for k in 0..b.nrows() {
        for (j, w) in weights.iter_mut().enumerate() {
            *w += power * b[(k, j)];
        }
        power *= x;
    }
    weights
}

/// Savitzky-Golay smoothing: each output is the local least-squares
/// polynomial fit of `poly_order` over an odd `window`, evaluated at the
/// center. The first and last half-windows are filled by evaluating the
/// edge-window fits at their off-center positions, so trajectory endpoints
/// keep derivative fidelity instead of being mirrored.
pub fn savgol_filter(series: &[f64], window: usize, poly_order: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 {
        return Err(CoreError::Parameter {
            name: "window",
            reason: format!("must be odd, got {window}"),
        });
    }
    if window <= poly_order {
        return Err(CoreError::Parameter {
            name: "window",
            reason: format!("must exceed poly_order {poly_order}, got {window}"),
        });
    }
    let n = series.len();
    if n < window {
        return Err(CoreError::InsufficientData {
            context: "savgol_filter",
            minimum: window,
            actual: n,
        });
    }
    let half = window / 2;
    let b = savgol_fit_matrix(window, poly_order);
    let center = savgol_eval_weights(&b, 0.0);

    let mut out = vec![0.0; n];
    for i in half..n - half {
        let seg = &series[i - half..i + half + 1];
        out[i] = dot(&center, seg);
    }
    for i in 0..half {
        let weights = savgol_eval_weights(&b, i as f64 - half as f64);
        out[i] = dot(&weights, &series[..window]);
    }
    for i in n - half..n {
        let x = (i + window - n) as f64 - half as f64;
        let weights = savgol_eval_weights(&b, x);
        out[i] = dot(&weights, &series[n - window..]);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Root-mean-square difference between two equal-length sequences.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::Shape {
            context: "rmse",
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(CoreError::InsufficientData {
            context: "rmse",
            minimum: 1,
            actual: 0,
        });
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}
