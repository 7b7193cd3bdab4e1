//! Linear system identification from trajectory data.
//!
//! The heat-exchanger dynamics are modeled as an affine system
//! ẋ = A·x + B·u + d, identified with sequentially thresholded ridge
//! regression: state derivatives are estimated by finite differences, each
//! time sample contributes one library row [1 | x | u], and per state
//! equation the regression alternates ridge least squares with hard
//! thresholding of small coefficients until the active set stabilizes.
//! Identified models are rolled out with the implicit adaptive integrator in
//! [`crate::ode`] under zero-order-hold controls.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::ode::Sdirk4;
use crate::types::{ControlVector, Dataset, N_CONTROLS, N_GHX_STATES};

/// Trajectory channel indices of the identified states, library order.
const GHX_CHANNELS: [usize; N_GHX_STATES] = [4, 5];
/// Equation names used in fit diagnostics, matching [`GHX_CHANNELS`].
const GHX_EQUATIONS: [&str; N_GHX_STATES] = ["m_ghx", "q_ghx"];
/// Library columns per heat-exchanger state equation.
pub const GHX_LIBRARY_COLUMNS: usize = 1 + N_GHX_STATES + N_CONTROLS;

/// Tag recorded in model artifacts describing the library column layout.
pub const COLUMN_ORDER: &str = "constant|states|controls";

/// Sequentially thresholded least-squares settings.
///
/// `Default` is a generic normalized-space configuration; [`StlsqConfig::ghx`]
/// and [`StlsqConfig::tes`] are the unnormalized presets the pipeline uses,
/// where the tiny thresholds act on raw coefficient magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StlsqConfig {
    /// Hard cutoff: coefficients with magnitude below this are zeroed.
    pub threshold: f64,
    /// L2 penalty weight in each least-squares pass.
    pub ridge: f64,
    /// Upper bound on threshold/refit iterations.
    pub max_iters: usize,
    /// Scale library columns to unit norm before regression; thresholding
    /// then happens in normalized space and coefficients are rescaled on
    /// return. Off, the threshold compares raw magnitudes directly.
    pub normalize_columns: bool,
}

impl Default for StlsqConfig {
    fn default() -> Self {
        StlsqConfig {
            threshold: 0.1,
            ridge: 1e-6,
            max_iters: 20,
            normalize_columns: true,
        }
    }
}

impl StlsqConfig {
    /// Heat-exchanger preset: λ = 1e-8, α = 1e-6 on raw columns.
    pub fn ghx() -> Self {
        StlsqConfig {
            threshold: 1e-8,
            ridge: 1e-6,
            max_iters: 20,
            normalize_columns: false,
        }
    }

    /// Thermal-storage preset: λ = 1e-6, α = 1e-3 on raw columns.
    pub fn tes() -> Self {
        StlsqConfig {
            threshold: 1e-6,
            ridge: 1e-3,
            max_iters: 20,
            normalize_columns: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(CoreError::Parameter {
                name: "threshold",
                reason: format!("must be finite and non-negative, got {}", self.threshold),
            });
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(CoreError::Parameter {
                name: "ridge",
                reason: format!("must be finite and non-negative, got {}", self.ridge),
            });
        }
        if self.max_iters == 0 {
            return Err(CoreError::Parameter {
                name: "max_iters",
                reason: "must be at least 1".to_string(),
            });
        }
        Ok(())
    }
}

/// An identified affine model ẋ = A·x + B·u + d.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DVector<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(CoreError::Shape {
                context: "model state coupling",
                expected: a.nrows(),
                actual: a.ncols(),
            });
        }
        if b.nrows() != a.nrows() {
            return Err(CoreError::Shape {
                context: "model input rows",
                expected: a.nrows(),
                actual: b.nrows(),
            });
        }
        if d.len() != a.nrows() {
            return Err(CoreError::Shape {
                context: "model offset length",
                expected: a.nrows(),
                actual: d.len(),
            });
        }
        if a.iter().chain(b.iter()).chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteInput {
                context: "model coefficients",
            });
        }
        Ok(LinearModel { a, b, d })
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn state_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn input_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.d
    }

    /// Right-hand side A·x + B·u + d.
    pub fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.d
    }

    /// Coefficients as one vector, equation-major: for each state equation
    /// the offset first, then the state couplings, then the input couplings,
    /// mirroring the library column order.
    pub fn flatten(&self) -> DVector<f64> {
        let (n_x, n_u) = (self.n_x(), self.n_u());
        let width = 1 + n_x + n_u;
        let mut out = DVector::zeros(n_x * width);
        for i in 0..n_x {
            let base = i * width;
            out[base] = self.d[i];
            for j in 0..n_x {
                out[base + 1 + j] = self.a[(i, j)];
            }
            for j in 0..n_u {
                out[base + 1 + n_x + j] = self.b[(i, j)];
            }
        }
        out
    }

    /// Inverse of [`LinearModel::flatten`].
    pub fn unflatten(coeffs: &DVector<f64>, n_x: usize, n_u: usize) -> Result<Self> {
        let width = 1 + n_x + n_u;
        if coeffs.len() != n_x * width {
            return Err(CoreError::Shape {
                context: "flattened coefficients",
                expected: n_x * width,
                actual: coeffs.len(),
            });
        }
        let mut a = DMatrix::zeros(n_x, n_x);
        let mut b = DMatrix::zeros(n_x, n_u);
        let mut d = DVector::zeros(n_x);
        for i in 0..n_x {
            let base = i * width;
            d[i] = coeffs[base];
            for j in 0..n_x {
                a[(i, j)] = coeffs[base + 1 + j];
            }
            for j in 0..n_u {
                b[(i, j)] = coeffs[base + 1 + n_x + j];
            }
        }
        LinearModel::new(a, b, d)
    }
}

/// Serializable description of one identified model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub n_x: usize,
    pub n_u: usize,
    pub column_order: String,
    pub coefficients: Vec<f64>,
    pub fit: StlsqConfig,
    pub subset_ids: Vec<usize>,
}

impl ModelArtifact {
    pub fn new(model: &LinearModel, fit: StlsqConfig, subset_ids: Vec<usize>) -> Self {
        ModelArtifact {
            n_x: model.n_x(),
            n_u: model.n_u(),
            column_order: COLUMN_ORDER.to_string(),
            coefficients: model.flatten().as_slice().to_vec(),
            fit,
            subset_ids,
        }
    }

    /// Reconstructs the model, checking the layout tag.
    pub fn model(&self) -> Result<LinearModel> {
        if self.column_order != COLUMN_ORDER {
            return Err(CoreError::Manifest(format!(
                "unsupported column order '{}', expected '{COLUMN_ORDER}'",
                self.column_order
            )));
        }
        LinearModel::unflatten(
            &DVector::from_column_slice(&self.coefficients),
            self.n_x,
            self.n_u,
        )
    }
}

/// Stacks time samples into the regression design matrix.
///
/// `states` is n-samples × n_x, `controls` n-samples × n_u; each output row
/// is [1, x₁…x_{n_x}, u₁…u_{n_u}].
pub fn build_library(states: &DMatrix<f64>, controls: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if states.nrows() != controls.nrows() {
        return Err(CoreError::Shape {
            context: "library sample counts",
            expected: states.nrows(),
            actual: controls.nrows(),
        });
    }
    let m = states.nrows();
    let (n_x, n_u) = (states.ncols(), controls.ncols());
    let mut theta = DMatrix::zeros(m, 1 + n_x + n_u);
    for r in 0..m {
        theta[(r, 0)] = 1.0;
        for j in 0..n_x {
            theta[(r, 1 + j)] = states[(r, j)];
        }
        for j in 0..n_u {
            theta[(r, 1 + n_x + j)] = controls[(r, j)];
        }
    }
    Ok(theta)
}

/// Finite-difference time derivative of a uniformly sampled channel:
/// second-order central in the interior, second-order one-sided at the ends.
pub fn estimate_derivatives(series: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(CoreError::Parameter {
            name: "dt",
            reason: format!("must be positive, got {dt}"),
        });
    }
    let n = series.len();
    if n < 3 {
        return Err(CoreError::Shape {
            context: "derivative estimation samples",
            expected: 3,
            actual: n,
        });
    }
    let two_dt = 2.0 * dt;
    let mut out = vec![0.0; n];
    out[0] = (-3.0 * series[0] + 4.0 * series[1] - series[2]) / two_dt;
    for i in 1..n - 1 {
        out[i] = (series[i + 1] - series[i - 1]) / two_dt;
    }
    out[n - 1] = (3.0 * series[n - 1] - 4.0 * series[n - 2] + series[n - 3]) / two_dt;
    Ok(out)
}

/// Ridge least squares restricted to the active library columns.
fn ridge_solve(
    theta: &DMatrix<f64>,
    active: &[usize],
    y: &DVector<f64>,
    ridge: f64,
    equation: &str,
) -> Result<DVector<f64>> {
    let sub = theta.select_columns(active.iter());
    let mut gram = sub.transpose() * &sub;
    for i in 0..active.len() {
        gram[(i, i)] += ridge;
    }
    let rhs = sub.transpose() * y;
    match Cholesky::new(gram) {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => Err(CoreError::Singularity {
            equation: equation.to_string(),
            reason: format!(
                "active columns {active:?} are linearly dependent; raise the ridge weight"
            ),
        }),
    }
}

/// One state equation of the thresholded regression. Returns the full-width
/// coefficient vector (inactive columns zero) plus the active set after each
/// pass, outermost first.
fn stlsq_equation(
    theta: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: StlsqConfig,
    equation: &str,
) -> Result<(DVector<f64>, Vec<Vec<usize>>)> {
    let p = theta.ncols();
    let scatter = |active: &[usize], c: &DVector<f64>| {
        let mut full = DVector::zeros(p);
        for (slot, &j) in active.iter().enumerate() {
            full[j] = c[slot];
        }
        full
    };
    let mut active: Vec<usize> = (0..p).collect();
    let mut history = vec![active.clone()];
    for _ in 0..cfg.max_iters {
        let c = ridge_solve(theta, &active, y, cfg.ridge, equation)?;
        let keep: Vec<usize> = active
            .iter()
            .zip(c.iter())
            .filter_map(|(&j, &v)| (v.abs() >= cfg.threshold).then_some(j))
            .collect();
        if keep.is_empty() {
            return Err(CoreError::EmptyModel {
                equation: equation.to_string(),
            });
        }
        if keep.len() == active.len() {
            return Ok((scatter(&active, &c), history));
        }
        active = keep;
        history.push(active.clone());
    }
    let c = ridge_solve(theta, &active, y, cfg.ridge, equation)?;
    Ok((scatter(&active, &c), history))
}

fn stlsq_with_labels(
    theta: &DMatrix<f64>,
    derivatives: &DMatrix<f64>,
    cfg: StlsqConfig,
    labels: &[&str],
) -> Result<LinearModel> {
    cfg.validate()?;
    let (m, p) = theta.shape();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: "regression library",
        });
    }
    if derivatives.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: "regression targets",
        });
    }
    if m < p {
        return Err(CoreError::Shape {
            context: "regression sample count",
            expected: p,
            actual: m,
        });
    }
    if derivatives.nrows() != m {
        return Err(CoreError::Shape {
            context: "regression target rows",
            expected: m,
            actual: derivatives.nrows(),
        });
    }
    let n_x = derivatives.ncols();
    if p < 1 + n_x {
        return Err(CoreError::Shape {
            context: "regression library columns",
            expected: 1 + n_x,
            actual: p,
        });
    }
    let n_u = p - 1 - n_x;

    let mut scales = vec![1.0; p];
    let scaled;
    let design = if cfg.normalize_columns {
        let mut t = theta.clone();
        for j in 0..p {
            let norm = t.column(j).norm();
            if norm > 0.0 {
                scales[j] = norm;
                t.column_mut(j).scale_mut(1.0 / norm);
            }
        }
        scaled = t;
        &scaled
    } else {
        theta
    };

    let mut rows = Vec::with_capacity(n_x);
    for j in 0..n_x {
        let y = derivatives.column(j).into_owned();
        let (mut c, _) = stlsq_equation(design, &y, cfg, labels[j])?;
        for (v, s) in c.iter_mut().zip(&scales) {
            *v /= s;
        }
        rows.push(c);
    }

    let mut a = DMatrix::zeros(n_x, n_x);
    let mut b = DMatrix::zeros(n_x, n_u);
    let mut d = DVector::zeros(n_x);
    for (i, c) in rows.iter().enumerate() {
        d[i] = c[0];
        for j in 0..n_x {
            a[(i, j)] = c[1 + j];
        }
        for j in 0..n_u {
            b[(i, j)] = c[1 + n_x + j];
        }
    }
    LinearModel::new(a, b, d)
}

/// Sequentially thresholded ridge regression of derivative targets onto the
/// library, one pass per target column, assembled into a [`LinearModel`].
pub fn stlsq_fit(
    theta: &DMatrix<f64>,
    derivatives: &DMatrix<f64>,
    cfg: StlsqConfig,
) -> Result<LinearModel> {
    let labels: Vec<String> = (0..derivatives.ncols()).map(|j| format!("state {j}")).collect();
    let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
    stlsq_with_labels(theta, derivatives, cfg, &refs)
}

/// Tolerances and guard bound for model rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Infinity-norm bound beyond which the rollout counts as diverged.
    pub blow_up: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            rtol: 1e-12,
            atol: 1e-12,
            blow_up: 1e9,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rtol", self.rtol), ("atol", self.atol)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("must lie in (0, 1), got {v}"),
                });
            }
        }
        if !(self.blow_up.is_finite() && self.blow_up > 0.0) {
            return Err(CoreError::Parameter {
                name: "blow_up",
                reason: format!("must be positive, got {}", self.blow_up),
            });
        }
        Ok(())
    }
}

/// Integrates ẋ = A·x + B·u + d across the grid with the control held
/// constant on each interval, returning the state at every grid point.
pub fn rollout(
    model: &LinearModel,
    x0: &DVector<f64>,
    controls: &[ControlVector],
    grid: &TimeGrid,
    rcfg: RolloutConfig,
) -> Result<Vec<DVector<f64>>> {
    rcfg.validate()?;
    if x0.len() != model.n_x() {
        return Err(CoreError::Shape {
            context: "rollout initial state",
            expected: model.n_x(),
            actual: x0.len(),
        });
    }
    if model.n_u() != N_CONTROLS {
        return Err(CoreError::Shape {
            context: "rollout input dimension",
            expected: N_CONTROLS,
            actual: model.n_u(),
        });
    }
    let n = grid.n_steps();
    if controls.len() != n {
        return Err(CoreError::Shape {
            context: "rollout controls",
            expected: n,
            actual: controls.len(),
        });
    }
    let mut solver = Sdirk4::new(model.state_matrix().clone(), rcfg.rtol, rcfg.atol)?;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            let u = DVector::from_column_slice(&controls[k - 1].as_array());
            let c = model.input_matrix() * u + model.offset();
            solver.integrate(&c, grid.time(k - 1), &mut x, grid.time(k))?;
        }
        if x.amax() > rcfg.blow_up {
            return Err(CoreError::Divergence {
                time: grid.time(k),
                bound: rcfg.blow_up,
            });
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Fits one heat-exchanger model to every trajectory in the subset: library
/// rows and finite-difference derivative targets are stacked across
/// trajectories before the thresholded regression runs.
pub fn fit_sindyc(subset: &Dataset, cfg: StlsqConfig) -> Result<LinearModel> {
    let grid = subset.grid();
    let n = grid.n_steps();
    let total = subset.len() * n;
    let mut theta = DMatrix::zeros(total, GHX_LIBRARY_COLUMNS);
    let mut targets = DMatrix::zeros(total, N_GHX_STATES);
    for (t_idx, traj) in subset.iter().enumerate() {
        let mut states = DMatrix::zeros(n, N_GHX_STATES);
        let mut controls = DMatrix::zeros(n, N_CONTROLS);
        for i in 0..n {
            for (j, &ch) in GHX_CHANNELS.iter().enumerate() {
                states[(i, j)] = traj.value(i, ch);
            }
            for j in 0..N_CONTROLS {
                controls[(i, j)] = traj.value(i, j);
            }
        }
        let block = build_library(&states, &controls)?;
        theta.rows_mut(t_idx * n, n).copy_from(&block);
        for (j, &ch) in GHX_CHANNELS.iter().enumerate() {
            let deriv = estimate_derivatives(&traj.channel(ch), grid.dt())?;
            for i in 0..n {
                targets[(t_idx * n + i, j)] = deriv[i];
            }
        }
    }
    stlsq_with_labels(&theta, &targets, cfg, &GHX_EQUATIONS)
}
