//! Uniform time grid shared by all trajectories in a dataset.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// A uniform grid of `n_steps` sample instants starting at `t0`, spaced `dt`
/// seconds apart. The covered span is `(n_steps - 1) * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() {
            return Err(CoreError::Parameter {
                name: "t0",
                reason: format!("must be finite, got {t0}"),
            });
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(CoreError::Parameter {
                name: "dt",
                reason: format!("must be positive and finite, got {dt}"),
            });
        }
        if n_steps < 2 {
            return Err(CoreError::Parameter {
                name: "n_steps",
                reason: format!("must be at least 2, got {n_steps}"),
            });
        }
        Ok(TimeGrid { t0, dt, n_steps })
    }

    /// Grid covering `[t0, t0 + span]` with `n_steps` points, `dt = span / (n_steps - 1)`.
    pub fn from_span(t0: f64, span: f64, n_steps: usize) -> Result<Self> {
        if !(span.is_finite() && span > 0.0) {
            return Err(CoreError::Parameter {
                name: "span",
                reason: format!("must be positive and finite, got {span}"),
            });
        }
        if n_steps < 2 {
            return Err(CoreError::Parameter {
                name: "n_steps",
                reason: format!("must be at least 2, got {n_steps}"),
            });
        }
        TimeGrid::new(t0, span / (n_steps - 1) as f64, n_steps)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// The instant of sample `i`. Panics if `i` is out of range.
    pub fn time(&self, i: usize) -> f64 {
        assert!(i < self.n_steps, "grid index {i} out of {}", self.n_steps);
        self.t0 + self.dt * i as f64
    }

    /// Last sample instant.
    pub fn t_end(&self) -> f64 {
        self.time(self.n_steps - 1)
    }

    /// Total covered span in seconds.
    pub fn span(&self) -> f64 {
        self.dt * (self.n_steps - 1) as f64
    }

    /// All sample instants in order.
    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps).map(|i| self.time(i)).collect()
    }
}
