//! Physics-based trajectory generator.
//!
//! The simulated rig is a discharge loop: the pump pulls hot fluid from the
//! top of the packed-bed store, a three-way valve splits it between the
//! glycol heat exchanger and its bypass, and the conditioned return stream
//! re-enters the bed at the bottom at the commanded pump-inlet temperature.
//! The heater branch is idle in this configuration, so `t_heater_out` acts on
//! nothing downstream; it is still scheduled and recorded as a control
//! channel. Actuator schedules are sampled from a Sobol design and the bed is
//! integrated with an adaptive explicit Runge-Kutta method.

mod bed;
mod config;
mod ghx;
mod schedule;

pub use bed::{bed_rhs, bed_rhs_into, step_bed, total_enthalpy, BedState, BedStepper};
pub use config::{BedConfig, GhxConfig};
pub use ghx::{ghx_steady, ghx_step};
pub use schedule::{generate_schedules, ActuatorSchedule, Range, ScheduleBounds, SetpointStep};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::rng::RngStream;
use crate::types::{Dataset, Provenance, TesState, Trajectory};

/// Integration tolerances for the trajectory generator.
pub const SIM_RTOL: f64 = 1e-8;
pub const SIM_ATOL: f64 = 1e-8;

/// Fractional probe heights of the three reported bed temperature sensors.
const PROBE_HEIGHTS: [f64; 3] = [0.9, 0.5, 0.1];

/// Initial hot-over-cold bed profile, discharge-ready by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialProfile {
    pub t_hot: f64,
    pub t_cold: f64,
    /// Front center as a fraction of bed height from the bottom.
    pub front_height: f64,
    /// Front thickness as a fraction of bed height.
    pub front_width: f64,
}

impl Default for InitialProfile {
    fn default() -> Self {
        InitialProfile {
            t_hot: 363.15,
            t_cold: 298.15,
            front_height: 0.75,
            front_width: 0.05,
        }
    }
}

impl InitialProfile {
    pub fn build(&self, n_nodes: usize) -> BedState {
        BedState::thermocline(
            n_nodes,
            self.t_hot,
            self.t_cold,
            self.front_height,
            self.front_width,
        )
    }
}

/// Node index of a probe at fractional height `h` (1 = top of bed).
///
/// Snapping to nine decimals keeps the cell choice stable when `1 - h` picks
/// up float noise right at a cell boundary.
fn probe_index(n_nodes: usize, height_fraction: f64) -> usize {
    let cells = (n_nodes as f64) * (1.0 - height_fraction);
    let snapped = (cells * 1e9).round() / 1e9;
    let raw = snapped - 0.5;
    (raw.round().max(0.0) as usize).min(n_nodes - 1)
}

/// Rolls out one schedule into a full trajectory.
///
/// Controls are held between grid points (the value recorded at step k drives
/// the interval to step k+1). The exchanger state is updated with the
/// end-of-interval bed outlet temperature so recorded heat rates correspond
/// to the sample instant.
pub fn simulate(
    id: usize,
    schedule: &ActuatorSchedule,
    bed0: &BedState,
    cfg: &BedConfig,
    gcfg: &GhxConfig,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    cfg.validate()?;
    gcfg.validate()?;
    schedule.validate()?;
    if bed0.n_nodes() != cfg.n_nodes {
        return Err(CoreError::Shape {
            context: "initial bed state",
            expected: cfg.n_nodes,
            actual: bed0.n_nodes(),
        });
    }

    let n = grid.n_steps();
    let dt = grid.dt();
    let idx_top = probe_index(cfg.n_nodes, PROBE_HEIGHTS[0]);
    let idx_mid = probe_index(cfg.n_nodes, PROBE_HEIGHTS[1]);
    let idx_bot = probe_index(cfg.n_nodes, PROBE_HEIGHTS[2]);

    let mut bed = bed0.clone();
    let mut stepper = BedStepper::new(*cfg, SIM_RTOL, SIM_ATOL);

    let mut controls = Vec::with_capacity(n);
    let mut ghx_states = Vec::with_capacity(n);
    let mut tes_states = Vec::with_capacity(n);

    let c0 = schedule.control_at(grid.t0());
    c0.validate()?;
    let mut ghx = ghx_steady(bed.t_fluid[0], &c0, gcfg);
    let mut prev_control = c0;

    for k in 0..n {
        let t = grid.time(k);
        if k > 0 {
            let t_prev = grid.time(k - 1);
            stepper
                .step(
                    &mut bed,
                    prev_control.t_pump_in,
                    -prev_control.m_pump_out,
                    t_prev,
                    dt,
                )
                .map_err(|e| CoreError::Data {
                    reason: format!("simulation failed: {e}"),
                    ids: vec![id],
                })?;
            ghx = ghx_step(bed.t_fluid[0], &prev_control, &ghx, dt, gcfg);
        }
        let control = schedule.control_at(t);
        control.validate()?;
        controls.push(control);
        ghx_states.push(ghx);
        tes_states.push(TesState {
            m_tes_in: control.m_pump_out,
            t_tes_out: bed.t_fluid[0],
            t_top: bed.t_fluid[idx_top],
            t_mid: bed.t_fluid[idx_mid],
            t_bot: bed.t_fluid[idx_bot],
        });
        prev_control = control;
    }

    Trajectory::new(
        id,
        Provenance::Simulated,
        *grid,
        controls,
        ghx_states,
        tes_states,
    )
}

/// Samples `n` schedules and simulates them all, in parallel, into a dataset
/// with ids `0..n`.
pub fn generate_dataset(
    n: usize,
    bounds: &ScheduleBounds,
    grid: &TimeGrid,
    stagger_gap: f64,
    cfg: &BedConfig,
    gcfg: &GhxConfig,
    profile: &InitialProfile,
    stream: &RngStream,
) -> Result<Dataset> {
    let schedules = generate_schedules(n, bounds, grid, stagger_gap, stream)?;
    let bed0 = profile.build(cfg.n_nodes);
    let results: Vec<Result<Trajectory>> = schedules
        .par_iter()
        .enumerate()
        .map(|(id, schedule)| simulate(id, schedule, &bed0, cfg, gcfg, grid))
        .collect();
    let mut trajectories = Vec::with_capacity(n);
    for r in results {
        trajectories.push(r?);
    }
    Dataset::new(trajectories)
}
