//! Lumped glycol heat-exchanger and bypass-valve model.
//!
//! The three-way valve splits the pump flow between the heat-exchanger path
//! and the bypass. The split follows the commanded fraction `pv006` through a
//! first-order lag; extracted heat follows an effectiveness relation on the
//! exchanger-path flow. Opening the bypass (pv006 → 0) therefore makes the
//! bypass flow rise sharply while the extracted heat collapses toward zero.

use crate::sim::config::GhxConfig;
use crate::types::{ControlVector, GhxState};

/// Advances the exchanger state by `dt`.
///
/// The lag state is the exchanger-path flow, recovered from the previous
/// bypass flow as `m_pump_out − prev.m_ghx` (clamped into the feasible range
/// for the current pump flow). The exact exponential update keeps the lag
/// stable for any `dt`.
pub fn ghx_step(
    bed_out_temp: f64,
    controls: &ControlVector,
    prev: &GhxState,
    dt: f64,
    gcfg: &GhxConfig,
) -> GhxState {
    let pump = controls.m_pump_out;
    let target_path = controls.pv006 * pump;
    let prev_path = (pump - prev.m_ghx).clamp(0.0, pump);
    let decay = (-dt / gcfg.valve_time_constant).exp();
    let path = target_path + (prev_path - target_path) * decay;

    let m_ghx = (pump - path).max(0.0);
    let q_ghx = if pump > 0.0 && path > 0.0 {
        let therminol_rate = path * gcfg.fluid_heat_capacity;
        let c_min = therminol_rate.min(gcfg.glycol_capacity_rate);
        let fraction = path / pump;
        (gcfg.effectiveness * c_min * (bed_out_temp - gcfg.glycol_inlet_temp) * fraction).max(0.0)
    } else {
        0.0
    };
    GhxState { m_ghx, q_ghx }
}

/// Exchanger state with the valve lag settled at the commanded split, used to
/// initialize rollouts.
pub fn ghx_steady(bed_out_temp: f64, controls: &ControlVector, gcfg: &GhxConfig) -> GhxState {
    let settled = GhxState {
        m_ghx: controls.m_pump_out * (1.0 - controls.pv006),
        q_ghx: 0.0,
    };
    // One long step from the settled split fills in the heat rate.
    ghx_step(
        bed_out_temp,
        controls,
        &settled,
        1e6 * gcfg.valve_time_constant,
        gcfg,
    )
}
