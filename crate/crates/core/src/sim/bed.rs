//! Packed-bed thermocline dynamics: two-phase (fluid/filler) energy balances
//! discretized by first-order upwind advection with the method of lines.
//!
//! Node 0 is the top of the bed. Positive mass flow charges top-down (hot
//! inlet at node 0); negative mass flow discharges bottom-up (inlet at the
//! last node), matching the sign convention used by the loop simulator.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ode::Dopri5;
use crate::sim::config::BedConfig;

/// Guard band below ambient allowed before a state is rejected, K.
const UNDER_AMBIENT_GUARD: f64 = 5.0;
/// Upper guard bound on any bed temperature, K.
const MAX_TEMPERATURE: f64 = 700.0;

/// Axial temperature profiles of both phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BedState {
    pub t_fluid: Vec<f64>,
    pub t_filler: Vec<f64>,
}

impl BedState {
    /// Builds a state and checks the guard band against `cfg.ambient_temp`.
    pub fn new(t_fluid: Vec<f64>, t_filler: Vec<f64>, cfg: &BedConfig) -> Result<Self> {
        if t_fluid.len() != t_filler.len() {
            return Err(CoreError::Shape {
                context: "bed state phases",
                expected: t_fluid.len(),
                actual: t_filler.len(),
            });
        }
        let state = BedState { t_fluid, t_filler };
        state.check_guard_band(cfg)?;
        Ok(state)
    }

    /// Uniform state at one temperature.
    pub fn uniform(n_nodes: usize, temp: f64) -> Self {
        BedState {
            t_fluid: vec![temp; n_nodes],
            t_filler: vec![temp; n_nodes],
        }
    }

    /// Smooth hot-over-cold thermocline: both phases at `t_hot` above the
    /// front, `t_cold` below, with a tanh transition centered at
    /// `front_height` (fraction of bed height measured from the bottom) of
    /// characteristic thickness `front_width` (same units).
    pub fn thermocline(
        n_nodes: usize,
        t_hot: f64,
        t_cold: f64,
        front_height: f64,
        front_width: f64,
    ) -> Self {
        let profile: Vec<f64> = (0..n_nodes)
            .map(|i| {
                let height = 1.0 - (i as f64 + 0.5) / n_nodes as f64;
                let arg = (height - front_height) / front_width.max(1e-6);
                t_cold + (t_hot - t_cold) * 0.5 * (1.0 + arg.tanh())
            })
            .collect();
        BedState {
            t_fluid: profile.clone(),
            t_filler: profile,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.t_fluid.len()
    }

    fn check_guard_band(&self, cfg: &BedConfig) -> Result<()> {
        let lo = cfg.ambient_temp - UNDER_AMBIENT_GUARD;
        for (node, (&tf, &tr)) in self.t_fluid.iter().zip(&self.t_filler).enumerate() {
            for t in [tf, tr] {
                if !t.is_finite() {
                    return Err(CoreError::NonFiniteState { node, time: 0.0 });
                }
                if t < lo || t > MAX_TEMPERATURE {
                    return Err(CoreError::Parameter {
                        name: "bed temperature",
                        reason: format!(
                            "node {node} at {t} K outside guard band [{lo}, {MAX_TEMPERATURE}]"
                        ),
                    });
                }
            }
        }
        Ok(())
    }

    fn from_flat(flat: &[f64]) -> Self {
        let n = flat.len() / 2;
        BedState {
            t_fluid: flat[..n].to_vec(),
            t_filler: flat[n..].to_vec(),
        }
    }
}

/// Fills `d_fluid`/`d_filler` with the time derivatives of both phases.
///
/// Works on any state of two or more nodes; `cfg.n_nodes` is not consulted,
/// so hand-built miniature beds stay usable for oracle checks.
pub fn bed_rhs_into(
    t_fluid: &[f64],
    t_filler: &[f64],
    inlet_temp: f64,
    mass_flow: f64,
    cfg: &BedConfig,
    time: f64,
    d_fluid: &mut [f64],
    d_filler: &mut [f64],
) -> Result<()> {
    let n = t_fluid.len();
    debug_assert!(n >= 2 && t_filler.len() == n);
    for (node, (&tf, &tr)) in t_fluid.iter().zip(t_filler).enumerate() {
        if !tf.is_finite() || !tr.is_finite() {
            return Err(CoreError::NonFiniteState { node, time });
        }
    }

    let cross = cfg.cross_section();
    let surface = cfg.filler_surface_per_length();
    let h_c = cfg.effective_h_c(mass_flow);
    let exchange = h_c * surface;
    let fluid_capacity = cfg.fluid_density * cfg.fluid_heat_capacity * cfg.porosity * cross;
    let filler_capacity =
        cfg.filler_density * cfg.filler_heat_capacity * (1.0 - cfg.porosity) * cross;
    let velocity = cfg.fluid_velocity(mass_flow);
    let dz = cfg.height / n as f64;

    for i in 0..n {
        let gradient = if velocity > 0.0 {
            let upstream = if i == 0 { inlet_temp } else { t_fluid[i - 1] };
            (t_fluid[i] - upstream) / dz
        } else if velocity < 0.0 {
            let upstream = if i == n - 1 { inlet_temp } else { t_fluid[i + 1] };
            (upstream - t_fluid[i]) / dz
        } else {
            0.0
        };
        let coupling = exchange * (t_filler[i] - t_fluid[i]);
        let loss = cfg.wall_loss_coefficient * (cfg.ambient_temp - t_fluid[i]);
        d_fluid[i] = -velocity * gradient + (coupling + loss) / fluid_capacity;
        d_filler[i] = -coupling / filler_capacity;
    }
    Ok(())
}

/// Convenience wrapper returning the derivatives as a [`BedState`]-shaped
/// pair of vectors.
pub fn bed_rhs(
    state: &BedState,
    inlet_temp: f64,
    mass_flow: f64,
    cfg: &BedConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = state.n_nodes();
    let mut d_fluid = vec![0.0; n];
    let mut d_filler = vec![0.0; n];
    bed_rhs_into(
        &state.t_fluid,
        &state.t_filler,
        inlet_temp,
        mass_flow,
        cfg,
        0.0,
        &mut d_fluid,
        &mut d_filler,
    )?;
    Ok((d_fluid, d_filler))
}

/// Total thermal energy of fluid plus filler relative to 0 K, J.
///
/// With zero flow and zero wall loss this is an exact invariant of the
/// continuous and the discretized equations alike.
pub fn total_enthalpy(state: &BedState, cfg: &BedConfig) -> f64 {
    let n = state.n_nodes();
    let cross = cfg.cross_section();
    let dz = cfg.height / n as f64;
    let fluid_capacity = cfg.fluid_density * cfg.fluid_heat_capacity * cfg.porosity * cross;
    let filler_capacity =
        cfg.filler_density * cfg.filler_heat_capacity * (1.0 - cfg.porosity) * cross;
    let mut total = 0.0;
    for i in 0..n {
        total += dz * (fluid_capacity * state.t_fluid[i] + filler_capacity * state.t_filler[i]);
    }
    total
}

/// Reusable adaptive stepper for one bed configuration.
///
/// Holding the stepper across a rollout lets the integrator carry its step
/// size between grid intervals instead of re-estimating each time.
pub struct BedStepper {
    cfg: BedConfig,
    solver: Dopri5,
    flat: Vec<f64>,
}

impl BedStepper {
    pub fn new(cfg: BedConfig, rtol: f64, atol: f64) -> Self {
        BedStepper {
            cfg,
            solver: Dopri5::new(rtol, atol),
            flat: Vec::new(),
        }
    }

    pub fn config(&self) -> &BedConfig {
        &self.cfg
    }

    /// Advances `state` in place from `t0` by `dt` under constant inlet
    /// temperature and mass flow.
    pub fn step(
        &mut self,
        state: &mut BedState,
        inlet_temp: f64,
        mass_flow: f64,
        t0: f64,
        dt: f64,
    ) -> Result<()> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(CoreError::Parameter {
                name: "dt",
                reason: format!("must be positive, got {dt}"),
            });
        }
        let n = state.n_nodes();
        self.flat.clear();
        self.flat.extend_from_slice(&state.t_fluid);
        self.flat.extend_from_slice(&state.t_filler);
        let cfg = self.cfg;
        let mut f = |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            let (t_fluid, t_filler) = y.split_at(n);
            let (d_fluid, d_filler) = dy.split_at_mut(n);
            bed_rhs_into(
                t_fluid, t_filler, inlet_temp, mass_flow, &cfg, t, d_fluid, d_filler,
            )
        };
        self.solver.integrate(&mut f, t0, &mut self.flat, t0 + dt)?;
        *state = BedState::from_flat(&self.flat);
        Ok(())
    }
}

/// One-shot step for callers without a persistent stepper.
pub fn step_bed(
    state: &BedState,
    inlet_temp: f64,
    mass_flow: f64,
    dt: f64,
    cfg: &BedConfig,
    rtol: f64,
    atol: f64,
) -> Result<BedState> {
    let mut stepper = BedStepper::new(*cfg, rtol, atol);
    let mut next = state.clone();
    stepper.step(&mut next, inlet_temp, mass_flow, 0.0, dt)?;
    Ok(next)
}
