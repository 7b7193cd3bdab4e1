//! Piecewise-constant actuator schedules and their Sobol-based sampler.
//!
//! A schedule drives the four loop actuators through setpoint steps. The
//! sampler draws candidate schedules from a Cranley-Patterson-rotated Sobol
//! sequence (the rotation comes from the caller's random stream, so seeds
//! produce different but equally well-spread designs), then rejects
//! candidates whose switch events violate the stagger constraint, drawing
//! further points until enough valid schedules exist.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::rng::RngStream;
use crate::sobol::SobolSequence;
use crate::types::ControlVector;
use rand::Rng;

/// One setpoint change: `level` applies from `time` onward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SetpointStep {
    pub time: f64,
    pub level: f64,
}

/// Closed interval of admissible setpoints for one actuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn validate(&self, name: &'static str) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(CoreError::Parameter {
                name,
                reason: format!("bounds must be finite with min <= max, got [{}, {}]", self.min, self.max),
            });
        }
        Ok(())
    }

    fn lerp(&self, u: f64) -> f64 {
        self.min + u * (self.max - self.min)
    }
}

/// Admissible setpoint ranges for all four actuators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleBounds {
    pub pv006: Range,
    pub m_pump_out: Range,
    pub t_pump_in: Range,
    pub t_heater_out: Range,
}

impl Default for ScheduleBounds {
    fn default() -> Self {
        ScheduleBounds {
            pv006: Range { min: 0.0, max: 1.0 },
            m_pump_out: Range { min: 0.1, max: 0.5 },
            t_pump_in: Range {
                min: 295.0,
                max: 313.0,
            },
            t_heater_out: Range {
                min: 340.0,
                max: 380.0,
            },
        }
    }
}

impl ScheduleBounds {
    pub fn validate(&self) -> Result<()> {
        self.pv006.validate("pv006 bounds")?;
        self.m_pump_out.validate("m_pump_out bounds")?;
        self.t_pump_in.validate("t_pump_in bounds")?;
        self.t_heater_out.validate("t_heater_out bounds")
    }

    fn as_array(&self) -> [Range; 4] {
        [self.pv006, self.m_pump_out, self.t_pump_in, self.t_heater_out]
    }
}

/// Piecewise-constant setpoint lists for the four actuators. The first entry
/// of each list holds the initial level; later entries are switch events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorSchedule {
    pub pv006: Vec<SetpointStep>,
    pub m_pump_out: Vec<SetpointStep>,
    pub t_pump_in: Vec<SetpointStep>,
    pub t_heater_out: Vec<SetpointStep>,
    pub stagger_gap: f64,
}

impl ActuatorSchedule {
    /// Constant schedule at the given levels.
    pub fn constant(t0: f64, levels: [f64; 4], stagger_gap: f64) -> Self {
        let step = |level| vec![SetpointStep { time: t0, level }];
        ActuatorSchedule {
            pv006: step(levels[0]),
            m_pump_out: step(levels[1]),
            t_pump_in: step(levels[2]),
            t_heater_out: step(levels[3]),
            stagger_gap,
        }
    }

    fn actuators(&self) -> [&Vec<SetpointStep>; 4] {
        [&self.pv006, &self.m_pump_out, &self.t_pump_in, &self.t_heater_out]
    }

    /// Checks per-actuator monotone switch times and the cross-actuator
    /// stagger separation of all switch events.
    pub fn validate(&self) -> Result<()> {
        let mut switches = Vec::new();
        for list in self.actuators() {
            if list.is_empty() {
                return Err(CoreError::Parameter {
                    name: "schedule",
                    reason: "every actuator needs at least an initial level".to_string(),
                });
            }
            for pair in list.windows(2) {
                if pair[1].time <= pair[0].time {
                    return Err(CoreError::Parameter {
                        name: "schedule",
                        reason: format!(
                            "switch times must increase, got {} after {}",
                            pair[1].time, pair[0].time
                        ),
                    });
                }
            }
            switches.extend(list.iter().skip(1).map(|s| s.time));
        }
        switches.sort_by(|a, b| a.partial_cmp(b).expect("finite switch times"));
        for pair in switches.windows(2) {
            if pair[1] - pair[0] < self.stagger_gap {
                return Err(CoreError::Parameter {
                    name: "schedule",
                    reason: format!(
                        "switches at {} and {} closer than the stagger gap {}",
                        pair[0], pair[1], self.stagger_gap
                    ),
                });
            }
        }
        Ok(())
    }

    /// Setpoints in force at time `t`.
    pub fn control_at(&self, t: f64) -> ControlVector {
        let level = |list: &[SetpointStep]| -> f64 {
            let mut current = list[0].level;
            for step in list {
                if step.time <= t {
                    current = step.level;
                } else {
                    break;
                }
            }
            current
        };
        ControlVector {
            pv006: level(&self.pv006),
            m_pump_out: level(&self.m_pump_out),
            t_pump_in: level(&self.t_pump_in),
            t_heater_out: level(&self.t_heater_out),
        }
    }

    /// All switch instants (initial levels excluded), unordered.
    pub fn switch_times(&self) -> Vec<f64> {
        self.actuators()
            .iter()
            .flat_map(|list| list.iter().skip(1).map(|s| s.time))
            .collect()
    }
}

/// Maximum setpoint switches per actuator drawn by the sampler.
const MAX_SWITCHES: usize = 2;
/// Sobol dimensions: 4 initial levels + 4 switch counts + 4·MAX_SWITCHES
/// times + 4·MAX_SWITCHES levels.
const SOBOL_DIM: usize = 8 + 8 * MAX_SWITCHES;

/// Draws `n` valid schedules parameterized by a rotated Sobol sequence.
///
/// Invalid candidates (stagger violations, switch windows that do not fit the
/// grid) are discarded and replaced by further Sobol points, so the output is
/// a deterministic function of `(bounds, grid, stagger_gap, stream)`.
pub fn generate_schedules(
    n: usize,
    bounds: &ScheduleBounds,
    grid: &TimeGrid,
    stagger_gap: f64,
    stream: &RngStream,
) -> Result<Vec<ActuatorSchedule>> {
    if n == 0 {
        return Err(CoreError::Parameter {
            name: "n",
            reason: "must draw at least one schedule".to_string(),
        });
    }
    bounds.validate()?;
    if !(stagger_gap.is_finite() && stagger_gap >= 0.0) {
        return Err(CoreError::Parameter {
            name: "stagger_gap",
            reason: format!("must be non-negative, got {stagger_gap}"),
        });
    }

    let mut rotation_rng = stream.rng();
    let rotation: Vec<f64> = (0..SOBOL_DIM).map(|_| rotation_rng.gen::<f64>()).collect();
    let mut sobol = SobolSequence::new(SOBOL_DIM)?;
    let ranges = bounds.as_array();

    // Switch times live inside the span with a stagger-sized margin at both
    // ends; if that window is empty only switchless schedules are valid.
    let usable = grid.span() - 2.0 * stagger_gap;

    let mut schedules = Vec::with_capacity(n);
    let max_attempts = 10_000 + 200 * n;
    for _ in 0..max_attempts {
        if schedules.len() == n {
            break;
        }
        let raw = sobol.next_point();
        let u: Vec<f64> = raw
            .iter()
            .zip(&rotation)
            .map(|(x, r)| (x + r).fract())
            .collect();

        let mut lists: [Vec<SetpointStep>; 4] = Default::default();
        let mut feasible = true;
        for a in 0..4 {
            let mut list = vec![SetpointStep {
                time: grid.t0(),
                level: ranges[a].lerp(u[a]),
            }];
            let n_switches =
                ((u[4 + a] * (MAX_SWITCHES + 1) as f64).floor() as usize).min(MAX_SWITCHES);
            if n_switches > 0 && usable <= 0.0 {
                feasible = false;
                break;
            }
            let mut events: Vec<SetpointStep> = (0..n_switches)
                .map(|k| SetpointStep {
                    time: grid.t0() + stagger_gap + u[8 + a * MAX_SWITCHES + k] * usable,
                    level: ranges[a].lerp(u[8 + 4 * MAX_SWITCHES + a * MAX_SWITCHES + k]),
                })
                .collect();
            events.sort_by(|x, y| x.time.partial_cmp(&y.time).expect("finite times"));
            for event in events {
                if event.level != list.last().expect("non-empty").level {
                    list.push(event);
                }
            }
            lists[a] = list;
        }
        if !feasible {
            continue;
        }
        let [pv006, m_pump_out, t_pump_in, t_heater_out] = lists;
        let candidate = ActuatorSchedule {
            pv006,
            m_pump_out,
            t_pump_in,
            t_heater_out,
            stagger_gap,
        };
        if candidate.validate().is_ok() {
            schedules.push(candidate);
        }
    }

    if schedules.len() < n {
        return Err(CoreError::Parameter {
            name: "n",
            reason: format!(
                "only {} valid schedules found in {max_attempts} candidate draws",
                schedules.len()
            ),
        });
    }
    Ok(schedules)
}
