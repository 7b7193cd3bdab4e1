//! Shared domain types: actuator inputs, subsystem states, trajectories, and
//! datasets.
//!
//! A trajectory is one simulated (or pseudo-experimental) run of the storage
//! loop sampled on a uniform [`TimeGrid`]: four actuator channels, the two
//! glycol heat-exchanger states, and the five thermal-storage observables.
//! All containers are immutable after construction and validated on entry, so
//! downstream code can index freely without re-checking lengths.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;

/// Number of actuator (control) channels.
pub const N_CONTROLS: usize = 4;
/// Number of glycol heat-exchanger state channels.
pub const N_GHX_STATES: usize = 2;
/// Number of thermal-storage observable channels.
pub const N_TES_STATES: usize = 5;
/// Total data channels in a trajectory, excluding time.
pub const N_CHANNELS: usize = N_CONTROLS + N_GHX_STATES + N_TES_STATES;

/// Column names of the data channels, in canonical CSV order.
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "pv006",
    "m_pump_out",
    "t_pump_in",
    "t_heater_out",
    "m_ghx",
    "q_ghx",
    "m_tes_in",
    "t_tes_out",
    "t_top",
    "t_mid",
    "t_bot",
];

/// Actuator setpoints at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlVector {
    /// Bypass valve position, dimensionless in [0, 1].
    pub pv006: f64,
    /// Pump outlet mass flow, kg/s.
    pub m_pump_out: f64,
    /// Pump inlet temperature, K.
    pub t_pump_in: f64,
    /// Heater outlet temperature, K.
    pub t_heater_out: f64,
}

impl ControlVector {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pv006) || !self.pv006.is_finite() {
            return Err(CoreError::Parameter {
                name: "pv006",
                reason: format!("valve position must lie in [0, 1], got {}", self.pv006),
            });
        }
        if !(self.m_pump_out.is_finite() && self.m_pump_out >= 0.0) {
            return Err(CoreError::Parameter {
                name: "m_pump_out",
                reason: format!("mass flow must be non-negative, got {}", self.m_pump_out),
            });
        }
        for (name, t) in [("t_pump_in", self.t_pump_in), ("t_heater_out", self.t_heater_out)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("temperature must be positive kelvin, got {t}"),
                });
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; N_CONTROLS] {
        [self.pv006, self.m_pump_out, self.t_pump_in, self.t_heater_out]
    }

    pub fn from_array(a: [f64; N_CONTROLS]) -> Self {
        ControlVector {
            pv006: a[0],
            m_pump_out: a[1],
            t_pump_in: a[2],
            t_heater_out: a[3],
        }
    }
}

/// Glycol heat-exchanger state at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GhxState {
    /// Bypass mass flow, kg/s.
    pub m_ghx: f64,
    /// Extracted heat rate, W.
    pub q_ghx: f64,
}

impl GhxState {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m_ghx", self.m_ghx), ("q_ghx", self.q_ghx)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; N_GHX_STATES] {
        [self.m_ghx, self.q_ghx]
    }

    pub fn from_array(a: [f64; N_GHX_STATES]) -> Self {
        GhxState {
            m_ghx: a[0],
            q_ghx: a[1],
        }
    }
}

/// Thermal-storage observables at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TesState {
    /// Mass flow entering the store, kg/s (signed: negative on charge).
    pub m_tes_in: f64,
    /// Fluid temperature leaving the store, K.
    pub t_tes_out: f64,
    /// Probe temperature near the top of the bed, K.
    pub t_top: f64,
    /// Probe temperature at mid-height, K.
    pub t_mid: f64,
    /// Probe temperature near the bottom of the bed, K.
    pub t_bot: f64,
}

impl TesState {
    pub fn validate(&self) -> Result<()> {
        if !self.m_tes_in.is_finite() {
            return Err(CoreError::Parameter {
                name: "m_tes_in",
                reason: format!("must be finite, got {}", self.m_tes_in),
            });
        }
        for (name, t) in [
            ("t_tes_out", self.t_tes_out),
            ("t_top", self.t_top),
            ("t_mid", self.t_mid),
            ("t_bot", self.t_bot),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("temperature must be positive kelvin, got {t}"),
                });
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; N_TES_STATES] {
        [self.m_tes_in, self.t_tes_out, self.t_top, self.t_mid, self.t_bot]
    }

    pub fn from_array(a: [f64; N_TES_STATES]) -> Self {
        TesState {
            m_tes_in: a[0],
            t_tes_out: a[1],
            t_top: a[2],
            t_mid: a[3],
            t_bot: a[4],
        }
    }
}

/// Where a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Produced by the physics simulator at nominal parameters.
    Simulated,
    /// Produced by a perturbed simulator standing in for the real rig.
    PseudoExperimental,
}

/// One run of the storage loop sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: usize,
    pub provenance: Provenance,
    pub grid: TimeGrid,
    pub controls: Vec<ControlVector>,
    pub ghx: Vec<GhxState>,
    pub tes: Vec<TesState>,
}

impl Trajectory {
    /// Builds a trajectory, checking that every channel sequence matches the
    /// grid length.
    pub fn new(
        id: usize,
        provenance: Provenance,
        grid: TimeGrid,
        controls: Vec<ControlVector>,
        ghx: Vec<GhxState>,
        tes: Vec<TesState>,
    ) -> Result<Self> {
        let n = grid.n_steps();
        for (context, len) in [
            ("trajectory controls", controls.len()),
            ("trajectory ghx states", ghx.len()),
            ("trajectory tes states", tes.len()),
        ] {
            if len != n {
                return Err(CoreError::Shape {
                    context,
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(Trajectory {
            id,
            provenance,
            grid,
            controls,
            ghx,
            tes,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Data channel `c` (CSV order, excluding time) as an owned column.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        assert!(c < N_CHANNELS, "channel index {c} out of {N_CHANNELS}");
        (0..self.n_steps()).map(|i| self.value(i, c)).collect()
    }

    /// Value of data channel `c` at step `i`.
    pub fn value(&self, i: usize, c: usize) -> f64 {
        match c {
            0..=3 => self.controls[i].as_array()[c],
            4..=5 => self.ghx[i].as_array()[c - 4],
            6..=10 => self.tes[i].as_array()[c - 6],
            _ => panic!("channel index {c} out of {N_CHANNELS}"),
        }
    }

    /// All data channels as columns, CSV order.
    pub fn columns(&self) -> Vec<Vec<f64>> {
        (0..N_CHANNELS).map(|c| self.channel(c)).collect()
    }

    /// Rebuilds a trajectory from per-channel columns in CSV order.
    pub fn from_columns(
        id: usize,
        provenance: Provenance,
        grid: TimeGrid,
        columns: &[Vec<f64>],
    ) -> Result<Self> {
        if columns.len() != N_CHANNELS {
            return Err(CoreError::Shape {
                context: "trajectory columns",
                expected: N_CHANNELS,
                actual: columns.len(),
            });
        }
        let n = grid.n_steps();
        for col in columns {
            if col.len() != n {
                return Err(CoreError::Shape {
                    context: "trajectory column length",
                    expected: n,
                    actual: col.len(),
                });
            }
        }
        let controls = (0..n)
            .map(|i| {
                ControlVector::from_array([columns[0][i], columns[1][i], columns[2][i], columns[3][i]])
            })
            .collect();
        let ghx = (0..n)
            .map(|i| GhxState::from_array([columns[4][i], columns[5][i]]))
            .collect();
        let tes = (0..n)
            .map(|i| {
                TesState::from_array([
                    columns[6][i],
                    columns[7][i],
                    columns[8][i],
                    columns[9][i],
                    columns[10][i],
                ])
            })
            .collect();
        Trajectory::new(id, provenance, grid, controls, ghx, tes)
    }
}

/// An ordered, grid-homogeneous collection of trajectories with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    grid: TimeGrid,
    trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(CoreError::InsufficientData {
            context: "dataset",
            minimum: 1,
            actual: 0,
        })?;
        let grid = first.grid;
        let mut seen = std::collections::BTreeSet::new();
        let mut duplicates = Vec::new();
        for traj in &trajectories {
            if traj.grid != grid {
                return Err(CoreError::Shape {
                    context: "dataset grid homogeneity",
                    expected: grid.n_steps(),
                    actual: traj.grid.n_steps(),
                });
            }
            if !seen.insert(traj.id) {
                duplicates.push(traj.id);
            }
        }
        if !duplicates.is_empty() {
            return Err(CoreError::Data {
                reason: "duplicate trajectory ids".to_string(),
                ids: duplicates,
            });
        }
        Ok(Dataset { grid, trajectories })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trajectory> {
        self.trajectories.iter()
    }

    /// Trajectory ids in dataset order.
    pub fn ids(&self) -> Vec<usize> {
        self.trajectories.iter().map(|t| t.id).collect()
    }

    /// Looks a trajectory up by id.
    pub fn by_id(&self, id: usize) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// New dataset containing the requested ids, in the requested order.
    pub fn subset(&self, ids: &[usize]) -> Result<Dataset> {
        let mut picked = Vec::with_capacity(ids.len());
        let mut missing = Vec::new();
        for &id in ids {
            match self.by_id(id) {
                Some(t) => picked.push(t.clone()),
                None => missing.push(id),
            }
        }
        if !missing.is_empty() {
            return Err(CoreError::Data {
                reason: "ids absent from dataset".to_string(),
                ids: missing,
            });
        }
        Dataset::new(picked)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Trajectory;
    type IntoIter = std::slice::Iter<'a, Trajectory>;

    fn into_iter(self) -> Self::IntoIter {
        self.trajectories.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_trajectory(id: usize, n: usize, level: f64) -> Trajectory {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let controls = vec![
            ControlVector {
                pv006: 0.5,
                m_pump_out: 0.4,
                t_pump_in: 300.0,
                t_heater_out: 320.0,
            };
            n
        ];
        let ghx = vec![
            GhxState {
                m_ghx: 0.2,
                q_ghx: level,
            };
            n
        ];
        let tes = vec![
            TesState {
                m_tes_in: 0.4,
                t_tes_out: 310.0,
                t_top: 315.0,
                t_mid: 310.0,
                t_bot: 305.0,
            };
            n
        ];
        Trajectory::new(id, Provenance::Simulated, grid, controls, ghx, tes).unwrap()
    }

    #[test]
    fn control_vector_bounds_are_enforced() {
        let ok = ControlVector {
            pv006: 1.0,
            m_pump_out: 0.0,
            t_pump_in: 290.0,
            t_heater_out: 350.0,
        };
        assert!(ok.validate().is_ok());
        let bad_valve = ControlVector { pv006: 1.5, ..ok };
        assert!(bad_valve.validate().is_err());
        let bad_flow = ControlVector {
            m_pump_out: -0.1,
            ..ok
        };
        assert!(bad_flow.validate().is_err());
        let bad_temp = ControlVector {
            t_pump_in: 0.0,
            ..ok
        };
        assert!(bad_temp.validate().is_err());
    }

    #[test]
    fn trajectory_rejects_length_mismatch() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let t = constant_trajectory(0, 4, 100.0);
        let err = Trajectory::new(
            0,
            Provenance::Simulated,
            grid,
            t.controls.clone(),
            t.ghx[..3].to_vec(),
            t.tes.clone(),
        );
        assert!(matches!(err, Err(CoreError::Shape { .. })));
    }

    #[test]
    fn channel_round_trip_matches() {
        let traj = constant_trajectory(3, 5, 42.0);
        let cols = traj.columns();
        assert_eq!(cols.len(), N_CHANNELS);
        let rebuilt =
            Trajectory::from_columns(3, Provenance::Simulated, traj.grid, &cols).unwrap();
        assert_eq!(rebuilt, traj);
        assert_eq!(traj.channel(5), vec![42.0; 5]);
    }

    #[test]
    fn dataset_rejects_duplicates_and_mixed_grids() {
        let a = constant_trajectory(1, 5, 10.0);
        let b = constant_trajectory(1, 5, 20.0);
        assert!(matches!(
            Dataset::new(vec![a.clone(), b]),
            Err(CoreError::Data { .. })
        ));
        let c = constant_trajectory(2, 6, 10.0);
        assert!(matches!(
            Dataset::new(vec![a, c]),
            Err(CoreError::Shape { .. })
        ));
        assert!(Dataset::new(vec![]).is_err());
    }

    #[test]
    fn subset_preserves_requested_order() {
        let pool = Dataset::new(vec![
            constant_trajectory(10, 5, 1.0),
            constant_trajectory(11, 5, 2.0),
            constant_trajectory(12, 5, 3.0),
        ])
        .unwrap();
        let sub = pool.subset(&[12, 10]).unwrap();
        assert_eq!(sub.ids(), vec![12, 10]);
        assert!(matches!(
            pool.subset(&[99]),
            Err(CoreError::Data { ids, .. }) if ids == vec![99]
        ));
    }
}
