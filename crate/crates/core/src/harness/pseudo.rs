//! Pseudo-experimental trajectories.
//!
//! A stand-in for the physical rig: the same simulator run with deliberately
//! offset parameters, plus Gaussian measurement noise on the recorded
//! channels. Models are fit to nominal simulations and evaluated against
//! these perturbed runs, so the gap between the two mimics the
//! simulation-to-rig gap without any hardware.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::TimeGrid;
use crate::rng::RngStream;
use crate::sim::{simulate, ActuatorSchedule, BedConfig, GhxConfig, InitialProfile};
use crate::timeseries::savgol_filter;
use crate::types::{
    GhxState, Provenance, TesState, Trajectory, N_CONTROLS, N_GHX_STATES, N_TES_STATES,
};

/// Multiplicative offsets applied to the simulator parameters before a
/// pseudo-experimental run; the defaults raise the bed's convective
/// coefficient, lower its porosity, and degrade the exchanger effectiveness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationSpec {
    pub convective_factor: f64,
    pub porosity_factor: f64,
    pub effectiveness_factor: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            convective_factor: 1.15,
            porosity_factor: 0.95,
            effectiveness_factor: 0.90,
        }
    }
}

impl PerturbationSpec {
    /// All factors one: the stand-in coincides with the nominal simulator.
    pub fn none() -> Self {
        PerturbationSpec {
            convective_factor: 1.0,
            porosity_factor: 1.0,
            effectiveness_factor: 1.0,
        }
    }

    /// Nominal configs scaled by the factors.
    pub fn apply(&self, bed: &BedConfig, ghx: &GhxConfig) -> (BedConfig, GhxConfig) {
        let mut bed = bed.clone();
        let mut ghx = ghx.clone();
        bed.convective_coefficient *= self.convective_factor;
        bed.porosity *= self.porosity_factor;
        ghx.effectiveness *= self.effectiveness_factor;
        (bed, ghx)
    }
}

/// Per-channel measurement-noise levels together with the smoothing settings
/// used to remove that noise again. Controls are commanded values and stay
/// exact; only the recorded exchanger and storage channels are corrupted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub ghx_sigma: [f64; N_GHX_STATES],
    pub tes_sigma: [f64; N_TES_STATES],
    pub savgol_window: usize,
    pub savgol_order: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            ghx_sigma: [0.005, 20.0],
            tes_sigma: [0.005, 0.15, 0.15, 0.15, 0.15],
            savgol_window: 21,
            savgol_order: 3,
        }
    }
}

impl NoiseSpec {
    /// Noise-free measurements; smoothing settings keep their defaults.
    pub fn zero() -> Self {
        NoiseSpec {
            ghx_sigma: [0.0; N_GHX_STATES],
            tes_sigma: [0.0; N_TES_STATES],
            ..NoiseSpec::default()
        }
    }
}

/// One pseudo-experimental run: the noisy record as measured and a smoothed
/// companion, sharing the same grid, id, and actuator history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoExperiment {
    pub raw: Trajectory,
    pub denoised: Trajectory,
    pub perturbation: PerturbationSpec,
    pub noise: NoiseSpec,
}

/// Simulates the schedule under perturbed parameters, corrupts the measured
/// channels with Gaussian noise drawn from the stream's `noise` child, and
/// smooths each corrupted channel with a Savitzky–Golay filter.
#[allow(clippy::too_many_arguments)]
pub fn make_pseudo_experiment(
    id: usize,
    schedule: &ActuatorSchedule,
    profile: &InitialProfile,
    bed: &BedConfig,
    ghx: &GhxConfig,
    grid: &TimeGrid,
    perturbation: &PerturbationSpec,
    noise: &NoiseSpec,
    stream: &RngStream,
) -> Result<PseudoExperiment> {
    let (bed_cfg, ghx_cfg) = perturbation.apply(bed, ghx);
    let bed0 = profile.build(bed_cfg.n_nodes);
    let mut raw = simulate(id, schedule, &bed0, &bed_cfg, &ghx_cfg, grid)?;
    raw.provenance = Provenance::PseudoExperimental;

    let mut rng = stream.child("noise").rng();
    for i in 0..raw.n_steps() {
        let mut g = raw.ghx[i].as_array();
        for (v, sigma) in g.iter_mut().zip(noise.ghx_sigma) {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        raw.ghx[i] = GhxState::from_array(g);
        let mut t = raw.tes[i].as_array();
        for (v, sigma) in t.iter_mut().zip(noise.tes_sigma) {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        raw.tes[i] = TesState::from_array(t);
    }

    let mut columns = raw.columns();
    for col in columns.iter_mut().skip(N_CONTROLS) {
        *col = savgol_filter(col, noise.savgol_window, noise.savgol_order)?;
    }
    let denoised = Trajectory::from_columns(id, Provenance::PseudoExperimental, *grid, &columns)?;

    Ok(PseudoExperiment {
        raw,
        denoised,
        perturbation: *perturbation,
        noise: noise.clone(),
    })
}
