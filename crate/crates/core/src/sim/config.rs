//! Simulator configuration: packed-bed geometry/materials and the lumped
//! glycol heat-exchanger parameters.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Packed-bed thermocline parameters.
///
/// Defaults describe a desk-scale bed (0.56 m diameter, 2.2 m tall, alumina
/// filler in a Therminol-class oil) whose thermal front crosses the bed in
/// roughly 1500-2000 s at nominal flow, so a 5460 s window sees the full
/// discharge dynamics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BedConfig {
    /// Tank inner radius, m.
    pub radius: f64,
    /// Bed height, m.
    pub height: f64,
    /// Axial discretization nodes.
    pub n_nodes: usize,
    /// Void fraction of the packing, dimensionless in (0, 1).
    pub porosity: f64,
    /// Fluid density, kg/m³.
    pub fluid_density: f64,
    /// Fluid specific heat, J/(kg·K).
    pub fluid_heat_capacity: f64,
    /// Filler density, kg/m³.
    pub filler_density: f64,
    /// Filler specific heat, J/(kg·K).
    pub filler_heat_capacity: f64,
    /// Filler particle radius, m.
    pub filler_particle_radius: f64,
    /// Particle shape factor, dimensionless.
    pub shape_factor: f64,
    /// Fluid-filler convective coefficient, W/(m²·K).
    pub convective_coefficient: f64,
    /// Exponent of the optional flow-dependent convective correlation:
    /// h_c_eff = h_c · (|ṁ| / reference_flow)^flow_exponent. Zero keeps h_c
    /// constant; 0.6 gives a Wakao-form dependence.
    pub flow_exponent: f64,
    /// Reference mass flow for the correlation, kg/s.
    pub reference_flow: f64,
    /// Wall loss per unit length to ambient, W/(m·K). Zero by default.
    pub wall_loss_coefficient: f64,
    /// Ambient temperature, K.
    pub ambient_temp: f64,
}

impl Default for BedConfig {
    fn default() -> Self {
        BedConfig {
            radius: 0.28,
            height: 2.2,
            n_nodes: 40,
            porosity: 0.39,
            fluid_density: 750.0,
            fluid_heat_capacity: 2100.0,
            filler_density: 3950.0,
            filler_heat_capacity: 880.0,
            filler_particle_radius: 0.0015875,
            shape_factor: 3.0,
            convective_coefficient: 150.0,
            flow_exponent: 0.0,
            reference_flow: 0.4,
            wall_loss_coefficient: 0.0,
            ambient_temp: 298.15,
        }
    }
}

impl BedConfig {
    /// Checks the invariants required on the simulation entry path. The raw
    /// right-hand side works on any two-node-or-larger state and does not
    /// call this, which keeps hand-built miniature configurations usable in
    /// oracles.
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("radius", self.radius),
            ("height", self.height),
            ("fluid_density", self.fluid_density),
            ("fluid_heat_capacity", self.fluid_heat_capacity),
            ("filler_density", self.filler_density),
            ("filler_heat_capacity", self.filler_heat_capacity),
            ("filler_particle_radius", self.filler_particle_radius),
            ("shape_factor", self.shape_factor),
            ("convective_coefficient", self.convective_coefficient),
            ("ambient_temp", self.ambient_temp),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("must be strictly positive, got {v}"),
                });
            }
        }
        if !(self.porosity.is_finite() && self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(CoreError::Parameter {
                name: "porosity",
                reason: format!("must lie in (0, 1), got {}", self.porosity),
            });
        }
        if self.n_nodes < 3 {
            return Err(CoreError::Parameter {
                name: "n_nodes",
                reason: format!("must be at least 3, got {}", self.n_nodes),
            });
        }
        if !(self.wall_loss_coefficient.is_finite() && self.wall_loss_coefficient >= 0.0) {
            return Err(CoreError::Parameter {
                name: "wall_loss_coefficient",
                reason: format!("must be non-negative, got {}", self.wall_loss_coefficient),
            });
        }
        if !(self.flow_exponent.is_finite() && self.flow_exponent >= 0.0) {
            return Err(CoreError::Parameter {
                name: "flow_exponent",
                reason: format!("must be non-negative, got {}", self.flow_exponent),
            });
        }
        if self.flow_exponent > 0.0 && !(self.reference_flow.is_finite() && self.reference_flow > 0.0)
        {
            return Err(CoreError::Parameter {
                name: "reference_flow",
                reason: format!(
                    "must be strictly positive when flow_exponent > 0, got {}",
                    self.reference_flow
                ),
            });
        }
        Ok(())
    }

    /// Flow cross-section πR², m².
    pub fn cross_section(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }

    /// Filler heat-transfer surface area per unit bed length,
    /// f_s·πR²·(1−ε)/r_fill, m²/m.
    pub fn filler_surface_per_length(&self) -> f64 {
        self.shape_factor * self.cross_section() * (1.0 - self.porosity)
            / self.filler_particle_radius
    }

    /// Interstitial fluid velocity for a signed mass flow, m/s.
    pub fn fluid_velocity(&self, mass_flow: f64) -> f64 {
        mass_flow / (self.fluid_density * self.porosity * self.cross_section())
    }

    /// Effective convective coefficient at a given mass flow.
    pub fn effective_h_c(&self, mass_flow: f64) -> f64 {
        if self.flow_exponent == 0.0 {
            self.convective_coefficient
        } else {
            self.convective_coefficient
                * (mass_flow.abs() / self.reference_flow).powf(self.flow_exponent)
        }
    }

    /// Axial node spacing, m.
    pub fn node_spacing(&self) -> f64 {
        self.height / self.n_nodes as f64
    }
}

/// Lumped glycol heat-exchanger and bypass-valve parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GhxConfig {
    /// Heat-exchanger effectiveness, dimensionless in (0, 1].
    pub effectiveness: f64,
    /// Glycol-side inlet temperature, K.
    pub glycol_inlet_temp: f64,
    /// Glycol-side capacity rate ṁ·c_p, W/K.
    pub glycol_capacity_rate: f64,
    /// First-order lag of the valve split, s.
    pub valve_time_constant: f64,
    /// Specific heat of the storage-loop fluid, J/(kg·K); sets the
    /// Therminol-side capacity rate from the GHX-path mass flow.
    pub fluid_heat_capacity: f64,
}

impl Default for GhxConfig {
    fn default() -> Self {
        GhxConfig {
            effectiveness: 0.85,
            glycol_inlet_temp: 288.15,
            glycol_capacity_rate: 120.0,
            valve_time_constant: 15.0,
            fluid_heat_capacity: 2100.0,
        }
    }
}

impl GhxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.effectiveness.is_finite() && self.effectiveness > 0.0 && self.effectiveness <= 1.0)
        {
            return Err(CoreError::Parameter {
                name: "effectiveness",
                reason: format!("must lie in (0, 1], got {}", self.effectiveness),
            });
        }
        let positives = [
            ("glycol_inlet_temp", self.glycol_inlet_temp),
            ("glycol_capacity_rate", self.glycol_capacity_rate),
            ("valve_time_constant", self.valve_time_constant),
            ("fluid_heat_capacity", self.fluid_heat_capacity),
        ];
        for (name, v) in positives {
            if !(v.is_finite() && v > 0.0) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("must be strictly positive, got {v}"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        BedConfig::default().validate().unwrap();
        GhxConfig::default().validate().unwrap();
    }

    #[test]
    fn bed_invariants_rejected() {
        let mut cfg = BedConfig {
            porosity: 1.0,
            ..BedConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.porosity = 0.39;
        cfg.n_nodes = 2;
        assert!(cfg.validate().is_err());
        cfg.n_nodes = 40;
        cfg.convective_coefficient = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn ghx_invariants_rejected() {
        let mut cfg = GhxConfig {
            effectiveness: 1.2,
            ..GhxConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg.effectiveness = 0.9;
        cfg.valve_time_constant = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_geometry_matches_hand_values() {
        let cfg = BedConfig {
            radius: (1.0 / std::f64::consts::PI).sqrt(),
            height: 2.0,
            n_nodes: 2,
            porosity: 0.5,
            fluid_density: 1.0,
            fluid_heat_capacity: 1.0,
            filler_density: 1.0,
            filler_heat_capacity: 1.0,
            filler_particle_radius: 1.0,
            shape_factor: 2.0,
            ..BedConfig::default()
        };
        assert!((cfg.cross_section() - 1.0).abs() < 1e-15);
        assert!((cfg.filler_surface_per_length() - 1.0).abs() < 1e-15);
        assert!((cfg.node_spacing() - 1.0).abs() < 1e-15);
        assert!((cfg.fluid_velocity(0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn flow_correlation_scales_h_c() {
        let cfg = BedConfig {
            flow_exponent: 0.6,
            reference_flow: 0.4,
            ..BedConfig::default()
        };
        assert!((cfg.effective_h_c(0.4) - 150.0).abs() < 1e-12);
        let doubled = cfg.effective_h_c(0.8);
        assert!((doubled - 150.0 * 2.0_f64.powf(0.6)).abs() < 1e-9);
        let constant = BedConfig::default();
        assert_eq!(constant.effective_h_c(0.05), 150.0);
    }
}
