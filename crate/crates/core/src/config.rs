//! Run configuration: one TOML file per run, with every default made
//! explicit by [`RunConfig::resolved`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::effective_model::{Blend, ModelRun};
use crate::error::{HomogError, Result};
use crate::field::FieldSpec;
use crate::grid::GridSpec;
use crate::strip_measure::FIT_TOLERANCE;
use crate::torus_cell::{CENTERING_TOLERANCE, SOLVER_TOLERANCE};
use crate::verify::SimSettings;

/// Nodes per period used when the configuration names no grid.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Acceptance thresholds for the deterministic solves.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverTolerances {
    /// Relative residual of the density solves.
    pub residual: f64,
    /// `|∫ b dμ|` of either tail.
    pub centering: f64,
    /// Relative residual of the cell-mass fit.
    pub fit: f64,
}

impl Default for SolverTolerances {
    fn default() -> Self {
        Self {
            residual: SOLVER_TOLERANCE,
            centering: CENTERING_TOLERANCE,
            fit: FIT_TOLERANCE,
        }
    }
}

impl SolverTolerances {
    /// Checks the achieved residuals of a model run.
    pub fn check(&self, run: &ModelRun) -> Result<()> {
        let fail = |context: &str, residual: f64, tolerance: f64| {
            Err(HomogError::Residual {
                context: context.to_string(),
                residual,
                tolerance,
            })
        };
        for (side, cell) in [("plus", &run.plus), ("minus", &run.minus)] {
            if cell.density.residual > self.residual {
                return fail(&format!("{side} density"), cell.density.residual, self.residual);
            }
            let c = cell.centering.iter().map(|v| v * v).sum::<f64>().sqrt();
            if c > self.centering {
                return fail(&format!("{side} centering"), c, self.centering);
            }
        }
        if run.strip.residual > self.residual {
            return fail("strip measure", run.strip.residual, self.residual);
        }
        if run.strip.fit.residual > self.fit {
            return fail("cell-mass fit", run.strip.fit.residual, self.fit);
        }
        Ok(())
    }
}

/// Everything a command needs; flags on the command line override keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub field: FieldSpec,
    /// Defaults to 64 nodes per period and a strip reaching 8 periods past
    /// the interface.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub blend: Blend,
    #[serde(default)]
    pub solver: SolverTolerances,
    #[serde(default)]
    pub simulation: SimSettings,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn new(field: FieldSpec) -> Self {
        Self {
            field,
            grid: None,
            blend: Blend::default(),
            solver: SolverTolerances::default(),
            simulation: SimSettings::default(),
            output: default_output(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HomogError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HomogError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HomogError::Config(e.to_string()))
    }

    /// The configuration with the grid filled in from the field.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        if out.grid.is_none() {
            let field = self.field.build()?;
            out.grid = Some(GridSpec::uniform(
                field.dimension(),
                DEFAULT_RESOLUTION,
                GridSpec::default_strip_half_width(field.half_width()),
            ));
        }
        Ok(out)
    }

    /// The grid, resolving the default when absent.
    pub fn grid(&self) -> Result<GridSpec> {
        Ok(self.resolved()?.grid.expect("resolved config has a grid"))
    }

    /// SHA-256 of the resolved configuration's TOML form. The output
    /// directory does not affect results and is left out.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.resolved()?;
        c.output = PathBuf::new();
        let text = c.to_toml()?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut c = RunConfig::new(FieldSpec::builtin("two_sided").with_param("a_plus", 0.25));
        c.simulation.eps = vec![0.2, 0.1];
        c.simulation.x0 = Some(vec![0.0, 0.5]);
        c.simulation.dt = Some(1e-4);
        let c = c.resolved().unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_toml("[field]\nbuiltin = \"zero\"\n").unwrap();
        let r = c.resolved().unwrap();
        let g = r.grid.clone().unwrap();
        assert_eq!(g.resolution, vec![64, 64]);
        assert_eq!(g.strip_half_width, 9);
        assert_eq!(r.simulation.eps, vec![0.1, 0.05, 0.025]);
        assert_eq!(c.hash().unwrap(), r.hash().unwrap());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[field]\nbuiltin = \"zero\"\n[simulation]\nepsilon = 1\n").is_err());
    }
}
