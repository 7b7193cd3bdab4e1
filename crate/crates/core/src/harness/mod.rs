//! Evaluation and comparison harness.
//!
//! Ties the other modules into reproducible experiments: pseudo-experimental
//! runs standing in for the rig ([`pseudo`]), pure re-evaluation of trained
//! surrogates into tabular reports ([`report`]), and the end-to-end
//! comparison pipeline that trains every family, races informed selection
//! against random, and writes all artifacts to a run directory
//! ([`compare`]).
//!
//! Every artifact a run produces is listed in its [`RunManifest`] with a
//! content hash, so any number in a report can be traced back to the file it
//! was computed from and a finished run can be audited without re-executing
//! it.

pub mod compare;
pub mod pseudo;
pub mod report;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use compare::{
    regenerate_report, run_compare, CompareConfig, EnsembleConfig, PoolConfig, PseudoConfig,
};
pub use pseudo::{make_pseudo_experiment, NoiseSpec, PerturbationSpec, PseudoExperiment};
pub use report::{
    evaluate_all, verify_provenance, write_report, CoverageRow, CurveSummary, EvalModel, Report,
    RmseRow,
};

/// One file a run produced, identified by the id other tables use to refer
/// to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub run_id: String,
    pub kind: String,
    /// Path relative to the run directory.
    pub file: String,
    pub sha256: String,
}

/// Everything needed to audit a finished run: the seed, the exact
/// configuration it ran with, and every artifact it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: Vec<ArtifactRecord>,
}

impl RunManifest {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Registers a file under `run_id`, hashing its current contents.
    pub fn record(
        &mut self,
        run_id: impl Into<String>,
        kind: impl Into<String>,
        dir: &std::path::Path,
        file: impl Into<String>,
    ) -> Result<()> {
        let file = file.into();
        let sha256 = crate::io::sha256_file(&dir.join(&file))?;
        self.artifacts.push(ArtifactRecord {
            run_id: run_id.into(),
            kind: kind.into(),
            file,
            sha256,
        });
        Ok(())
    }

    /// All records filed under `run_id`.
    pub fn find(&self, run_id: &str) -> Vec<&ArtifactRecord> {
        self.artifacts.iter().filter(|a| a.run_id == run_id).collect()
    }

    /// Checks that every listed artifact exists under `dir` with the
    /// recorded hash.
    pub fn verify(&self, dir: &std::path::Path) -> Result<()> {
        for record in &self.artifacts {
            let path = dir.join(&record.file);
            let actual = crate::io::sha256_file(&path)?;
            if actual != record.sha256 {
                return Err(CoreError::Manifest(format!(
                    "artifact {} ({}) hash mismatch: manifest {} vs file {}",
                    record.file, record.run_id, record.sha256, actual
                )));
            }
        }
        Ok(())
    }
}
