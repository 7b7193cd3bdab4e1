//! On-disk formats: trajectory CSV, dataset manifest JSON, and file hashing.
//!
//! CSV files use the fixed column set `t` plus [`CHANNEL_NAMES`], `.` decimal
//! points, LF line endings, and full round-trip float precision. A dataset on
//! disk is a manifest JSON describing the grid, seed, and per-trajectory
//! files, next to one CSV per trajectory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::types::{Dataset, Provenance, Trajectory, N_CHANNELS};

/// Header line of every trajectory CSV.
pub const TRAJECTORY_CSV_HEADER: &str =
    "t,pv006,m_pump_out,t_pump_in,t_heater_out,m_ghx,q_ghx,m_tes_in,t_tes_out,t_top,t_mid,t_bot";

/// Formats a float with enough digits to round-trip exactly.
///
/// Uses the shortest representation that parses back to the same bits, which
/// is what Rust's float Display already guarantees.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes one trajectory as CSV.
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path.display().to_string(), e);
    writeln!(w, "{TRAJECTORY_CSV_HEADER}").map_err(io_err)?;
    for i in 0..traj.n_steps() {
        let mut fields = Vec::with_capacity(1 + N_CHANNELS);
        fields.push(fmt_f64(traj.grid.time(i)));
        for c in 0..N_CHANNELS {
            fields.push(fmt_f64(traj.value(i, c)));
        }
        writeln!(w, "{}", fields.join(",")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a trajectory CSV written by [`write_trajectory_csv`].
///
/// The time column is used to recover the grid (uniform spacing is checked);
/// id and provenance come from the manifest, so callers pass them in.
pub fn read_trajectory_csv(path: &Path, id: usize, provenance: Provenance) -> Result<Trajectory> {
    let file = fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let display = path.display().to_string();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Csv {
            path: display.clone(),
            reason: "empty file".to_string(),
        })?
        .map_err(|e| CoreError::io(display.clone(), e))?;
    if header.trim_end() != TRAJECTORY_CSV_HEADER {
        return Err(CoreError::Csv {
            path: display,
            reason: format!("unexpected header '{header}'"),
        });
    }

    let mut times = Vec::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); N_CHANNELS];
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| CoreError::io(display.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + N_CHANNELS {
            return Err(CoreError::Csv {
                path: display,
                reason: format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    1 + N_CHANNELS,
                    fields.len()
                ),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| CoreError::Csv {
                path: display.clone(),
                reason: format!("row {}: unparsable number '{s}'", lineno + 2),
            })
        };
        times.push(parse(fields[0])?);
        for c in 0..N_CHANNELS {
            let v = parse(fields[c + 1])?;
            columns[c].push(v);
        }
    }
    if times.len() < 2 {
        return Err(CoreError::Csv {
            path: display,
            reason: format!("needs at least 2 rows, got {}", times.len()),
        });
    }
    let dt = times[1] - times[0];
    for (i, pair) in times.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
            return Err(CoreError::Csv {
                path: display,
                reason: format!("non-uniform time step at row {}", i + 3),
            });
        }
    }
    let grid = TimeGrid::new(times[0], dt, times.len())?;
    Trajectory::from_columns(id, provenance, grid, &columns)
}

/// One trajectory entry in a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub provenance: Provenance,
    /// CSV path relative to the manifest file.
    pub file: String,
    /// SHA-256 of the CSV file contents, hex.
    pub sha256: String,
}

/// Dataset manifest: grid, generator seed, and per-trajectory files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub grid: TimeGrid,
    pub seed: u64,
    pub trajectories: Vec<ManifestEntry>,
}

/// SHA-256 of a file's bytes, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes a dataset as `manifest.json` plus one `traj_<id>.csv` per
/// trajectory, all inside `dir` (created if absent). Returns the manifest
/// path.
pub fn write_dataset(dataset: &Dataset, seed: u64, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for traj in dataset {
        let name = format!("traj_{:05}.csv", traj.id);
        let csv_path = dir.join(&name);
        write_trajectory_csv(traj, &csv_path)?;
        entries.push(ManifestEntry {
            id: traj.id,
            provenance: traj.provenance,
            file: name,
            sha256: sha256_file(&csv_path)?,
        });
    }
    let manifest = DatasetManifest {
        grid: dataset.grid(),
        seed,
        trajectories: entries,
    };
    let path = dir.join("manifest.json");
    write_json(&manifest, &path)?;
    Ok(path)
}

/// Loads a dataset from its manifest, verifying the recorded hashes.
pub fn read_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut trajectories = Vec::with_capacity(manifest.trajectories.len());
    for entry in &manifest.trajectories {
        let csv_path = dir.join(&entry.file);
        if !csv_path.exists() {
            return Err(CoreError::Manifest(format!(
                "missing trajectory file {}",
                csv_path.display()
            )));
        }
        let actual = sha256_file(&csv_path)?;
        if actual != entry.sha256 {
            return Err(CoreError::Manifest(format!(
                "hash mismatch for {}: manifest {} vs file {}",
                csv_path.display(),
                entry.sha256,
                actual
            )));
        }
        let traj = read_trajectory_csv(&csv_path, entry.id, entry.provenance)?;
        if traj.grid != manifest.grid {
            return Err(CoreError::Manifest(format!(
                "grid mismatch between manifest and {}",
                csv_path.display()
            )));
        }
        trajectories.push(traj);
    }
    Dataset::new(trajectories)
}

/// Serializes any value as pretty JSON at `path`.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| CoreError::io(parent.display().to_string(), e))?;
        }
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::json(path.display().to_string(), e))?;
    fs::write(path, text + "\n").map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Deserializes a JSON file at `path`.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::json(path.display().to_string(), e))
}
