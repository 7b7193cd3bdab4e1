//! Pure re-evaluation of trained surrogates into tabular reports.
//!
//! [`evaluate_all`] takes finished models and fixed evaluation data and
//! produces the same [`Report`] every time it is called: no training, no
//! file writes, and band sampling keyed to a per-table-cell stream child so
//! the rows never depend on evaluation order. [`write_report`] serializes a
//! report with a stable layout, so regenerating from the same inputs yields
//! byte-identical files.

use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::active::{trajectory_rmse, AlState, Surrogate};
use crate::error::{CoreError, Result};
use crate::io::{fmt_f64, write_json};
use crate::mvg::{coverage, predictive_band};
use crate::rng::RngStream;
use crate::types::{Dataset, Trajectory, N_GHX_STATES};

use super::pseudo::PseudoExperiment;

/// A trained surrogate under the id its artifacts are filed by.
#[derive(Debug, Clone)]
pub struct EvalModel {
    pub run_id: String,
    pub surrogate: Surrogate,
}

/// Per-channel prediction error of one model on one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseRow {
    pub run_id: String,
    pub family: String,
    /// `sim:<id>` for a held-out simulation, `experiment` for the
    /// pseudo-experimental run.
    pub target: String,
    pub rmse_m: f64,
    pub rmse_q: f64,
}

/// Fraction of reference steps inside a model's 95% predictive band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub run_id: String,
    pub target: String,
    pub coverage_m: f64,
    pub coverage_q: f64,
}

/// Endpoint summary of one selection run; the full curve lives in the
/// referenced history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub run_id: String,
    pub family: String,
    pub strategy: String,
    pub history_file: String,
    pub rounds: usize,
    pub final_selected: usize,
    pub final_rmse_m: f64,
    pub final_rmse_q: f64,
    pub cum_wall_s: f64,
}

impl CurveSummary {
    /// Summarizes a finished run from its recorded history.
    pub fn from_state(
        run_id: impl Into<String>,
        family: impl Into<String>,
        strategy: impl Into<String>,
        history_file: impl Into<String>,
        state: &AlState,
    ) -> Result<Self> {
        Self::from_history(run_id, family, strategy, history_file, state.history())
    }

    /// Same summary from a history read back out of its CSV.
    pub fn from_history(
        run_id: impl Into<String>,
        family: impl Into<String>,
        strategy: impl Into<String>,
        history_file: impl Into<String>,
        history: &[crate::active::RoundRecord],
    ) -> Result<Self> {
        let last = history.last().ok_or(CoreError::InsufficientData {
            context: "selection history",
            minimum: 1,
            actual: 0,
        })?;
        Ok(CurveSummary {
            run_id: run_id.into(),
            family: family.into(),
            strategy: strategy.into(),
            history_file: history_file.into(),
            rounds: history.len(),
            final_selected: last.n_selected,
            final_rmse_m: last.rmse_m,
            final_rmse_q: last.rmse_q,
            cum_wall_s: last.cum_wall_s,
        })
    }
}

/// Every table a run reports, plus the configuration echo and seeds needed
/// to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rmse: Vec<RmseRow>,
    pub coverage: Vec<CoverageRow>,
    pub curves: Vec<CurveSummary>,
    pub seeds: Vec<u64>,
    pub config_echo: serde_json::Value,
}

fn rmse_row(model: &EvalModel, target: String, traj: &Trajectory) -> Result<RmseRow> {
    let [rmse_m, rmse_q] = trajectory_rmse(&model.surrogate, traj)?;
    Ok(RmseRow {
        run_id: model.run_id.clone(),
        family: model.surrogate.family().to_string(),
        target,
        rmse_m,
        rmse_q,
    })
}

fn coverage_row(
    model: &EvalModel,
    target: String,
    traj: &Trajectory,
    band_samples: usize,
    stream: &RngStream,
) -> Result<Option<CoverageRow>> {
    let Surrogate::Mvg(mvg) = &model.surrogate else {
        return Ok(None);
    };
    let x0 = DVector::from_column_slice(&traj.ghx[0].as_array());
    let n = traj.n_steps();
    let band = match predictive_band(
        mvg,
        &x0,
        &traj.controls,
        &traj.grid,
        band_samples,
        &stream.child(format!("band/{}/{}", model.run_id, target)),
    ) {
        Ok(band) => band,
        Err(CoreError::Instability { divergent, total }) => {
            log::warn!(
                "skipping coverage of {} on {target}: {divergent} of {total} rollouts diverged",
                model.run_id
            );
            return Ok(None);
        }
        Err(e) => return Err(e),
    };
    let reference = DMatrix::from_fn(n, N_GHX_STATES, |i, c| traj.ghx[i].as_array()[c]);
    let cov = coverage(&band, &reference)?;
    Ok(Some(CoverageRow {
        run_id: model.run_id.clone(),
        target,
        coverage_m: cov[0],
        coverage_q: cov[1],
    }))
}

/// Evaluates every model on every held-out simulation and on the denoised
/// pseudo-experiment, and measures band coverage for the probabilistic
/// models. Pure: same inputs and stream give the same report, and nothing is
/// trained or written.
///
/// Selection curves, seeds, and the configuration echo belong to the run
/// that produced the models, so they come back empty here and are filled in
/// by the caller.
pub fn evaluate_all(
    models: &[EvalModel],
    eval_set: &Dataset,
    pseudo: &PseudoExperiment,
    band_samples: usize,
    stream: &RngStream,
) -> Result<Report> {
    let mut rmse = Vec::new();
    let mut cov = Vec::new();
    for model in models {
        for traj in eval_set.trajectories() {
            rmse.push(rmse_row(model, format!("sim:{}", traj.id), traj)?);
        }
        rmse.push(rmse_row(model, "experiment".to_string(), &pseudo.denoised)?);
        for traj in eval_set.trajectories() {
            let target = format!("sim:{}", traj.id);
            if let Some(row) = coverage_row(model, target, traj, band_samples, stream)? {
                cov.push(row);
            }
        }
        if let Some(row) = coverage_row(
            model,
            "experiment".to_string(),
            &pseudo.denoised,
            band_samples,
            stream,
        )? {
            cov.push(row);
        }
    }
    Ok(Report {
        rmse,
        coverage: cov,
        curves: Vec::new(),
        seeds: Vec::new(),
        config_echo: serde_json::Value::Null,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let file =
        std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))
}

fn rmse_csv(rows: &[RmseRow]) -> Vec<String> {
    let mut lines = vec!["run_id,family,target,rmse_m,rmse_q".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{}",
            r.run_id,
            r.family,
            r.target,
            fmt_f64(r.rmse_m),
            fmt_f64(r.rmse_q)
        ));
    }
    lines
}

fn coverage_csv(rows: &[CoverageRow]) -> Vec<String> {
    let mut lines = vec!["run_id,target,coverage_m,coverage_q".to_string()];
    for r in rows {
        lines.push(format!(
            "{},{},{},{}",
            r.run_id,
            r.target,
            fmt_f64(r.coverage_m),
            fmt_f64(r.coverage_q)
        ));
    }
    lines
}

fn curves_csv(rows: &[CurveSummary]) -> Vec<String> {
    let mut lines = vec![
        "run_id,family,strategy,history_file,rounds,final_selected,final_rmse_m,final_rmse_q,cum_wall_s"
            .to_string(),
    ];
    for r in rows {
        lines.push(format!(
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.family,
            r.strategy,
            r.history_file,
            r.rounds,
            r.final_selected,
            fmt_f64(r.final_rmse_m),
            fmt_f64(r.final_rmse_q),
            fmt_f64(r.cum_wall_s)
        ));
    }
    lines
}

fn markdown(report: &Report) -> Vec<String> {
    let mut md = Vec::new();
    md.push("# Evaluation report".to_string());
    md.push(String::new());
    md.push(format!("Seeds: {:?}", report.seeds));
    md.push(String::new());
    md.push("## Prediction error".to_string());
    md.push(String::new());
    md.push("| model | family | target | rmse_m | rmse_q |".to_string());
    md.push("|---|---|---|---|---|".to_string());
    for r in &report.rmse {
        md.push(format!(
            "| {} | {} | {} | {} | {} |",
            r.run_id,
            r.family,
            r.target,
            fmt_f64(r.rmse_m),
            fmt_f64(r.rmse_q)
        ));
    }
    md.push(String::new());
    md.push("## 95% band coverage".to_string());
    md.push(String::new());
    if report.coverage.is_empty() {
        md.push("No probabilistic models evaluated.".to_string());
    } else {
        md.push("| model | target | coverage_m | coverage_q |".to_string());
        md.push("|---|---|---|---|".to_string());
        for r in &report.coverage {
            md.push(format!(
                "| {} | {} | {} | {} |",
                r.run_id,
                r.target,
                fmt_f64(r.coverage_m),
                fmt_f64(r.coverage_q)
            ));
        }
    }
    md.push(String::new());
    md.push("## Selection runs".to_string());
    md.push(String::new());
    if report.curves.is_empty() {
        md.push("No selection runs recorded.".to_string());
    } else {
        md.push(
            "| run | family | strategy | rounds | selected | final rmse_m | final rmse_q | wall s | history |"
                .to_string(),
        );
        md.push("|---|---|---|---|---|---|---|---|---|".to_string());
        for r in &report.curves {
            md.push(format!(
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                r.run_id,
                r.family,
                r.strategy,
                r.rounds,
                r.final_selected,
                fmt_f64(r.final_rmse_m),
                fmt_f64(r.final_rmse_q),
                fmt_f64(r.cum_wall_s),
                r.history_file
            ));
        }
    }
    md.push(String::new());
    md.push("## Configuration".to_string());
    md.push(String::new());
    md.push("```json".to_string());
    let cfg = serde_json::to_string_pretty(&report.config_echo).unwrap_or_else(|_| "null".into());
    md.extend(cfg.lines().map(str::to_string));
    md.push("```".to_string());
    md
}

/// Checks that every id a report row cites resolves to at least one artifact
/// in the manifest, and every cited history file is itself listed.
pub fn verify_provenance(report: &Report, manifest: &super::RunManifest) -> Result<()> {
    let missing_id = |run_id: &str| manifest.find(run_id).is_empty();
    let mut orphans = Vec::new();
    for r in &report.rmse {
        if missing_id(&r.run_id) {
            orphans.push(format!("rmse row {} on {}", r.run_id, r.target));
        }
    }
    for c in &report.coverage {
        if missing_id(&c.run_id) {
            orphans.push(format!("coverage row {} on {}", c.run_id, c.target));
        }
    }
    for curve in &report.curves {
        if missing_id(&curve.run_id) {
            orphans.push(format!("curve {}", curve.run_id));
        } else if !manifest
            .find(&curve.run_id)
            .iter()
            .any(|a| a.file == curve.history_file)
        {
            orphans.push(format!(
                "curve {} cites unlisted history {}",
                curve.run_id, curve.history_file
            ));
        }
    }
    if orphans.is_empty() {
        Ok(())
    } else {
        Err(CoreError::Manifest(format!(
            "report rows without artifacts: {}",
            orphans.join("; ")
        )))
    }
}

/// Writes `report.json`, `rmse.csv`, `coverage.csv`, `curves.csv`, and
/// `report.md` under `dir` with a stable layout.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    write_json(report, &dir.join("report.json"))?;
    write_lines(&dir.join("rmse.csv"), &rmse_csv(&report.rmse))?;
    write_lines(&dir.join("coverage.csv"), &coverage_csv(&report.coverage))?;
    write_lines(&dir.join("curves.csv"), &curves_csv(&report.curves))?;
    write_lines(&dir.join("report.md"), &markdown(report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::mvg::{build_ensemble, fit_mvg};
    use crate::sim::{generate_dataset, BedConfig, GhxConfig, InitialProfile, ScheduleBounds};
    use crate::sindy::{fit_sindyc, StlsqConfig};
    use crate::types::Provenance;

    use super::super::pseudo::{make_pseudo_experiment, NoiseSpec, PerturbationSpec};
    use crate::sim::generate_schedules;

    fn small_world() -> (Dataset, Dataset, PseudoExperiment) {
        let grid = TimeGrid::new(0.0, 5.0, 80).unwrap();
        let bed = BedConfig {
            n_nodes: 12,
            ..BedConfig::default()
        };
        let ghx = GhxConfig::default();
        let profile = InitialProfile::default();
        let bounds = ScheduleBounds::default();
        let stream = RngStream::new(21, "report-test");
        let data = generate_dataset(
            10,
            &bounds,
            &grid,
            60.0,
            &bed,
            &ghx,
            &profile,
            &stream.child("data"),
        )
        .unwrap();
        let ids = data.ids();
        let (pool_ids, eval_ids) = ids.split_at(8);
        let pool = data.subset(pool_ids).unwrap();
        let eval = data.subset(eval_ids).unwrap();
        let schedule = generate_schedules(1, &bounds, &grid, 60.0, &stream.child("exp"))
            .unwrap()
            .remove(0);
        let pseudo = make_pseudo_experiment(
            10,
            &schedule,
            &profile,
            &bed,
            &ghx,
            &grid,
            &PerturbationSpec::default(),
            &NoiseSpec::default(),
            &stream.child("pseudo"),
        )
        .unwrap();
        (pool, eval, pseudo)
    }

    fn models(pool: &Dataset) -> Vec<EvalModel> {
        let fit = fit_sindyc(pool, StlsqConfig::ghx()).unwrap();
        let ensemble = build_ensemble(
            pool,
            24,
            4,
            StlsqConfig::ghx(),
            &RngStream::new(21, "report-test/ensemble"),
        )
        .unwrap();
        let mvg = fit_mvg(&ensemble, None).unwrap();
        vec![
            EvalModel {
                run_id: "sindyc".to_string(),
                surrogate: Surrogate::Sindyc(fit),
            },
            EvalModel {
                run_id: "mvg".to_string(),
                surrogate: Surrogate::Mvg(mvg),
            },
        ]
    }

    #[test]
    fn evaluation_is_pure_and_reports_every_pair() {
        let (pool, eval, pseudo) = small_world();
        let models = models(&pool);
        let stream = RngStream::new(21, "report-test/eval");
        let report = evaluate_all(&models, &eval, &pseudo, 120, &stream).unwrap();
        let again = evaluate_all(&models, &eval, &pseudo, 120, &stream).unwrap();
        assert_eq!(report, again);
        assert_eq!(report.rmse.len(), models.len() * (eval.len() + 1));
        assert!(report
            .rmse
            .iter()
            .all(|r| r.rmse_m.is_finite() && r.rmse_q.is_finite()));
        let mvg_rows = report.coverage.iter().filter(|c| c.run_id == "mvg").count();
        assert_eq!(report.coverage.len(), mvg_rows);
        assert!(report
            .coverage
            .iter()
            .all(|c| (0.0..=1.0).contains(&c.coverage_m) && (0.0..=1.0).contains(&c.coverage_q)));
    }

    #[test]
    fn written_report_is_byte_identical_on_regeneration() {
        let (pool, eval, pseudo) = small_world();
        let models = models(&pool);
        let stream = RngStream::new(21, "report-test/eval");
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        let mut report = evaluate_all(&models, &eval, &pseudo, 120, &stream).unwrap();
        report.seeds = vec![21];
        report.config_echo = serde_json::json!({"band_samples": 120});
        write_report(&report, &dir_a).unwrap();
        let report_again = {
            let mut r = evaluate_all(&models, &eval, &pseudo, 120, &stream).unwrap();
            r.seeds = vec![21];
            r.config_echo = serde_json::json!({"band_samples": 120});
            r
        };
        write_report(&report_again, &dir_b).unwrap();
        for name in ["report.json", "rmse.csv", "coverage.csv", "curves.csv", "report.md"] {
            let a = std::fs::read(dir_a.join(name)).unwrap();
            let b = std::fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between regenerations");
        }
    }

    #[test]
    fn training_trajectory_error_does_not_exceed_held_out() {
        let (pool, eval, _pseudo) = small_world();
        let own = pool.subset(&pool.ids()[..4]).unwrap();
        let fit = fit_sindyc(&own, StlsqConfig::ghx()).unwrap();
        let model = Surrogate::Sindyc(fit);
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let train_q: Vec<f64> = own
            .trajectories()
            .iter()
            .map(|t| trajectory_rmse(&model, t).unwrap()[1])
            .collect();
        let held_q: Vec<f64> = eval
            .trajectories()
            .iter()
            .map(|t| trajectory_rmse(&model, t).unwrap()[1])
            .collect();
        assert!(
            median(train_q) <= median(held_q) * 1.05,
            "training error should not exceed held-out error"
        );
    }

    #[test]
    fn rmse_rows_respect_provenance_targets() {
        let (pool, eval, pseudo) = small_world();
        let models = models(&pool);
        let stream = RngStream::new(21, "report-test/eval");
        let report = evaluate_all(&models, &eval, &pseudo, 120, &stream).unwrap();
        assert_eq!(pseudo.denoised.provenance, Provenance::PseudoExperimental);
        for traj in eval.trajectories() {
            assert_eq!(traj.provenance, Provenance::Simulated);
            assert!(report.rmse.iter().any(|r| r.target == format!("sim:{}", traj.id)));
        }
        assert!(report.rmse.iter().any(|r| r.target == "experiment"));
    }
}
