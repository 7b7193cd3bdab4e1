//! The end-to-end comparison pipeline.
//!
//! One call generates a simulation pool, stands up a pseudo-experiment,
//! trains every surrogate family on the full pool, races informed selection
//! against its random baseline per family, and writes datasets, model
//! artifacts, selection histories, and the final report into a run
//! directory. Every file is listed in the returned [`RunManifest`] with its
//! content hash.
//!
//! All randomness descends from one seed through labeled stream children, so
//! a finished run can be reproduced file for file by running the same
//! configuration again.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::active::{
    run_comparison, write_history_csv, AlProblem, CovarianceSource, EvalContext, LoopConfig,
    QueryStrategy, ScoreTarget, Surrogate,
};
use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::io::{write_dataset, write_json, write_trajectory_csv};
use crate::mvg::{build_ensemble, fit_mvg, predictive_band, write_band_csv, MvgArtifact};
use crate::neural::{train_surrogate, NeuralArtifact, SurrogateKind, TrainConfig};
use crate::rng::RngStream;
use crate::sim::{
    generate_dataset, generate_schedules, BedConfig, GhxConfig, InitialProfile, ScheduleBounds,
};
use crate::sindy::{fit_sindyc, ModelArtifact, StlsqConfig};
use crate::types::Dataset;

use super::pseudo::{make_pseudo_experiment, NoiseSpec, PerturbationSpec};
use super::report::{evaluate_all, write_report, CurveSummary, EvalModel};
use super::RunManifest;

/// Simulation pool settings: how many runs, how they are driven, and the
/// physics they are integrated under. The last `n_eval` trajectories are
/// held out for evaluation and never enter a candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub n_total: usize,
    pub n_eval: usize,
    pub stagger_gap: f64,
    pub grid: TimeGrid,
    pub bounds: ScheduleBounds,
    pub profile: InitialProfile,
    pub bed: BedConfig,
    pub ghx: GhxConfig,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            n_total: 86,
            n_eval: 6,
            stagger_gap: 60.0,
            grid: TimeGrid::new(0.0, 5.0, 160).expect("static grid"),
            bounds: ScheduleBounds::default(),
            profile: InitialProfile::default(),
            bed: BedConfig {
                n_nodes: 24,
                ..BedConfig::default()
            },
            ghx: GhxConfig::default(),
        }
    }
}

/// How the pseudo-experiment differs from the nominal simulator.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub perturbation: PerturbationSpec,
    pub noise: NoiseSpec,
}

/// Coefficient-ensemble settings for the probabilistic family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub n_models: usize,
    pub subset_size: usize,
    pub fit: StlsqConfig,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_models: 120,
            subset_size: 4,
            fit: StlsqConfig::ghx(),
        }
    }
}

/// Full configuration of a comparison run. The defaults are the desk-scale
/// smoke settings: an 80-trajectory candidate pool, a 120-member ensemble,
/// narrow networks, few selection rounds, and zeroed wall-time columns so
/// repeated runs write identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub seed: u64,
    pub pool: PoolConfig,
    pub pseudo: PseudoConfig,
    pub ensemble: EnsembleConfig,
    pub sindyc_fit: StlsqConfig,
    pub train_fnn: TrainConfig,
    pub train_gru: TrainConfig,
    pub model_loop: LoopConfig,
    pub trajectory_loop: LoopConfig,
    pub band_samples: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            seed: 0,
            pool: PoolConfig::default(),
            pseudo: PseudoConfig::default(),
            ensemble: EnsembleConfig::default(),
            sindyc_fit: StlsqConfig::ghx(),
            train_fnn: TrainConfig {
                epochs: 30,
                ..TrainConfig::fnn().desk()
            },
            train_gru: TrainConfig {
                epochs: 8,
                ..TrainConfig::gru().desk()
            },
            model_loop: LoopConfig {
                deterministic_timing: true,
                ..LoopConfig::model_selection()
            },
            trajectory_loop: LoopConfig {
                max_rounds: 4,
                deterministic_timing: true,
                ..LoopConfig::trajectory_selection()
            },
            band_samples: 120,
        }
    }
}

impl CompareConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool.n_eval == 0 {
            return Err(CoreError::Parameter {
                name: "n_eval",
                reason: "must hold out at least 1 evaluation trajectory".to_string(),
            });
        }
        if self.pool.n_total < self.pool.n_eval + 2 {
            return Err(CoreError::Parameter {
                name: "n_total",
                reason: format!(
                    "needs at least 2 pool trajectories beyond the {} held out, got {}",
                    self.pool.n_eval, self.pool.n_total
                ),
            });
        }
        if self.band_samples < 100 {
            return Err(CoreError::Parameter {
                name: "band_samples",
                reason: format!("need at least 100 for 95% quantiles, got {}", self.band_samples),
            });
        }
        Ok(())
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Runs one paired comparison, writes both history files, and summarizes
/// both arms.
#[allow(clippy::too_many_arguments)]
fn run_pair(
    run_base: &str,
    family: &str,
    strategy_label: &str,
    problem: &AlProblem<'_>,
    strategy: &QueryStrategy,
    loop_cfg: &LoopConfig,
    eval: &EvalContext<'_>,
    stream: &RngStream,
    out: &Path,
    manifest: &mut RunManifest,
) -> Result<Vec<CurveSummary>> {
    let pair = run_comparison(problem, strategy, loop_cfg, eval, stream)?;
    let mut curves = Vec::with_capacity(2);
    for (suffix, label, state) in [
        ("al", strategy_label, &pair.al),
        ("random", "random", &pair.random),
    ] {
        let run_id = format!("{run_base}-{suffix}");
        let rel = format!("runs/{run_id}/history.csv");
        let path = out.join(&rel);
        ensure_dir(path.parent().expect("history path has a parent"))?;
        write_history_csv(state.history(), &path)?;
        manifest.record(&run_id, "history", out, &rel)?;
        curves.push(CurveSummary::from_state(&run_id, family, label, &rel, state)?);
    }
    Ok(curves)
}

/// Executes the full pipeline under `out` and returns the manifest of
/// everything it wrote. The manifest itself lands at `out/manifest.json`.
pub fn run_compare(cfg: &CompareConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let config_echo = serde_json::to_value(cfg)
        .map_err(|e| CoreError::json("compare config".to_string(), e))?;
    let stream = RngStream::new(cfg.seed, "compare");
    let mut manifest = RunManifest::new(cfg.seed, config_echo.clone());
    ensure_dir(out)?;

    log::info!("generating {} trajectories", cfg.pool.n_total);
    let data = generate_dataset(
        cfg.pool.n_total,
        &cfg.pool.bounds,
        &cfg.pool.grid,
        cfg.pool.stagger_gap,
        &cfg.pool.bed,
        &cfg.pool.ghx,
        &cfg.pool.profile,
        &stream.child("generate"),
    )?;
    write_dataset(&data, cfg.seed, &out.join("data"))?;
    manifest.record("pool", "dataset", out, "data/manifest.json")?;

    let ids = data.ids();
    let n_pool = cfg.pool.n_total - cfg.pool.n_eval;
    let pool = data.subset(&ids[..n_pool])?;
    let eval = data.subset(&ids[n_pool..])?;

    log::info!("building the pseudo-experiment");
    let schedule = generate_schedules(
        1,
        &cfg.pool.bounds,
        &cfg.pool.grid,
        cfg.pool.stagger_gap,
        &stream.child("pseudo-schedule"),
    )?
    .remove(0);
    let pseudo = make_pseudo_experiment(
        cfg.pool.n_total,
        &schedule,
        &cfg.pool.profile,
        &cfg.pool.bed,
        &cfg.pool.ghx,
        &cfg.pool.grid,
        &cfg.pseudo.perturbation,
        &cfg.pseudo.noise,
        &stream.child("pseudo"),
    )?;
    ensure_dir(&out.join("experiment"))?;
    write_trajectory_csv(&pseudo.raw, &out.join("experiment/raw.csv"))?;
    write_trajectory_csv(&pseudo.denoised, &out.join("experiment/denoised.csv"))?;
    manifest.record("experiment", "trajectory", out, "experiment/raw.csv")?;
    manifest.record("experiment", "trajectory", out, "experiment/denoised.csv")?;

    let eval_ctx = EvalContext {
        eval_set: &eval,
        experiment: &pseudo.denoised,
    };
    let mut curves = Vec::new();

    log::info!(
        "fitting the {}-member ensemble and racing model selection",
        cfg.ensemble.n_models
    );
    let ensemble_stream = stream.child("ensemble");
    let ensemble = build_ensemble(
        &pool,
        cfg.ensemble.n_models,
        cfg.ensemble.subset_size,
        cfg.ensemble.fit,
        &ensemble_stream,
    )?;
    let exp_data = Dataset::new(vec![pseudo.denoised.clone()])?;
    let reference = fit_sindyc(&exp_data, cfg.ensemble.fit)?.flatten();
    let mvg_strategy = QueryStrategy::MahalanobisCoefficientSpace {
        reference,
        covariance_source: CovarianceSource::Pool,
    };
    let model_loop = LoopConfig {
        score: ScoreTarget::Experiment,
        ..cfg.model_loop
    };
    curves.extend(run_pair(
        "mvg",
        "mvg-sindyc",
        "mahalanobis",
        &AlProblem::MvgModels {
            ensemble: &ensemble,
        },
        &mvg_strategy,
        &model_loop,
        &eval_ctx,
        &stream.child("mvg"),
        out,
        &mut manifest,
    )?);

    let error_strategy = QueryStrategy::prediction_error();
    log::info!("racing trajectory selection for the sparse family");
    curves.extend(run_pair(
        "sindyc",
        "sindyc",
        "prediction-error",
        &AlProblem::SindycTrajectories {
            pool: &pool,
            fit: cfg.sindyc_fit,
        },
        &error_strategy,
        &cfg.trajectory_loop,
        &eval_ctx,
        &stream.child("sindyc"),
        out,
        &mut manifest,
    )?);
    log::info!("racing trajectory selection for the feedforward family");
    curves.extend(run_pair(
        "fnn",
        "fnn",
        "prediction-error",
        &AlProblem::NeuralTrajectories {
            kind: SurrogateKind::Fnn,
            pool: &pool,
            train: cfg.train_fnn,
        },
        &error_strategy,
        &cfg.trajectory_loop,
        &eval_ctx,
        &stream.child("fnn"),
        out,
        &mut manifest,
    )?);
    log::info!("racing trajectory selection for the recurrent family");
    curves.extend(run_pair(
        "gru",
        "gru",
        "prediction-error",
        &AlProblem::NeuralTrajectories {
            kind: SurrogateKind::Gru,
            pool: &pool,
            train: cfg.train_gru,
        },
        &error_strategy,
        &cfg.trajectory_loop,
        &eval_ctx,
        &stream.child("gru"),
        out,
        &mut manifest,
    )?);

    log::info!("training the full-pool models");
    ensure_dir(&out.join("models"))?;
    let sindyc_model = fit_sindyc(&pool, cfg.sindyc_fit)?;
    write_json(
        &ModelArtifact::new(&sindyc_model, cfg.sindyc_fit, pool.ids()),
        &out.join("models/sindyc.json"),
    )?;
    manifest.record("sindyc", "model", out, "models/sindyc.json")?;

    let mvg_model = fit_mvg(&ensemble, None)?;
    write_json(
        &MvgArtifact::new(&mvg_model, &ensemble, &ensemble_stream),
        &out.join("models/mvg.json"),
    )?;
    manifest.record("mvg", "model", out, "models/mvg.json")?;

    let fnn_stream = stream.child("fnn-full");
    let fnn_model = train_surrogate(SurrogateKind::Fnn, &pool, &cfg.train_fnn, &fnn_stream)?;
    write_json(
        &NeuralArtifact::new(&fnn_model, cfg.train_fnn, &fnn_stream),
        &out.join("models/fnn.json"),
    )?;
    manifest.record("fnn", "model", out, "models/fnn.json")?;

    let gru_stream = stream.child("gru-full");
    let gru_model = train_surrogate(SurrogateKind::Gru, &pool, &cfg.train_gru, &gru_stream)?;
    write_json(
        &NeuralArtifact::new(&gru_model, cfg.train_gru, &gru_stream),
        &out.join("models/gru.json"),
    )?;
    manifest.record("gru", "model", out, "models/gru.json")?;

    log::info!("evaluating every model and writing the report");
    let models = vec![
        EvalModel {
            run_id: "sindyc".to_string(),
            surrogate: Surrogate::Sindyc(sindyc_model),
        },
        EvalModel {
            run_id: "mvg".to_string(),
            surrogate: Surrogate::Mvg(mvg_model.clone()),
        },
        EvalModel {
            run_id: "fnn".to_string(),
            surrogate: Surrogate::Neural(fnn_model),
        },
        EvalModel {
            run_id: "gru".to_string(),
            surrogate: Surrogate::Neural(gru_model),
        },
    ];
    let report_stream = stream.child("report");
    let mut report = evaluate_all(&models, &eval, &pseudo, cfg.band_samples, &report_stream)?;
    report.curves = curves;
    report.seeds = vec![cfg.seed];
    report.config_echo = config_echo;
    write_report(&report, &out.join("report"))?;
    for name in ["report.json", "rmse.csv", "coverage.csv", "curves.csv", "report.md"] {
        manifest.record("report", "report", out, format!("report/{name}"))?;
    }

    let x0 = DVector::from_column_slice(&pseudo.denoised.ghx[0].as_array());
    match predictive_band(
        &mvg_model,
        &x0,
        &pseudo.denoised.controls,
        &pseudo.denoised.grid,
        cfg.band_samples,
        &report_stream.child("band/mvg/experiment"),
    ) {
        Ok(band) => {
            write_band_csv(&band, &out.join("report/experiment_band.csv"))?;
            manifest.record("mvg", "band", out, "report/experiment_band.csv")?;
        }
        Err(CoreError::Instability { divergent, total }) => {
            log::warn!("skipping the experiment band: {divergent} of {total} rollouts diverged");
        }
        Err(e) => return Err(e),
    }

    write_json(&manifest, &out.join("manifest.json"))?;
    Ok(manifest)
}

/// Rebuilds the report of a finished run purely from its stored artifacts:
/// no training, no simulation, and the same numbers byte for byte. Artifact
/// hashes are verified against the manifest before anything is read.
pub fn regenerate_report(run_dir: &Path) -> Result<super::report::Report> {
    let manifest: RunManifest = crate::io::read_json(&run_dir.join("manifest.json"))?;
    let cfg: CompareConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| CoreError::json("run manifest config".to_string(), e))?;
    manifest.verify(run_dir)?;

    let data = crate::io::read_dataset(&run_dir.join("data/manifest.json"))?;
    let ids = data.ids();
    let n_pool = cfg.pool.n_total - cfg.pool.n_eval;
    let eval = data.subset(&ids[n_pool..])?;

    use crate::types::Provenance;
    let raw = crate::io::read_trajectory_csv(
        &run_dir.join("experiment/raw.csv"),
        cfg.pool.n_total,
        Provenance::PseudoExperimental,
    )?;
    let denoised = crate::io::read_trajectory_csv(
        &run_dir.join("experiment/denoised.csv"),
        cfg.pool.n_total,
        Provenance::PseudoExperimental,
    )?;
    let pseudo = super::pseudo::PseudoExperiment {
        raw,
        denoised,
        perturbation: cfg.pseudo.perturbation,
        noise: cfg.pseudo.noise.clone(),
    };

    let sindyc: ModelArtifact = crate::io::read_json(&run_dir.join("models/sindyc.json"))?;
    let mvg: MvgArtifact = crate::io::read_json(&run_dir.join("models/mvg.json"))?;
    let fnn: NeuralArtifact = crate::io::read_json(&run_dir.join("models/fnn.json"))?;
    let gru: NeuralArtifact = crate::io::read_json(&run_dir.join("models/gru.json"))?;
    let models = vec![
        EvalModel {
            run_id: "sindyc".to_string(),
            surrogate: Surrogate::Sindyc(sindyc.model()?),
        },
        EvalModel {
            run_id: "mvg".to_string(),
            surrogate: Surrogate::Mvg(mvg.model()?),
        },
        EvalModel {
            run_id: "fnn".to_string(),
            surrogate: Surrogate::Neural(fnn.model()?),
        },
        EvalModel {
            run_id: "gru".to_string(),
            surrogate: Surrogate::Neural(gru.model()?),
        },
    ];

    let report_stream = RngStream::new(manifest.seed, "compare").child("report");
    let mut report = evaluate_all(&models, &eval, &pseudo, cfg.band_samples, &report_stream)?;
    for record in manifest.artifacts.iter().filter(|a| a.kind == "history") {
        let base = record.run_id.rsplit_once('-').map_or(record.run_id.as_str(), |(b, _)| b);
        let family = if base == "mvg" { "mvg-sindyc" } else { base };
        let strategy = if record.run_id.ends_with("-random") {
            "random"
        } else if base == "mvg" {
            "mahalanobis"
        } else {
            "prediction-error"
        };
        let history = crate::active::read_history_csv(&run_dir.join(&record.file))?;
        report.curves.push(CurveSummary::from_history(
            &record.run_id,
            family,
            strategy,
            &record.file,
            &history,
        )?);
    }
    report.seeds = vec![manifest.seed];
    report.config_echo = manifest.config;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::report::Report;
    use crate::harness::verify_provenance;
    use crate::io::read_json;

    fn tiny_config() -> CompareConfig {
        CompareConfig {
            seed: 5,
            pool: PoolConfig {
                n_total: 12,
                n_eval: 2,
                grid: TimeGrid::new(0.0, 5.0, 60).unwrap(),
                bed: BedConfig {
                    n_nodes: 8,
                    ..BedConfig::default()
                },
                ..PoolConfig::default()
            },
            ensemble: EnsembleConfig {
                n_models: 24,
                subset_size: 3,
                ..EnsembleConfig::default()
            },
            train_fnn: TrainConfig {
                epochs: 3,
                ..TrainConfig::fnn().desk()
            },
            train_gru: TrainConfig {
                epochs: 2,
                lookback: 10,
                ..TrainConfig::gru().desk()
            },
            model_loop: LoopConfig {
                init_size: 4,
                batch: 4,
                max_rounds: 3,
                deterministic_timing: true,
                ..LoopConfig::model_selection()
            },
            trajectory_loop: LoopConfig {
                init_size: 2,
                batch: 2,
                max_rounds: 2,
                deterministic_timing: true,
                ..LoopConfig::trajectory_selection()
            },
            band_samples: 120,
            ..CompareConfig::default()
        }
    }

    #[test]
    fn pipeline_runs_verify_and_replay_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        let manifest_a = run_compare(&cfg, &out_a).unwrap();
        manifest_a.verify(&out_a).unwrap();
        let report: Report = read_json(&out_a.join("report/report.json")).unwrap();
        verify_provenance(&report, &manifest_a).unwrap();
        assert_eq!(report.curves.len(), 8);
        assert_eq!(report.rmse.len(), 4 * 3);
        let stored: RunManifest = read_json(&out_a.join("manifest.json")).unwrap();
        assert_eq!(stored, manifest_a);

        let manifest_b = run_compare(&cfg, &out_b).unwrap();
        assert_eq!(manifest_a, manifest_b);
        for record in &manifest_a.artifacts {
            let a = fs::read(out_a.join(&record.file)).unwrap();
            let b = fs::read(out_b.join(&record.file)).unwrap();
            assert_eq!(a, b, "{} differs between runs", record.file);
        }

        let regenerated = regenerate_report(&out_a).unwrap();
        assert_eq!(regenerated, report);
        let dir = tmp.path().join("regen");
        crate::harness::write_report(&regenerated, &dir).unwrap();
        for name in ["report.json", "rmse.csv", "coverage.csv", "curves.csv", "report.md"] {
            let a = fs::read(out_a.join("report").join(name)).unwrap();
            let b = fs::read(dir.join(name)).unwrap();
            assert_eq!(a, b, "regenerated {name} differs from the original");
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = tiny_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: CompareConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let sparse: CompareConfig = serde_json::from_str("{\"seed\": 9}").unwrap();
        assert_eq!(sparse.seed, 9);
        assert_eq!(sparse.pool.n_total, PoolConfig::default().n_total);
    }

    #[test]
    fn rejects_a_pool_smaller_than_the_holdout() {
        let cfg = CompareConfig {
            pool: PoolConfig {
                n_total: 6,
                n_eval: 5,
                ..PoolConfig::default()
            },
            ..CompareConfig::default()
        };
        assert!(matches!(
            run_compare(&cfg, Path::new("/nonexistent")).unwrap_err(),
            CoreError::Parameter { name: "n_total", .. }
        ));
    }
}
