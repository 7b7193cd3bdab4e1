//! Query strategies and the active-learning loop.
//!
//! Selection happens in one of two settings. In model selection the
//! candidates are members of a precomputed coefficient ensemble; each round
//! refits the Gaussian over the selected members and the query ranks the
//! remaining ones by Mahalanobis distance to a reference coefficient vector.
//! In trajectory selection the candidates are pool trajectories; each round
//! refits or retrains the surrogate on the selected subset and the query
//! ranks the remaining trajectories by the surrogate's own prediction error.
//! A seeded random baseline runs the identical loop with the ranking replaced
//! by a uniform draw, so paired arms differ only in their queries.
//!
//! Every round appends one [`RoundRecord`]: selected count, per-channel
//! errors against held-out simulations and the pseudo-experiment, and wall
//! time. [`run_comparison`] produces the paired AL and random histories from
//! one experiment stream.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::io::fmt_f64;
use crate::mvg::{fit_mvg, CoefficientEnsemble, MvgModel};
use crate::neural::{predict_trajectory, train_surrogate, NeuralModel, SurrogateKind, TrainConfig};
use crate::rng::RngStream;
use crate::sindy::{fit_sindyc, rollout, LinearModel, RolloutConfig, StlsqConfig};
use crate::types::{Dataset, GhxState, Trajectory, N_CONTROLS, N_GHX_STATES};

/// A trajectory-level predictor, whichever family it comes from.
///
/// The probabilistic variant predicts with its mean coefficient vector; the
/// recurrent variant consumes the first `lookback` true states as warm start
/// and runs free after that, so its errors are scored only on the steps it
/// actually predicts.
#[derive(Debug, Clone)]
pub enum Surrogate {
    Sindyc(LinearModel),
    Mvg(MvgModel),
    Neural(NeuralModel),
}

impl Surrogate {
    /// Family name used in reports and run ids.
    pub fn family(&self) -> &'static str {
        match self {
            Surrogate::Sindyc(_) => "sindyc",
            Surrogate::Mvg(_) => "mvg-sindyc",
            Surrogate::Neural(NeuralModel::Fnn(_)) => "fnn",
            Surrogate::Neural(NeuralModel::Gru(_)) => "gru",
        }
    }

    /// Leading steps excluded from error scoring because the predictor
    /// consumes them as given history.
    pub fn warmup(&self) -> usize {
        match self {
            Surrogate::Neural(NeuralModel::Gru(g)) => g.lookback(),
            _ => 0,
        }
    }

    /// Predicts both heat-exchanger channels along the trajectory's grid
    /// from its recorded controls.
    pub fn predict(&self, traj: &Trajectory) -> Result<Vec<GhxState>> {
        match self {
            Surrogate::Sindyc(model) => rollout_ghx(model, traj),
            Surrogate::Mvg(model) => {
                let mean = LinearModel::unflatten(model.mean(), N_GHX_STATES, N_CONTROLS)?;
                rollout_ghx(&mean, traj)
            }
            Surrogate::Neural(model) => {
                let warm = match model {
                    NeuralModel::Fnn(_) => &traj.ghx[..0],
                    NeuralModel::Gru(g) => {
                        let lookback = g.lookback();
                        if traj.n_steps() <= lookback {
                            return Err(CoreError::Data {
                                reason: format!(
                                    "trajectory is not longer than the lookback window {lookback}"
                                ),
                                ids: vec![traj.id],
                            });
                        }
                        &traj.ghx[..lookback]
                    }
                };
                predict_trajectory(model, &traj.controls, warm, &traj.grid)
            }
        }
    }
}

fn rollout_ghx(model: &LinearModel, traj: &Trajectory) -> Result<Vec<GhxState>> {
    if model.n_x() != N_GHX_STATES {
        return Err(CoreError::Shape {
            context: "surrogate state dimension",
            expected: N_GHX_STATES,
            actual: model.n_x(),
        });
    }
    let x0 = DVector::from_column_slice(&traj.ghx[0].as_array());
    let states = rollout(model, &x0, &traj.controls, &traj.grid, RolloutConfig::default())?;
    Ok(states
        .into_iter()
        .map(|x| GhxState::from_array([x[0], x[1]]))
        .collect())
}

/// Per-channel sums of squared prediction residuals past the warmup, plus
/// the number of scored steps.
fn squared_residuals(model: &Surrogate, traj: &Trajectory) -> Result<([f64; N_GHX_STATES], usize)> {
    let pred = model.predict(traj)?;
    let start = model.warmup();
    let mut ss = [0.0; N_GHX_STATES];
    for i in start..traj.n_steps() {
        let p = pred[i].as_array();
        let t = traj.ghx[i].as_array();
        for c in 0..N_GHX_STATES {
            let r = p[c] - t[c];
            ss[c] += r * r;
        }
    }
    Ok((ss, traj.n_steps() - start))
}

/// Per-channel root-mean-square error of the surrogate's closed-loop
/// prediction against the trajectory's recorded heat-exchanger states,
/// scored past the model's warmup.
pub fn trajectory_rmse(model: &Surrogate, traj: &Trajectory) -> Result<[f64; N_GHX_STATES]> {
    let (ss, n) = squared_residuals(model, traj)?;
    if n == 0 {
        return Err(CoreError::InsufficientData {
            context: "trajectory scoring",
            minimum: model.warmup() + 1,
            actual: traj.n_steps(),
        });
    }
    Ok(ss.map(|s| (s / n as f64).sqrt()))
}

/// Population standard deviation of each heat-exchanger channel pooled over
/// the given trajectories, floored away from zero so it can divide.
fn channel_scales(trajs: &[Trajectory]) -> [f64; N_GHX_STATES] {
    let count: usize = trajs.iter().map(Trajectory::n_steps).sum();
    let mut out = [1.0; N_GHX_STATES];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut mean = 0.0;
        for traj in trajs {
            for s in &traj.ghx {
                mean += s.as_array()[c];
            }
        }
        mean /= count as f64;
        let mut var = 0.0;
        for traj in trajs {
            for s in &traj.ghx {
                let d = s.as_array()[c] - mean;
                var += d * d;
            }
        }
        let std = (var / count as f64).sqrt();
        if std > mean.abs().max(1.0) * 1e-12 {
            *slot = std;
        }
    }
    out
}

/// Which covariance scales the coefficient-space distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    /// The Gaussian over the whole candidate ensemble, fixed across rounds.
    Pool,
    /// The Gaussian refit over the currently selected members each round.
    /// Meaningful once the selected count exceeds the coefficient dimension.
    Selected,
}

/// How a trajectory's prediction errors are aggregated into one rank score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMetric {
    Rmse,
}

/// How the next batch of candidates is chosen.
#[derive(Debug, Clone)]
pub enum QueryStrategy {
    /// Rank ensemble members by Mahalanobis distance to a reference
    /// coefficient vector; closest first.
    MahalanobisCoefficientSpace {
        reference: DVector<f64>,
        covariance_source: CovarianceSource,
    },
    /// Rank pool trajectories by the current surrogate's prediction error;
    /// largest first.
    PredictionError {
        metric: ErrorMetric,
        target_channels: Vec<usize>,
    },
    /// Draw uniformly from the remaining pool using the embedded stream.
    RandomBaseline { stream: RngStream },
}

impl QueryStrategy {
    /// Error ranking over both heat-exchanger channels.
    pub fn prediction_error() -> QueryStrategy {
        QueryStrategy::PredictionError {
            metric: ErrorMetric::Rmse,
            target_channels: (0..N_GHX_STATES).collect(),
        }
    }
}

/// Ranks the not-yet-selected ensemble members by Mahalanobis distance to
/// `reference` and returns the `batch` closest ids, ties broken by ascending
/// id. Ids index rows of the ensemble.
pub fn query_mahalanobis(
    pool: &CoefficientEnsemble,
    selected: &[usize],
    reference: &DVector<f64>,
    batch: usize,
    covariance_source: CovarianceSource,
) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(CoreError::Parameter {
            name: "batch",
            reason: "must be at least 1".to_string(),
        });
    }
    if reference.len() != pool.dim() {
        return Err(CoreError::Shape {
            context: "mahalanobis reference",
            expected: pool.dim(),
            actual: reference.len(),
        });
    }
    if reference.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: "mahalanobis reference",
        });
    }
    let taken: BTreeSet<usize> = selected.iter().copied().collect();
    if let Some(&bad) = taken.iter().find(|&&i| i >= pool.n_models()) {
        return Err(CoreError::Data {
            reason: "selected ids outside the ensemble".to_string(),
            ids: vec![bad],
        });
    }
    let candidates: Vec<usize> = (0..pool.n_models()).filter(|i| !taken.contains(i)).collect();
    if candidates.is_empty() {
        return Err(CoreError::InsufficientData {
            context: "mahalanobis candidate pool",
            minimum: 1,
            actual: 0,
        });
    }
    let gaussian = match covariance_source {
        CovarianceSource::Pool => fit_mvg(pool, None)?,
        CovarianceSource::Selected => {
            let rows: Vec<usize> = taken.iter().copied().collect();
            let sub = CoefficientEnsemble::new(
                pool.vectors().select_rows(rows.iter()),
                rows.iter().map(|&i| pool.subset_ids()[i].clone()).collect(),
            )?;
            fit_mvg(&sub, None)?
        }
    };
    let mut ranked: Vec<(usize, f64)> = candidates
        .into_iter()
        .map(|i| gaussian.mahalanobis(&pool.vector(i), reference).map(|d| (i, d)))
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked.into_iter().take(batch).map(|(i, _)| i).collect())
}

/// Scores every pool trajectory by the surrogate's prediction error and
/// returns the `batch` highest-error ids, ties broken by ascending id.
///
/// Per-channel errors are divided by the pool-wide channel deviation before
/// summing, so channels with large units do not dominate. A trajectory the
/// surrogate fails on outright counts as infinitely informative and is
/// logged.
pub fn query_by_error(
    model: &Surrogate,
    pool: &Dataset,
    batch: usize,
    metric: ErrorMetric,
    target_channels: &[usize],
) -> Result<Vec<usize>> {
    if batch == 0 {
        return Err(CoreError::Parameter {
            name: "batch",
            reason: "must be at least 1".to_string(),
        });
    }
    if target_channels.is_empty() {
        return Err(CoreError::Parameter {
            name: "target_channels",
            reason: "must name at least one heat-exchanger channel".to_string(),
        });
    }
    let distinct: BTreeSet<usize> = target_channels.iter().copied().collect();
    if distinct.len() != target_channels.len() || *distinct.iter().last().unwrap() >= N_GHX_STATES {
        return Err(CoreError::Parameter {
            name: "target_channels",
            reason: format!("must be distinct indices below {N_GHX_STATES}, got {target_channels:?}"),
        });
    }
    let scales = channel_scales(pool.trajectories());
    let score = |ss: [f64; N_GHX_STATES], n: usize| -> f64 {
        match metric {
            ErrorMetric::Rmse => target_channels
                .iter()
                .map(|&c| (ss[c] / n as f64).sqrt() / scales[c])
                .sum(),
        }
    };
    let mut ranked: Vec<(usize, f64)> = pool
        .trajectories()
        .par_iter()
        .map(|traj| {
            let err = match squared_residuals(model, traj) {
                Ok((ss, n)) => {
                    let e = score(ss, n);
                    if e.is_finite() {
                        e
                    } else {
                        f64::INFINITY
                    }
                }
                Err(e) => {
                    log::warn!("trajectory {} scored as infinitely informative: {e}", traj.id);
                    f64::INFINITY
                }
            };
            (traj.id, err)
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(ranked.into_iter().take(batch).map(|(id, _)| id).collect())
}

/// One row of an active-learning history.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub n_selected: usize,
    pub rmse_m: f64,
    pub rmse_q: f64,
    pub rmse_exp_m: f64,
    pub rmse_exp_q: f64,
    pub wall_s: f64,
    pub cum_wall_s: f64,
}

/// Selection bookkeeping plus the per-round history of one run.
///
/// Ids move from the pool to the selected set and never back, so the two
/// stay disjoint and their union constant.
#[derive(Debug, Clone, PartialEq)]
pub struct AlState {
    selected: Vec<usize>,
    pool: Vec<usize>,
    history: Vec<RoundRecord>,
    scores: Vec<f64>,
    failed_rounds: Vec<usize>,
}

impl AlState {
    pub fn new(pool: Vec<usize>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let duplicates: Vec<usize> = pool.iter().copied().filter(|&id| !seen.insert(id)).collect();
        if !duplicates.is_empty() {
            return Err(CoreError::Data {
                reason: "duplicate pool ids".to_string(),
                ids: duplicates,
            });
        }
        Ok(AlState {
            selected: Vec::new(),
            pool,
            history: Vec::new(),
            scores: Vec::new(),
            failed_rounds: Vec::new(),
        })
    }

    /// Moves ids from the pool to the selected set, keeping the given order.
    /// Rejects ids that are absent, already selected, or repeated, leaving
    /// the state untouched.
    pub fn select(&mut self, ids: &[usize]) -> Result<()> {
        let mut remaining: BTreeSet<usize> = self.pool.iter().copied().collect();
        let unavailable: Vec<usize> = ids.iter().copied().filter(|id| !remaining.remove(id)).collect();
        if !unavailable.is_empty() {
            return Err(CoreError::Data {
                reason: "ids not available in the candidate pool".to_string(),
                ids: unavailable,
            });
        }
        self.pool.retain(|id| !ids.contains(id));
        self.selected.extend_from_slice(ids);
        Ok(())
    }

    /// Selected ids in selection order.
    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    /// Remaining candidate ids.
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    /// Rounds recorded so far (the initial fit counts as round zero).
    pub fn rounds(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[RoundRecord] {
        &self.history
    }

    /// Scalar evaluation score per recorded round, aligned with the history.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Rounds whose refit failed, where the loop kept the previous model.
    pub fn failed_rounds(&self) -> &[usize] {
        &self.failed_rounds
    }

    fn record(&mut self, round: usize, nums: &EvalNumbers, wall_s: f64) {
        let cum_wall_s = self.history.last().map_or(0.0, |r| r.cum_wall_s) + wall_s;
        self.history.push(RoundRecord {
            round,
            n_selected: self.selected.len(),
            rmse_m: nums.rmse_m,
            rmse_q: nums.rmse_q,
            rmse_exp_m: nums.rmse_exp_m,
            rmse_exp_q: nums.rmse_exp_q,
            wall_s,
            cum_wall_s,
        });
        self.scores.push(nums.score);
    }
}

/// Header line of every history CSV.
pub const HISTORY_CSV_HEADER: &str =
    "round,n_selected,rmse_m,rmse_q,rmse_exp_m,rmse_exp_q,wall_s,cum_wall_s";

/// Writes one run's history as CSV.
pub fn write_history_csv(history: &[RoundRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path.display().to_string(), e);
    writeln!(w, "{HISTORY_CSV_HEADER}").map_err(io_err)?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.n_selected,
            fmt_f64(r.rmse_m),
            fmt_f64(r.rmse_q),
            fmt_f64(r.rmse_exp_m),
            fmt_f64(r.rmse_exp_q),
            fmt_f64(r.wall_s),
            fmt_f64(r.cum_wall_s),
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Reads a history CSV written by [`write_history_csv`].
pub fn read_history_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|e| CoreError::io(display.clone(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::Csv {
            path: display.clone(),
            reason: "empty file".to_string(),
        })?
        .map_err(|e| CoreError::io(display.clone(), e))?;
    if header.trim_end() != HISTORY_CSV_HEADER {
        return Err(CoreError::Csv {
            path: display,
            reason: format!("unexpected header '{header}'"),
        });
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| CoreError::io(display.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(CoreError::Csv {
                path: display,
                reason: format!("row {}: expected 8 fields, got {}", lineno + 2, fields.len()),
            });
        }
        let int = |s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|_| CoreError::Csv {
                path: display.clone(),
                reason: format!("row {}: unparsable count '{s}'", lineno + 2),
            })
        };
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| CoreError::Csv {
                path: display.clone(),
                reason: format!("row {}: unparsable number '{s}'", lineno + 2),
            })
        };
        out.push(RoundRecord {
            round: int(fields[0])?,
            n_selected: int(fields[1])?,
            rmse_m: num(fields[2])?,
            rmse_q: num(fields[3])?,
            rmse_exp_m: num(fields[4])?,
            rmse_exp_q: num(fields[5])?,
            wall_s: num(fields[6])?,
            cum_wall_s: num(fields[7])?,
        });
    }
    Ok(out)
}

/// Which history columns feed the scalar score used for early stopping and
/// arm-to-arm comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreTarget {
    /// Held-out simulation columns.
    EvalSet,
    /// Pseudo-experiment columns.
    Experiment,
}

/// Loop settings shared by every family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    /// Candidates drawn at random before the first fit.
    pub init_size: usize,
    /// Candidates added per query round.
    pub batch: usize,
    /// Query rounds after the initial fit; the loop also stops when the pool
    /// runs out.
    pub max_rounds: usize,
    /// Rounds without a relative score improvement above `min_improvement`
    /// before the loop stops early.
    pub patience: usize,
    /// Relative improvement on the best score that resets the patience
    /// counter.
    pub min_improvement: f64,
    pub score: ScoreTarget,
    /// Record zero wall times so repeated runs produce identical files.
    pub deterministic_timing: bool,
}

impl LoopConfig {
    /// Model-selection preset: 20 initial members, 10 per round, scored
    /// against the pseudo-experiment the reference vector comes from.
    pub fn model_selection() -> LoopConfig {
        LoopConfig {
            init_size: 20,
            batch: 10,
            max_rounds: usize::MAX,
            patience: 5,
            min_improvement: 0.01,
            score: ScoreTarget::Experiment,
            deterministic_timing: false,
        }
    }

    /// Trajectory-selection preset: 4 initial trajectories, 5 per round,
    /// scored against the held-out simulations.
    pub fn trajectory_selection() -> LoopConfig {
        LoopConfig {
            init_size: 4,
            batch: 5,
            max_rounds: usize::MAX,
            patience: 5,
            min_improvement: 0.01,
            score: ScoreTarget::EvalSet,
            deterministic_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("init_size", self.init_size),
            ("batch", self.batch),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(CoreError::Parameter {
                    name,
                    reason: "must be at least 1".to_string(),
                });
            }
        }
        if !(self.min_improvement.is_finite() && (0.0..1.0).contains(&self.min_improvement)) {
            return Err(CoreError::Parameter {
                name: "min_improvement",
                reason: format!("must lie in [0, 1), got {}", self.min_improvement),
            });
        }
        Ok(())
    }
}

/// Candidate pool plus the per-round rebuild recipe for one family.
#[derive(Debug, Clone)]
pub enum AlProblem<'a> {
    /// Candidates are precomputed ensemble members; each round refits the
    /// Gaussian over the selected ones and predicts with its mean.
    MvgModels { ensemble: &'a CoefficientEnsemble },
    /// Candidates are pool trajectories; each round refits one sparse model
    /// on the selected subset.
    SindycTrajectories { pool: &'a Dataset, fit: StlsqConfig },
    /// Candidates are pool trajectories; each round retrains the network on
    /// the selected subset.
    NeuralTrajectories {
        kind: SurrogateKind,
        pool: &'a Dataset,
        train: TrainConfig,
    },
}

/// Shared evaluation inputs: held-out simulations and the pseudo-experiment.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub eval_set: &'a Dataset,
    pub experiment: &'a Trajectory,
}

struct EvalNumbers {
    rmse_m: f64,
    rmse_q: f64,
    rmse_exp_m: f64,
    rmse_exp_q: f64,
    score: f64,
}

fn evaluate_numbers(
    model: &Surrogate,
    ctx: &EvalContext<'_>,
    scales: [f64; N_GHX_STATES],
    target: ScoreTarget,
) -> EvalNumbers {
    let pooled = |trajs: &[Trajectory]| -> [f64; N_GHX_STATES] {
        let mut ss = [0.0; N_GHX_STATES];
        let mut count = 0usize;
        for traj in trajs {
            match squared_residuals(model, traj) {
                Ok((s, n)) => {
                    for c in 0..N_GHX_STATES {
                        ss[c] += s[c];
                    }
                    count += n;
                }
                Err(e) => {
                    log::warn!("evaluation failed on trajectory {}: {e}", traj.id);
                    return [f64::INFINITY; N_GHX_STATES];
                }
            }
        }
        if count == 0 {
            return [f64::INFINITY; N_GHX_STATES];
        }
        [
            (ss[0] / count as f64).sqrt(),
            (ss[1] / count as f64).sqrt(),
        ]
    };
    let sim = pooled(ctx.eval_set.trajectories());
    let exp = pooled(std::slice::from_ref(ctx.experiment));
    let scored = match target {
        ScoreTarget::EvalSet => sim,
        ScoreTarget::Experiment => exp,
    };
    EvalNumbers {
        rmse_m: sim[0],
        rmse_q: sim[1],
        rmse_exp_m: exp[0],
        rmse_exp_q: exp[1],
        score: scored[0] / scales[0] + scored[1] / scales[1],
    }
}

/// Runs one arm: draw the initial set, fit, then query/refit/evaluate per
/// round until `max_rounds`, pool exhaustion, or the patience rule stops it.
///
/// A failed refit is logged and recorded with the previous model's numbers;
/// a failed initial fit is fatal. The stream seeds the initial draw and the
/// per-round training; a random baseline draws queries from the stream
/// embedded in the strategy, so paired arms can share this one.
pub fn run_al_loop(
    problem: &AlProblem<'_>,
    strategy: &QueryStrategy,
    cfg: &LoopConfig,
    eval: &EvalContext<'_>,
    stream: &RngStream,
) -> Result<AlState> {
    cfg.validate()?;
    if matches!(problem, AlProblem::MvgModels { .. }) && cfg.init_size < 2 {
        return Err(CoreError::Parameter {
            name: "init_size",
            reason: "covariance estimation needs at least 2 selected models".to_string(),
        });
    }
    let pool_ids = match problem {
        AlProblem::MvgModels { ensemble } => (0..ensemble.n_models()).collect::<Vec<_>>(),
        AlProblem::SindycTrajectories { pool, .. } | AlProblem::NeuralTrajectories { pool, .. } => {
            let eval_ids: BTreeSet<usize> = eval.eval_set.ids().into_iter().collect();
            let shared: Vec<usize> = pool
                .ids()
                .into_iter()
                .filter(|id| eval_ids.contains(id))
                .collect();
            if !shared.is_empty() {
                return Err(CoreError::Data {
                    reason: "evaluation trajectories appear in the candidate pool".to_string(),
                    ids: shared,
                });
            }
            pool.ids()
        }
    };
    let scales = match cfg.score {
        ScoreTarget::EvalSet => channel_scales(eval.eval_set.trajectories()),
        ScoreTarget::Experiment => channel_scales(std::slice::from_ref(eval.experiment)),
    };
    let mut refit = build_refit(problem, stream);
    let mut query = build_query(problem, strategy, cfg.batch)?;
    drive_loop(
        pool_ids,
        cfg,
        &stream.child("init"),
        &mut refit,
        &mut query,
        |model| evaluate_numbers(model, eval, scales, cfg.score),
    )
}

type RefitFn<'a> = Box<dyn FnMut(&[usize], usize) -> Result<Surrogate> + 'a>;
type QueryFn<'a> = Box<dyn FnMut(&Surrogate, &AlState, usize) -> Result<Vec<usize>> + 'a>;

fn build_refit<'a>(problem: &'a AlProblem<'_>, stream: &RngStream) -> RefitFn<'a> {
    match problem {
        AlProblem::MvgModels { ensemble } => {
            let ensemble = *ensemble;
            Box::new(move |selected, _round| {
                let sub = CoefficientEnsemble::new(
                    ensemble.vectors().select_rows(selected.iter()),
                    selected
                        .iter()
                        .map(|&i| ensemble.subset_ids()[i].clone())
                        .collect(),
                )?;
                Ok(Surrogate::Mvg(fit_mvg(&sub, None)?))
            })
        }
        AlProblem::SindycTrajectories { pool, fit } => {
            let (pool, fit) = (*pool, *fit);
            Box::new(move |selected, _round| {
                Ok(Surrogate::Sindyc(fit_sindyc(&pool.subset(selected)?, fit)?))
            })
        }
        AlProblem::NeuralTrajectories { kind, pool, train } => {
            let (kind, pool, train) = (*kind, *pool, *train);
            let stream = stream.clone();
            Box::new(move |selected, round| {
                let data = pool.subset(selected)?;
                let child = stream.child(format!("round-{round}/train"));
                Ok(Surrogate::Neural(train_surrogate(kind, &data, &train, &child)?))
            })
        }
    }
}

fn build_query<'a>(
    problem: &'a AlProblem<'_>,
    strategy: &'a QueryStrategy,
    batch: usize,
) -> Result<QueryFn<'a>> {
    match (strategy, problem) {
        (
            QueryStrategy::MahalanobisCoefficientSpace {
                reference,
                covariance_source,
            },
            AlProblem::MvgModels { ensemble },
        ) => {
            let (ensemble, source) = (*ensemble, *covariance_source);
            Ok(Box::new(move |_model, state, _round| {
                query_mahalanobis(ensemble, state.selected(), reference, batch, source)
            }))
        }
        (
            QueryStrategy::PredictionError {
                metric,
                target_channels,
            },
            AlProblem::SindycTrajectories { pool, .. } | AlProblem::NeuralTrajectories { pool, .. },
        ) => {
            let (pool, metric) = (*pool, *metric);
            Ok(Box::new(move |model, state, _round| {
                query_by_error(model, &pool.subset(state.pool())?, batch, metric, target_channels)
            }))
        }
        (QueryStrategy::RandomBaseline { stream }, _) => {
            let stream = stream.clone();
            Ok(Box::new(move |_model, state, round| {
                let mut rng = stream.child(format!("round-{round}")).rng();
                let k = batch.min(state.pool().len());
                let picked = rand::seq::index::sample(&mut rng, state.pool().len(), k);
                Ok(picked.iter().map(|i| state.pool()[i]).collect())
            }))
        }
        (QueryStrategy::MahalanobisCoefficientSpace { .. }, _) => Err(CoreError::Parameter {
            name: "strategy",
            reason: "coefficient-space queries need a precomputed model ensemble".to_string(),
        }),
        (QueryStrategy::PredictionError { .. }, _) => Err(CoreError::Parameter {
            name: "strategy",
            reason: "prediction-error queries rank trajectories, not ensemble members".to_string(),
        }),
    }
}

fn round_wall(timer: Instant, cfg: &LoopConfig) -> f64 {
    if cfg.deterministic_timing {
        0.0
    } else {
        timer.elapsed().as_secs_f64()
    }
}

fn drive_loop<R, Q, E>(
    pool_ids: Vec<usize>,
    cfg: &LoopConfig,
    init_stream: &RngStream,
    mut refit: R,
    mut query: Q,
    mut evaluate: E,
) -> Result<AlState>
where
    R: FnMut(&[usize], usize) -> Result<Surrogate>,
    Q: FnMut(&Surrogate, &AlState, usize) -> Result<Vec<usize>>,
    E: FnMut(&Surrogate) -> EvalNumbers,
{
    let mut state = AlState::new(pool_ids)?;
    if cfg.init_size > state.pool().len() {
        return Err(CoreError::Parameter {
            name: "init_size",
            reason: format!(
                "cannot draw {} of {} candidates",
                cfg.init_size,
                state.pool().len()
            ),
        });
    }
    let timer = Instant::now();
    let mut rng = init_stream.rng();
    let picked = rand::seq::index::sample(&mut rng, state.pool().len(), cfg.init_size);
    let init_ids: Vec<usize> = picked.iter().map(|i| state.pool()[i]).collect();
    state.select(&init_ids)?;
    let mut model = refit(state.selected(), 0)?;
    let nums = evaluate(&model);
    let mut best = nums.score;
    state.record(0, &nums, round_wall(timer, cfg));
    let mut stall = 0usize;
    for round in 1..=cfg.max_rounds {
        if state.pool().is_empty() {
            break;
        }
        let timer = Instant::now();
        let picked = query(&model, &state, round)?;
        state.select(&picked)?;
        match refit(state.selected(), round) {
            Ok(next) => model = next,
            Err(e) => {
                log::warn!("round {round} keeps the previous model: {e}");
                state.failed_rounds.push(round);
            }
        }
        let nums = evaluate(&model);
        state.record(round, &nums, round_wall(timer, cfg));
        if nums.score < best * (1.0 - cfg.min_improvement) {
            best = nums.score;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }
    Ok(state)
}

/// Paired histories of an informed arm and its random baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmPair {
    pub al: AlState,
    pub random: AlState,
}

/// Runs the informed strategy and the random baseline on identical inputs.
///
/// Both arms share the initial draw and per-round training streams, differ
/// only in their queries, and run the full sweep (the patience rule is
/// disabled) so the curves stay paired round for round. The baseline's
/// queries come from their own substream, so running the arms in either
/// order yields the same pair of histories.
pub fn run_comparison(
    problem: &AlProblem<'_>,
    al_strategy: &QueryStrategy,
    cfg: &LoopConfig,
    eval: &EvalContext<'_>,
    stream: &RngStream,
) -> Result<ArmPair> {
    if matches!(al_strategy, QueryStrategy::RandomBaseline { .. }) {
        return Err(CoreError::Parameter {
            name: "strategy",
            reason: "the comparison pairs an informed arm with its own random baseline".to_string(),
        });
    }
    let mut sweep = *cfg;
    sweep.patience = usize::MAX;
    let loop_stream = stream.child("loop");
    let al = run_al_loop(problem, al_strategy, &sweep, eval, &loop_stream)?;
    let baseline = QueryStrategy::RandomBaseline {
        stream: stream.child("random-query"),
    };
    let random = run_al_loop(problem, &baseline, &sweep, eval, &loop_stream)?;
    Ok(ArmPair { al, random })
}

/// Round number of the first record whose score is at or below `target`.
pub fn rounds_to_reach(state: &AlState, target: f64) -> Option<usize> {
    state
        .history
        .iter()
        .zip(&state.scores)
        .find(|(_, &s)| s <= target)
        .map(|(r, _)| r.round)
}

/// Selected-candidate count at the first record whose score is at or below
/// `target`.
pub fn selection_to_reach(state: &AlState, target: f64) -> Option<usize> {
    state
        .history
        .iter()
        .zip(&state.scores)
        .find(|(_, &s)| s <= target)
        .map(|(r, _)| r.n_selected)
}
