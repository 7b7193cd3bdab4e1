//! Probabilistic surrogate built from an ensemble of identified models.
//!
//! Many small trajectory subsets are each fitted into a [`LinearModel`]; the
//! flattened coefficient vectors form an ensemble over which a multivariate
//! Gaussian is estimated. The Gaussian supports Mahalanobis ranking of
//! candidate models against a reference vector and Monte-Carlo predictive
//! bands: coefficient draws are rolled out and summarized by pointwise means
//! and empirical 95% quantiles.

use std::collections::BTreeSet;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::io::fmt_f64;
use crate::rng::RngStream;
use crate::sindy::{fit_sindyc, rollout, LinearModel, RolloutConfig, StlsqConfig};
use crate::types::{ControlVector, Dataset, N_CONTROLS};

/// Relative weight of the default covariance shrinkage.
const DEFAULT_SHRINKAGE_SCALE: f64 = 1e-8;

/// Fitted coefficient vectors, one row per surviving ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEnsemble {
    vectors: DMatrix<f64>,
    subset_ids: Vec<Vec<usize>>,
}

impl CoefficientEnsemble {
    pub fn new(vectors: DMatrix<f64>, subset_ids: Vec<Vec<usize>>) -> Result<Self> {
        if vectors.nrows() != subset_ids.len() {
            return Err(CoreError::Shape {
                context: "ensemble subset records",
                expected: vectors.nrows(),
                actual: subset_ids.len(),
            });
        }
        if vectors.nrows() == 0 {
            return Err(CoreError::InsufficientData {
                context: "coefficient ensemble",
                minimum: 1,
                actual: 0,
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteInput {
                context: "coefficient ensemble",
            });
        }
        Ok(CoefficientEnsemble {
            vectors,
            subset_ids,
        })
    }

    pub fn n_models(&self) -> usize {
        self.vectors.nrows()
    }

    /// Coefficient dimension P.
    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &DMatrix<f64> {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> DVector<f64> {
        self.vectors.row(i).transpose()
    }

    pub fn subset_ids(&self) -> &[Vec<usize>] {
        &self.subset_ids
    }
}

/// Number of distinct size-k id-sets in a pool of n, saturating.
fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

/// Draws `n_models` distinct trajectory subsets from the pool and fits each
/// into a coefficient vector. Subsets are distinct as id-sets; fits that fail
/// are logged with their subset and excluded from the ensemble.
pub fn build_ensemble(
    pool: &Dataset,
    n_models: usize,
    subset_size: usize,
    cfg: StlsqConfig,
    stream: &RngStream,
) -> Result<CoefficientEnsemble> {
    if n_models == 0 {
        return Err(CoreError::Parameter {
            name: "n_models",
            reason: "must be at least 1".to_string(),
        });
    }
    if subset_size == 0 || subset_size > pool.len() {
        return Err(CoreError::Parameter {
            name: "subset_size",
            reason: format!(
                "must lie in [1, {}] for this pool, got {subset_size}",
                pool.len()
            ),
        });
    }
    if (n_models as u128) > binomial(pool.len(), subset_size) {
        return Err(CoreError::Combinatorics {
            requested: n_models,
            subset_size,
            available: pool.len(),
        });
    }

    let ids = pool.ids();
    let mut rng = stream.rng();
    let mut seen = BTreeSet::new();
    let mut subsets = Vec::with_capacity(n_models);
    while subsets.len() < n_models {
        let picked = rand::seq::index::sample(&mut rng, ids.len(), subset_size);
        let mut subset: Vec<usize> = picked.iter().map(|i| ids[i]).collect();
        subset.sort_unstable();
        if seen.insert(subset.clone()) {
            subsets.push(subset);
        }
    }

    let fits: Vec<(Vec<usize>, Result<LinearModel>)> = subsets
        .into_par_iter()
        .map(|subset| {
            let fit = pool
                .subset(&subset)
                .and_then(|data| fit_sindyc(&data, cfg));
            (subset, fit)
        })
        .collect();

    let mut rows = Vec::with_capacity(n_models);
    let mut kept_ids = Vec::with_capacity(n_models);
    for (subset, fit) in fits {
        match fit {
            Ok(model) => {
                rows.push(model.flatten());
                kept_ids.push(subset);
            }
            Err(e) => log::warn!("excluding failed fit on subset {subset:?}: {e}"),
        }
    }
    if rows.is_empty() {
        return Err(CoreError::InsufficientData {
            context: "coefficient ensemble",
            minimum: 1,
            actual: 0,
        });
    }
    let dim = rows[0].len();
    let vectors = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
    CoefficientEnsemble::new(vectors, kept_ids)
}

/// Multivariate Gaussian over flattened model coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct MvgModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    shrinkage: f64,
}

impl MvgModel {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>, shrinkage: f64) -> Result<Self> {
        let p = mean.len();
        if covariance.nrows() != p || covariance.ncols() != p {
            return Err(CoreError::Shape {
                context: "covariance dimensions",
                expected: p,
                actual: covariance.nrows().max(covariance.ncols()),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteInput {
                context: "gaussian parameters",
            });
        }
        let asym = (&covariance - covariance.transpose()).amax();
        if asym > 1e-12 * covariance.amax().max(1.0) {
            return Err(CoreError::Parameter {
                name: "covariance",
                reason: format!("must be symmetric, max asymmetry {asym:e}"),
            });
        }
        Ok(MvgModel {
            mean,
            covariance,
            shrinkage,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Mahalanobis distance under this model's covariance, reporting the
    /// stored shrinkage if the factorization fails.
    pub fn mahalanobis(&self, a: &DVector<f64>, a_ref: &DVector<f64>) -> Result<f64> {
        match mahalanobis(a, a_ref, &self.covariance) {
            Err(CoreError::SingularCovariance { .. }) => Err(CoreError::SingularCovariance {
                delta: self.shrinkage,
            }),
            other => other,
        }
    }
}

/// Shrinkage that [`fit_mvg`] applies when none is given: a small multiple
/// of the average variance, enough to keep the quadratic form invertible
/// without distorting distances.
pub fn default_shrinkage(covariance: &DMatrix<f64>) -> f64 {
    DEFAULT_SHRINKAGE_SCALE * covariance.trace() / covariance.nrows() as f64
}

/// Fits the Gaussian: row mean, unbiased sample covariance, symmetrization,
/// and `delta` added to the diagonal (default [`default_shrinkage`]).
pub fn fit_mvg(ensemble: &CoefficientEnsemble, delta: Option<f64>) -> Result<MvgModel> {
    let n = ensemble.n_models();
    if n < 2 {
        return Err(CoreError::InsufficientData {
            context: "covariance estimation",
            minimum: 2,
            actual: n,
        });
    }
    if let Some(d) = delta {
        if !(d.is_finite() && d >= 0.0) {
            return Err(CoreError::Parameter {
                name: "delta",
                reason: format!("shrinkage must be finite and non-negative, got {d}"),
            });
        }
    }
    let p = ensemble.dim();
    let x = ensemble.vectors();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let raw = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut covariance = (&raw + raw.transpose()) * 0.5;
    let shrinkage = delta.unwrap_or_else(|| default_shrinkage(&covariance));
    for i in 0..p {
        covariance[(i, i)] += shrinkage;
    }
    MvgModel::new(mean, covariance, shrinkage)
}

/// √((a−a_ref)ᵀ Σ⁻¹ (a−a_ref)) via a Cholesky solve of Σ.
pub fn mahalanobis(a: &DVector<f64>, a_ref: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<f64> {
    if a.len() != a_ref.len() || sigma.nrows() != a.len() || sigma.ncols() != a.len() {
        return Err(CoreError::Shape {
            context: "mahalanobis dimensions",
            expected: a.len(),
            actual: a_ref.len().max(sigma.nrows()).max(sigma.ncols()),
        });
    }
    let diff = a - a_ref;
    let chol = Cholesky::new(sigma.clone()).ok_or(CoreError::SingularCovariance { delta: 0.0 })?;
    let solved = chol.solve(&diff);
    Ok(diff.dot(&solved).max(0.0).sqrt())
}

/// Monte-Carlo predictive summary of an [`MvgModel`] under fixed controls.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBand {
    grid: TimeGrid,
    mean: DMatrix<f64>,
    lower: DMatrix<f64>,
    upper: DMatrix<f64>,
    n_samples: usize,
}

impl PredictiveBand {
    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// Pointwise sample mean, n-steps × n-states.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Pointwise empirical 2.5% quantile.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Pointwise empirical 97.5% quantile.
    pub fn upper(&self) -> &DMatrix<f64> {
        &self.upper
    }

    /// Rollouts that survived (non-divergent) and entered the summary.
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_states(&self) -> usize {
        self.mean.ncols()
    }
}

/// Linear-interpolation empirical quantile of an ascending slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Samples coefficient vectors from the Gaussian, rolls each out under the
/// given controls, and summarizes the survivors pointwise by mean and
/// empirical 95% quantiles. Divergent rollouts are dropped; if more than
/// half diverge the band is reported as unstable.
pub fn predictive_band(
    mvg: &MvgModel,
    x0: &DVector<f64>,
    controls: &[ControlVector],
    grid: &TimeGrid,
    n_samples: usize,
    stream: &RngStream,
) -> Result<PredictiveBand> {
    if n_samples < 100 {
        return Err(CoreError::Parameter {
            name: "n_samples",
            reason: format!("need at least 100 samples for 95% quantiles, got {n_samples}"),
        });
    }
    let n_x = x0.len();
    let width = 1 + n_x + N_CONTROLS;
    if mvg.dim() != n_x * width {
        return Err(CoreError::Shape {
            context: "band coefficient dimension",
            expected: n_x * width,
            actual: mvg.dim(),
        });
    }
    let factor = Cholesky::new(mvg.covariance().clone()).ok_or(CoreError::SingularCovariance {
        delta: mvg.shrinkage(),
    })?;
    let l = factor.l();

    let mut rng = stream.rng();
    let draws: Vec<DVector<f64>> = (0..n_samples)
        .map(|_| {
            let z = DVector::from_fn(mvg.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
            mvg.mean() + &l * z
        })
        .collect();

    let rcfg = RolloutConfig::default();
    let results: Vec<Result<Vec<DVector<f64>>>> = draws
        .par_iter()
        .map(|coeffs| {
            let model = LinearModel::unflatten(coeffs, n_x, N_CONTROLS)?;
            rollout(&model, x0, controls, grid, rcfg)
        })
        .collect();

    let n = grid.n_steps();
    let mut survivors: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n_samples);
    let mut divergent = 0usize;
    for r in results {
        match r {
            Ok(states) => survivors.push(states),
            Err(CoreError::Divergence { .. }) | Err(CoreError::Integration { .. }) => {
                divergent += 1;
            }
            Err(other) => return Err(other),
        }
    }
    if 2 * divergent > n_samples {
        return Err(CoreError::Instability {
            divergent,
            total: n_samples,
        });
    }

    let kept = survivors.len();
    let mut mean = DMatrix::zeros(n, n_x);
    let mut lower = DMatrix::zeros(n, n_x);
    let mut upper = DMatrix::zeros(n, n_x);
    let mut column = vec![0.0; kept];
    for k in 0..n {
        for j in 0..n_x {
            for (s, states) in survivors.iter().enumerate() {
                column[s] = states[k][j];
            }
            let avg = column.iter().sum::<f64>() / kept as f64;
            column.sort_unstable_by(|a, b| a.total_cmp(b));
            mean[(k, j)] = avg;
            lower[(k, j)] = quantile(&column, 0.025).min(avg);
            upper[(k, j)] = quantile(&column, 0.975).max(avg);
        }
    }
    Ok(PredictiveBand {
        grid: *grid,
        mean,
        lower,
        upper,
        n_samples: kept,
    })
}

/// Per-state fraction of grid points where the reference sequence lies
/// inside the band. `reference` is n-steps × n-states.
pub fn coverage(band: &PredictiveBand, reference: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = band.grid.n_steps();
    if reference.nrows() != n {
        return Err(CoreError::Shape {
            context: "coverage reference length",
            expected: n,
            actual: reference.nrows(),
        });
    }
    if reference.ncols() != band.n_states() {
        return Err(CoreError::Shape {
            context: "coverage reference states",
            expected: band.n_states(),
            actual: reference.ncols(),
        });
    }
    let mut out = Vec::with_capacity(band.n_states());
    for j in 0..band.n_states() {
        let inside = (0..n)
            .filter(|&k| {
                let v = reference[(k, j)];
                band.lower[(k, j)] <= v && v <= band.upper[(k, j)]
            })
            .count();
        out.push(inside as f64 / n as f64);
    }
    Ok(out)
}

/// Header of the two-state band CSV.
pub const BAND_CSV_HEADER: &str = "t, mean_m, lo_m, hi_m, mean_q, lo_q, hi_q";

/// Writes a heat-exchanger band (states m, q) as CSV.
pub fn write_band_csv(band: &PredictiveBand, path: &Path) -> Result<()> {
    if band.n_states() != 2 {
        return Err(CoreError::Shape {
            context: "band csv states",
            expected: 2,
            actual: band.n_states(),
        });
    }
    let file = std::fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<std::fs::File>, line: &str| {
        writeln!(w, "{line}").map_err(|e| CoreError::io(path.display().to_string(), e))
    };
    write(&mut w, BAND_CSV_HEADER)?;
    for k in 0..band.grid.n_steps() {
        let fields = [
            band.grid.time(k),
            band.mean[(k, 0)],
            band.lower[(k, 0)],
            band.upper[(k, 0)],
            band.mean[(k, 1)],
            band.lower[(k, 1)],
            band.upper[(k, 1)],
        ];
        let line = fields.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(",");
        write(&mut w, &line)?;
    }
    w.flush().map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Serializable description of a fitted Gaussian and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvgArtifact {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major dim × dim covariance.
    pub covariance: Vec<f64>,
    pub shrinkage: f64,
    pub subset_ids: Vec<Vec<usize>>,
    pub seed: u64,
    pub stream_label: String,
}

impl MvgArtifact {
    pub fn new(model: &MvgModel, ensemble: &CoefficientEnsemble, stream: &RngStream) -> Self {
        let p = model.dim();
        let mut covariance = Vec::with_capacity(p * p);
        for i in 0..p {
            for j in 0..p {
                covariance.push(model.covariance()[(i, j)]);
            }
        }
        MvgArtifact {
            dim: p,
            mean: model.mean().as_slice().to_vec(),
            covariance,
            shrinkage: model.shrinkage(),
            subset_ids: ensemble.subset_ids().to_vec(),
            seed: stream.seed(),
            stream_label: stream.label().to_string(),
        }
    }

    pub fn model(&self) -> Result<MvgModel> {
        if self.mean.len() != self.dim || self.covariance.len() != self.dim * self.dim {
            return Err(CoreError::Manifest(format!(
                "inconsistent gaussian artifact: dim {} with {} mean and {} covariance entries",
                self.dim,
                self.mean.len(),
                self.covariance.len()
            )));
        }
        let mean = DVector::from_column_slice(&self.mean);
        let covariance = DMatrix::from_row_slice(self.dim, self.dim, &self.covariance);
        MvgModel::new(mean, covariance, self.shrinkage)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::ode::Dopri5;
    use crate::types::{GhxState, Provenance, TesState, Trajectory};

    /// Planted affine dynamics, slightly perturbed per trajectory id so
    /// subset fits disagree and the ensemble has genuine spread.
    fn pool_trajectory(id: usize, grid: &TimeGrid) -> Trajectory {
        let mut prng = RngStream::new(5, format!("pool-model/{id}")).rng();
        let mut wiggle = move || 1.0 + 0.1 * prng.gen_range(-1.0..1.0);
        let a = [
            [-0.08 * wiggle(), 0.03 * wiggle()],
            [0.02 * wiggle(), -0.06 * wiggle()],
        ];
        let b = [
            [0.04 * wiggle(), 0.02 * wiggle(), 0.0005, 0.0003],
            [0.01 * wiggle(), 0.05 * wiggle(), 0.0008, 0.0006],
        ];
        let d = [0.02 * wiggle(), 0.015 * wiggle()];
        let phase = id as f64 * 0.7;
        let u_at = move |t: f64| -> [f64; 4] {
            [
                0.5 + 0.3 * (0.08 * t + phase).sin(),
                0.3 + 0.15 * (0.13 * t + 1.0 + phase).sin(),
                300.0 + 5.0 * (0.21 * t + 2.0 + phase).sin(),
                360.0 + 10.0 * (0.34 * t + 3.0 + phase).sin(),
            ]
        };
        let mut f = move |t: f64, y: &[f64], dy: &mut [f64]| -> Result<()> {
            let u = u_at(t);
            for i in 0..2 {
                dy[i] = d[i] + a[i][0] * y[0] + a[i][1] * y[1];
                for j in 0..4 {
                    dy[i] += b[i][j] * u[j];
                }
            }
            Ok(())
        };
        let mut solver = Dopri5::new(1e-10, 1e-10);
        let mut y = [3.0, 2.0];
        let n = grid.n_steps();
        let mut controls = Vec::with_capacity(n);
        let mut ghx = Vec::with_capacity(n);
        for k in 0..n {
            if k > 0 {
                solver
                    .integrate(&mut f, grid.time(k - 1), &mut y, grid.time(k))
                    .unwrap();
            }
            controls.push(ControlVector::from_array(u_at(grid.time(k))));
            ghx.push(GhxState {
                m_ghx: y[0],
                q_ghx: y[1],
            });
        }
        let tes = vec![
            TesState {
                m_tes_in: 0.3,
                t_tes_out: 300.0,
                t_top: 330.0,
                t_mid: 320.0,
                t_bot: 310.0,
            };
            n
        ];
        Trajectory::new(id, Provenance::Simulated, *grid, controls, ghx, tes).unwrap()
    }

    fn pool(n: usize) -> Dataset {
        let grid = TimeGrid::new(0.0, 0.2, 201).unwrap();
        Dataset::new((0..n).map(|id| pool_trajectory(id, &grid)).collect()).unwrap()
    }

    #[test]
    fn ensemble_subsets_are_distinct_and_deterministic() {
        let pool = pool(8);
        let stream = RngStream::new(5, "ensemble");
        let first = build_ensemble(&pool, 12, 4, StlsqConfig::ghx(), &stream).unwrap();
        assert_eq!(first.n_models(), 12);
        assert_eq!(first.dim(), 14);
        let distinct: BTreeSet<_> = first.subset_ids().iter().cloned().collect();
        assert_eq!(distinct.len(), 12);
        for subset in first.subset_ids() {
            assert_eq!(subset.len(), 4);
            assert!(subset.windows(2).all(|w| w[0] < w[1]));
        }
        let second = build_ensemble(&pool, 12, 4, StlsqConfig::ghx(), &stream).unwrap();
        assert_eq!(second.subset_ids(), first.subset_ids());
        assert_eq!(second.vectors(), first.vectors());
    }

    #[test]
    fn exhaustive_subset_equals_full_pool_fit() {
        let pool = pool(4);
        let ensemble =
            build_ensemble(&pool, 1, 4, StlsqConfig::ghx(), &RngStream::new(5, "full")).unwrap();
        let direct = fit_sindyc(&pool, StlsqConfig::ghx()).unwrap().flatten();
        assert_eq!(ensemble.vector(0).as_slice(), direct.as_slice());
    }

    #[test]
    fn requesting_more_subsets_than_exist_is_rejected() {
        let pool = pool(4);
        let err = build_ensemble(&pool, 2, 4, StlsqConfig::ghx(), &RngStream::new(5, "over"));
        assert!(matches!(
            err,
            Err(CoreError::Combinatorics {
                requested: 2,
                subset_size: 4,
                available: 4,
            })
        ));
    }

    #[test]
    fn failed_fits_are_excluded() {
        let grid = TimeGrid::new(0.0, 0.2, 201).unwrap();
        let mut trajectories: Vec<Trajectory> = (0..6).map(|id| pool_trajectory(id, &grid)).collect();
        trajectories[5].ghx[100].q_ghx = f64::NAN;
        let pool = Dataset::new(trajectories).unwrap();
        let ensemble =
            build_ensemble(&pool, 15, 4, StlsqConfig::ghx(), &RngStream::new(5, "poison")).unwrap();
        assert!(ensemble.n_models() < 15, "subsets touching the bad run must drop");
        assert!(ensemble.subset_ids().iter().all(|s| !s.contains(&5)));
        assert_eq!(
            ensemble.n_models(),
            15 - 10,
            "C(5,3) = 10 of the 15 4-subsets of 6 ids include id 5"
        );
    }

    #[test]
    fn covariance_matches_hand_example() {
        let vectors = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 2.0]);
        let ensemble = CoefficientEnsemble::new(vectors, vec![vec![0], vec![1]]).unwrap();
        let mvg = fit_mvg(&ensemble, Some(0.0)).unwrap();
        assert_eq!(mvg.mean().as_slice(), &[1.0, 1.0]);
        assert_eq!(
            mvg.covariance(),
            &DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0])
        );
    }

    #[test]
    fn identical_vectors_collapse_to_shrinkage() {
        let vectors = DMatrix::from_fn(5, 3, |_, c| c as f64 + 1.0);
        let ensemble = CoefficientEnsemble::new(vectors, vec![vec![]; 5]).unwrap();
        let mvg = fit_mvg(&ensemble, Some(1e-9)).unwrap();
        assert_eq!(mvg.covariance(), &(DMatrix::identity(3, 3) * 1e-9));
        assert!(matches!(
            fit_mvg(
                &CoefficientEnsemble::new(DMatrix::zeros(1, 3), vec![vec![]]).unwrap(),
                None,
            ),
            Err(CoreError::InsufficientData { minimum: 2, .. })
        ));
    }

    #[test]
    fn fitted_gaussian_approximates_the_sampling_law() {
        let target_mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let target_cov =
            DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.2, 0.3, 0.8, 0.25, 0.2, 0.25, 0.6]);
        let l = Cholesky::new(target_cov.clone()).unwrap().l();
        let mut rng = RngStream::new(5, "sampling-law").rng();
        let n = 5000;
        let vectors = DMatrix::from_fn(n, 3, |_, _| 0.0);
        let mut vectors = vectors;
        for r in 0..n {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &target_mean + &l * z;
            for c in 0..3 {
                vectors[(r, c)] = x[c];
            }
        }
        let ensemble = CoefficientEnsemble::new(vectors, vec![vec![]; n]).unwrap();
        let mvg = fit_mvg(&ensemble, Some(0.0)).unwrap();
        for j in 0..3 {
            let se = (target_cov[(j, j)] / n as f64).sqrt();
            assert!(
                (mvg.mean()[j] - target_mean[j]).abs() < 3.0 * se,
                "mean component {j} off by more than 3 standard errors"
            );
            for i in 0..3 {
                let rel = (mvg.covariance()[(i, j)] - target_cov[(i, j)]).abs() / target_cov[(i, j)];
                assert!(rel < 0.1, "covariance ({i},{j}) off by {rel:.3}");
            }
        }
    }

    #[test]
    fn mahalanobis_hand_values() {
        let a = DVector::from_vec(vec![3.0, 4.0]);
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(mahalanobis(&a, &a, &i2).unwrap(), 0.0);

        let origin = DVector::zeros(2);
        assert!((mahalanobis(&a, &origin, &i2).unwrap() - 5.0).abs() < 1e-12);

        let sigma = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0]);
        let d = mahalanobis(&b, &origin, &sigma).unwrap();
        assert!((d - 10.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_is_invariant_under_linear_maps() {
        let mut rng = RngStream::new(5, "invariance").rng();
        for trial in 0..20 {
            let p = 4;
            let a = DVector::from_fn(p, |_, _| rng.gen_range(-2.0..2.0));
            let a_ref = DVector::from_fn(p, |_, _| rng.gen_range(-2.0..2.0));
            let m = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-1.0..1.0));
            let sigma = &m * m.transpose() + DMatrix::identity(p, p) * 0.1;
            let mut l = DMatrix::from_fn(p, p, |_, _| rng.gen_range(-0.5..0.5));
            for i in 0..p {
                l[(i, i)] += 3.0;
            }
            let base = mahalanobis(&a, &a_ref, &sigma).unwrap();
            let mapped_sigma = &l * &sigma * l.transpose();
            let mapped_sigma = (&mapped_sigma + mapped_sigma.transpose()) * 0.5;
            let mapped = mahalanobis(&(&l * &a), &(&l * &a_ref), &mapped_sigma).unwrap();
            assert!(
                (base - mapped).abs() < 1e-10 * base.max(1.0),
                "trial {trial}: {base} vs {mapped}"
            );
        }
    }

    #[test]
    fn singular_covariance_is_reported() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        let b = DVector::zeros(2);
        let err = mahalanobis(&a, &b, &DMatrix::zeros(2, 2));
        assert!(matches!(err, Err(CoreError::SingularCovariance { .. })));

        let model = MvgModel::new(DVector::zeros(2), DMatrix::zeros(2, 2), 0.25).unwrap();
        match model.mahalanobis(&a, &b) {
            Err(CoreError::SingularCovariance { delta }) => assert_eq!(delta, 0.25),
            other => panic!("expected singular covariance, got {other:?}"),
        }
    }

    fn stable_two_state_mean() -> DVector<f64> {
        LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.05, -0.4]),
            DMatrix::from_row_slice(2, 4, &[0.2, 0.1, 0.001, 0.0, 0.05, 0.3, 0.0, 0.001]),
            DVector::from_vec(vec![0.3, 0.2]),
        )
        .unwrap()
        .flatten()
    }

    fn steady_controls(n: usize) -> Vec<ControlVector> {
        vec![
            ControlVector {
                pv006: 0.5,
                m_pump_out: 0.3,
                t_pump_in: 300.0,
                t_heater_out: 350.0,
            };
            n
        ]
    }

    #[test]
    fn band_collapses_for_tiny_covariance() {
        let mean = stable_two_state_mean();
        let p = mean.len();
        let mvg = MvgModel::new(mean.clone(), DMatrix::identity(p, p) * 1e-20, 1e-20).unwrap();
        let grid = TimeGrid::new(0.0, 0.5, 41).unwrap();
        let controls = steady_controls(41);
        let x0 = DVector::from_vec(vec![1.0, 1.5]);
        let band = predictive_band(&mvg, &x0, &controls, &grid, 100, &RngStream::new(5, "tiny"))
            .unwrap();
        assert_eq!(band.n_samples(), 100);

        let reference = rollout(
            &LinearModel::unflatten(&mean, 2, 4).unwrap(),
            &x0,
            &controls,
            &grid,
            RolloutConfig::default(),
        )
        .unwrap();
        for k in 0..41 {
            for j in 0..2 {
                assert!((band.upper()[(k, j)] - band.lower()[(k, j)]).abs() < 1e-6);
                assert!((band.mean()[(k, j)] - reference[k][j]).abs() < 1e-7);
            }
        }
    }

    /// One-state family ẋ = −k·x with k ~ N(1, 0.01): coefficient vector
    /// [d, a, b₁..b₄] with only the state coupling a = −k random.
    fn decay_family() -> MvgModel {
        let mean = DVector::from_vec(vec![0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut cov = DMatrix::identity(6, 6) * 1e-20;
        cov[(1, 1)] = 0.01;
        MvgModel::new(mean, cov, 1e-20).unwrap()
    }

    #[test]
    fn band_matches_monte_carlo_oracle_on_decay_family() {
        let grid = TimeGrid::new(0.0, 0.1, 11).unwrap();
        let controls = steady_controls(11);
        let band = predictive_band(
            &decay_family(),
            &DVector::from_element(1, 1.0),
            &controls,
            &grid,
            5000,
            &RngStream::new(5, "band"),
        )
        .unwrap();

        let mut rng = RngStream::new(99, "band-oracle").rng();
        let mut draws: Vec<f64> = (0..5000)
            .map(|_| {
                let k = 1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal);
                (-k).exp()
            })
            .collect();
        draws.sort_unstable_by(|a, b| a.total_cmp(b));
        let oracle_lo = quantile(&draws, 0.025);
        let oracle_hi = quantile(&draws, 0.975);
        let oracle_mean = draws.iter().sum::<f64>() / draws.len() as f64;

        let last = grid.n_steps() - 1;
        for (got, want) in [
            (band.lower()[(last, 0)], oracle_lo),
            (band.upper()[(last, 0)], oracle_hi),
            (band.mean()[(last, 0)], oracle_mean),
        ] {
            assert!(
                (got - want).abs() < 0.02 * want,
                "band {got} vs oracle {want}"
            );
        }
        for k in 0..11 {
            assert!(band.lower()[(k, 0)] <= band.mean()[(k, 0)]);
            assert!(band.mean()[(k, 0)] <= band.upper()[(k, 0)]);
        }
    }

    #[test]
    fn band_width_stabilizes_with_more_samples() {
        let grid = TimeGrid::new(0.0, 0.1, 11).unwrap();
        let controls = steady_controls(11);
        let x0 = DVector::from_element(1, 1.0);
        let rms_width = |n_samples: usize, label: &str| -> f64 {
            let band = predictive_band(
                &decay_family(),
                &x0,
                &controls,
                &grid,
                n_samples,
                &RngStream::new(5, label),
            )
            .unwrap();
            let mut acc = 0.0;
            for k in 0..11 {
                let w = band.upper()[(k, 0)] - band.lower()[(k, 0)];
                acc += w * w;
            }
            (acc / 11.0).sqrt()
        };
        let base = rms_width(2000, "w2000");
        let doubled = rms_width(4000, "w4000");
        assert!(
            (doubled - base).abs() / base < 0.05,
            "rms width moved {base} -> {doubled}"
        );
    }

    #[test]
    fn instability_is_reported_when_samples_diverge() {
        let unstable = LinearModel::new(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 4),
            DVector::zeros(1),
        )
        .unwrap()
        .flatten();
        let mvg = MvgModel::new(unstable, DMatrix::identity(6, 6) * 1e-20, 1e-20).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 26).unwrap();
        match predictive_band(
            &mvg,
            &DVector::from_element(1, 1.0),
            &steady_controls(26),
            &grid,
            100,
            &RngStream::new(5, "unstable"),
        ) {
            Err(CoreError::Instability { divergent, total }) => {
                assert_eq!(total, 100);
                assert!(divergent > 50);
            }
            other => panic!("expected instability, got {other:?}"),
        }
    }

    fn hand_band() -> PredictiveBand {
        let n = 5;
        PredictiveBand {
            grid: TimeGrid::new(0.0, 1.0, n).unwrap(),
            mean: DMatrix::from_element(n, 2, 1.0),
            lower: DMatrix::from_element(n, 2, 0.5),
            upper: DMatrix::from_element(n, 2, 1.5),
            n_samples: 100,
        }
    }

    #[test]
    fn coverage_counts_points_inside_the_band() {
        let band = hand_band();
        assert_eq!(coverage(&band, band.mean()).unwrap(), vec![1.0, 1.0]);
        let above = DMatrix::from_element(5, 2, 9.0);
        assert_eq!(coverage(&band, &above).unwrap(), vec![0.0, 0.0]);

        let mut mixed = band.mean().clone();
        mixed[(0, 0)] = 2.0;
        mixed[(1, 0)] = 0.1;
        assert_eq!(coverage(&band, &mixed).unwrap(), vec![0.6, 1.0]);

        assert!(matches!(
            coverage(&band, &DMatrix::zeros(4, 2)),
            Err(CoreError::Shape { .. })
        ));
    }

    #[test]
    fn widening_a_band_never_decreases_coverage() {
        let band = hand_band();
        let mut rng = RngStream::new(5, "widen").rng();
        let reference = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-0.5..2.5));
        let narrow = coverage(&band, &reference).unwrap();
        let wide = PredictiveBand {
            lower: band.lower().map(|v| v - 0.4),
            upper: band.upper().map(|v| v + 0.4),
            ..band
        };
        let wide_cov = coverage(&wide, &reference).unwrap();
        for j in 0..2 {
            assert!(wide_cov[j] >= narrow[j]);
        }
    }

    #[test]
    fn band_csv_has_documented_header_and_values() {
        let band = hand_band();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("band.csv");
        write_band_csv(&band, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], BAND_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 5);
        assert_eq!(lines[1], "0,1,0.5,1.5,1,0.5,1.5");
        assert_eq!(lines[2], "1,1,0.5,1.5,1,0.5,1.5");
    }

    #[test]
    fn gaussian_artifact_round_trips_through_json() {
        let pool = pool(6);
        let stream = RngStream::new(5, "artifact");
        let ensemble = build_ensemble(&pool, 8, 4, StlsqConfig::ghx(), &stream).unwrap();
        let mvg = fit_mvg(&ensemble, None).unwrap();
        let artifact = MvgArtifact::new(&mvg, &ensemble, &stream);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mvg.json");
        crate::io::write_json(&artifact, &path).unwrap();
        let loaded: MvgArtifact = crate::io::read_json(&path).unwrap();
        assert_eq!(loaded, artifact);
        let rebuilt = loaded.model().unwrap();
        assert_eq!(rebuilt.mean(), mvg.mean());
        assert_eq!(rebuilt.covariance(), mvg.covariance());
        assert_eq!(rebuilt.shrinkage(), mvg.shrinkage());
    }
}
