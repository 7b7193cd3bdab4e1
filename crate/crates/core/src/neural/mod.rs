//! Data-driven surrogates: a feedforward network over the controls and a
//! recurrent network over sliding windows of past states and controls, both
//! trained from scratch with Adam on mean squared error.

mod adam;
mod fnn;
mod gru;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::grid::TimeGrid;
use crate::rng::RngStream;
use crate::types::{ControlVector, Dataset, GhxState, N_CONTROLS, N_GHX_STATES};

pub use adam::Adam;
pub use fnn::{fnn_forward, FnnModel};
pub use gru::{gru_forward, GruModel};

use fnn::{fnn_backward, fnn_backward_and_step, fnn_loss};
use gru::{gru_backward, gru_backward_and_step, gru_loss};

const GRU_FEATURES: usize = N_GHX_STATES + N_CONTROLS;
const GRU_STACK: usize = 2;

/// Per-feature affine normalization, `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    offset: DVector<f64>,
    scale: DVector<f64>,
}

impl Normalizer {
    /// Zero-mean, unit-deviation statistics from `data` (one feature per
    /// row, one sample per column). Near-constant features get scale 1.
    pub fn standard(data: &DMatrix<f64>) -> Result<Normalizer> {
        let (mean, deviation) = row_stats(data)?;
        Normalizer::from_parts(mean, deviation)
    }

    /// Minimum-shifted statistics: offset is the per-feature minimum, scale
    /// the per-feature deviation. Normalized in-range values are
    /// non-negative, so a rectified output stays consistent with physically
    /// non-negative targets.
    pub fn min_shifted(data: &DMatrix<f64>) -> Result<Normalizer> {
        let (_, deviation) = row_stats(data)?;
        let minima = DVector::from_iterator(
            data.nrows(),
            (0..data.nrows()).map(|i| data.row(i).iter().cloned().fold(f64::INFINITY, f64::min)),
        );
        Normalizer::from_parts(minima, deviation)
    }

    pub fn identity(dim: usize) -> Normalizer {
        Normalizer {
            offset: DVector::zeros(dim),
            scale: DVector::from_element(dim, 1.0),
        }
    }

    pub fn from_parts(offset: DVector<f64>, scale: DVector<f64>) -> Result<Normalizer> {
        if offset.len() != scale.len() {
            return Err(CoreError::Shape {
                context: "normalizer dimensions",
                expected: offset.len(),
                actual: scale.len(),
            });
        }
        if offset.iter().chain(scale.iter()).any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteInput {
                context: "normalizer statistics",
            });
        }
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(CoreError::Parameter {
                name: "scale",
                reason: "normalizer scales must be positive".into(),
            });
        }
        Ok(Normalizer { offset, scale })
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn scale(&self) -> &DVector<f64> {
        &self.scale
    }

    pub fn normalize(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v - &self.offset;
        out.component_div_assign(&self.scale);
        out
    }

    pub fn denormalize(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.component_mul(&self.scale);
        out += &self.offset;
        out
    }

    pub(crate) fn normalize_columns_in_place(&self, m: &mut DMatrix<f64>) {
        for mut col in m.column_iter_mut() {
            col -= &self.offset;
            col.component_div_assign(&self.scale);
        }
    }
}

fn row_stats(data: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    if data.ncols() == 0 {
        return Err(CoreError::InsufficientData {
            context: "normalization statistics",
            minimum: 1,
            actual: 0,
        });
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: "normalization statistics",
        });
    }
    let n = data.ncols() as f64;
    let mean = data.column_mean();
    let mut deviation = DVector::zeros(data.nrows());
    for i in 0..data.nrows() {
        let mut acc = 0.0;
        for j in 0..data.ncols() {
            let d = data[(i, j)] - mean[i];
            acc += d * d;
        }
        let s = (acc / n).sqrt();
        deviation[i] = if s <= mean[i].abs().max(1.0) * 1e-12 {
            1.0
        } else {
            s
        };
    }
    Ok((mean, deviation))
}

/// Which network family a training run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    Fnn,
    Gru,
}

impl SurrogateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Fnn => "fnn",
            SurrogateKind::Gru => "gru",
        }
    }
}

/// Optimizer and architecture settings for one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_width: usize,
    pub lookback: usize,
    #[serde(default)]
    pub one_step_ahead: bool,
}

impl TrainConfig {
    /// Feedforward defaults: two rectified hidden layers, 40 epochs.
    pub fn fnn() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 40,
            batch_size: 256,
            hidden_width: 128,
            lookback: 120,
            one_step_ahead: false,
        }
    }

    /// Recurrent defaults: two stacked layers, lookback 120, 20 epochs.
    pub fn gru() -> TrainConfig {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            ..TrainConfig::fnn()
        }
    }

    /// Shrinks the architecture for fast runs: width 32, lookback 30.
    pub fn desk(mut self) -> TrainConfig {
        self.hidden_width = 32;
        self.lookback = 30;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(CoreError::Parameter {
                name: "learning_rate",
                reason: format!("must be positive, got {}", self.learning_rate),
            });
        }
        for (name, value) in [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden_width", self.hidden_width),
            ("lookback", self.lookback),
        ] {
            if value == 0 {
                return Err(CoreError::Parameter {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        Adam::new(self.learning_rate, self.beta1, self.beta2, self.epsilon).map(|_| ())
    }
}

/// A trained network of either family, with normalization embedded.
#[derive(Debug, Clone)]
pub enum NeuralModel {
    Fnn(FnnModel),
    Gru(GruModel),
}

impl NeuralModel {
    pub fn kind(&self) -> SurrogateKind {
        match self {
            NeuralModel::Fnn(_) => SurrogateKind::Fnn,
            NeuralModel::Gru(_) => SurrogateKind::Gru,
        }
    }
}

/// Trains a surrogate of the requested family on `train`.
pub fn train_surrogate(
    kind: SurrogateKind,
    train: &Dataset,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<NeuralModel> {
    train_with_history(kind, train, cfg, stream).map(|(model, _)| model)
}

/// Like [`train_surrogate`] but also returns the per-epoch mean loss curve
/// (normalized space).
pub fn train_with_history(
    kind: SurrogateKind,
    train: &Dataset,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(NeuralModel, Vec<f64>)> {
    cfg.validate()?;
    match kind {
        SurrogateKind::Fnn => {
            let (model, history) = train_fnn(train, cfg, stream)?;
            Ok((NeuralModel::Fnn(model), history))
        }
        SurrogateKind::Gru => {
            let (model, history) = train_gru(train, cfg, stream)?;
            Ok((NeuralModel::Gru(model), history))
        }
    }
}

/// Supervised pairs for the feedforward network: the control vector at a
/// step maps to the exchanger state at the same step, or at the next step
/// when `one_step_ahead` is set.
pub(crate) fn fnn_pairs(train: &Dataset, one_step_ahead: bool) -> (DMatrix<f64>, DMatrix<f64>) {
    let shift = usize::from(one_step_ahead);
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for traj in train.iter() {
        let n = traj.grid.n_steps();
        for t in 0..n.saturating_sub(shift) {
            inputs.extend_from_slice(&traj.controls[t].as_array());
            targets.extend_from_slice(&traj.ghx[t + shift].as_array());
        }
    }
    let n_pairs = inputs.len() / N_CONTROLS;
    (
        DMatrix::from_vec(N_CONTROLS, n_pairs, inputs),
        DMatrix::from_vec(N_GHX_STATES, n_pairs, targets),
    )
}

fn gather_columns(source: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(source.nrows(), idx.len(), |r, k| source[(r, idx[k])])
}

fn train_fnn(
    train: &Dataset,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(FnnModel, Vec<f64>)> {
    let (mut x, mut targets) = fnn_pairs(train, cfg.one_step_ahead);
    if x.ncols() == 0 {
        return Err(CoreError::InsufficientData {
            context: "network training pairs",
            minimum: 1,
            actual: 0,
        });
    }
    let input_norm = Normalizer::standard(&x)?;
    let output_norm = Normalizer::standard(&targets)?;
    input_norm.normalize_columns_in_place(&mut x);
    output_norm.normalize_columns_in_place(&mut targets);

    let dims = [
        N_CONTROLS,
        cfg.hidden_width,
        cfg.hidden_width,
        N_GHX_STATES,
    ];
    let mut model = FnnModel::new(&dims, input_norm, output_norm, &stream.child("init"))?;
    let mut opt = Adam::from_config(cfg)?;
    let mut shuffle_rng = stream.child("shuffle").rng();
    let n = x.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xb = gather_columns(&x, chunk);
            let tb = gather_columns(&targets, chunk);
            let loss = fnn_backward_and_step(&mut model, &xb, &tb, &mut opt)?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDivergence { epoch, batch });
            }
            total += loss * chunk.len() as f64;
        }
        history.push(total / n as f64);
    }
    Ok((model, history))
}

fn gru_feature_matrix(traj: &crate::types::Trajectory) -> DMatrix<f64> {
    let n = traj.grid.n_steps();
    let mut values = Vec::with_capacity(GRU_FEATURES * n);
    for t in 0..n {
        values.extend_from_slice(&traj.ghx[t].as_array());
        values.extend_from_slice(&traj.controls[t].as_array());
    }
    DMatrix::from_vec(GRU_FEATURES, n, values)
}

fn train_gru(
    train: &Dataset,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(GruModel, Vec<f64>)> {
    let lookback = cfg.lookback;
    let offenders: Vec<usize> = train
        .iter()
        .filter(|t| t.grid.n_steps() < lookback + 1)
        .map(|t| t.id)
        .collect();
    if !offenders.is_empty() {
        return Err(CoreError::Data {
            reason: format!("shorter than the lookback window {lookback} plus one step"),
            ids: offenders,
        });
    }

    let mut feats: Vec<DMatrix<f64>> = train.iter().map(gru_feature_matrix).collect();
    let mut outs: Vec<DMatrix<f64>> = train
        .iter()
        .map(|traj| {
            let mut values = Vec::with_capacity(N_GHX_STATES * traj.grid.n_steps());
            for s in &traj.ghx {
                values.extend_from_slice(&s.as_array());
            }
            DMatrix::from_vec(N_GHX_STATES, traj.grid.n_steps(), values)
        })
        .collect();
    let total: usize = feats.iter().map(|f| f.ncols()).sum();
    let mut all_feats = DMatrix::zeros(GRU_FEATURES, total);
    let mut all_outs = DMatrix::zeros(N_GHX_STATES, total);
    let mut col = 0;
    for (f, o) in feats.iter().zip(&outs) {
        all_feats.columns_mut(col, f.ncols()).copy_from(f);
        all_outs.columns_mut(col, o.ncols()).copy_from(o);
        col += f.ncols();
    }
    let input_norm = Normalizer::standard(&all_feats)?;
    let output_norm = Normalizer::min_shifted(&all_outs)?;
    for f in &mut feats {
        input_norm.normalize_columns_in_place(f);
    }
    for o in &mut outs {
        output_norm.normalize_columns_in_place(o);
    }

    let mut windows = Vec::new();
    for (ti, f) in feats.iter().enumerate() {
        for t in lookback..f.ncols() {
            windows.push((ti, t));
        }
    }

    let mut model = GruModel::new(
        cfg.hidden_width,
        GRU_STACK,
        lookback,
        input_norm,
        output_norm,
        &stream.child("init"),
    )?;
    let mut opt = Adam::from_config(cfg)?;
    let mut shuffle_rng = stream.child("shuffle").rng();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<DMatrix<f64>> = (0..lookback)
                .map(|s| {
                    DMatrix::from_fn(GRU_FEATURES, chunk.len(), |r, k| {
                        let (ti, t) = windows[chunk[k]];
                        feats[ti][(r, t - lookback + s)]
                    })
                })
                .collect();
            let tb = DMatrix::from_fn(N_GHX_STATES, chunk.len(), |r, k| {
                let (ti, t) = windows[chunk[k]];
                outs[ti][(r, t)]
            });
            let loss = gru_backward_and_step(&mut model, &xs, &tb, &mut opt)?;
            if !loss.is_finite() {
                return Err(CoreError::TrainingDivergence { epoch, batch });
            }
            total += loss * chunk.len() as f64;
        }
        history.push(total / windows.len() as f64);
    }
    Ok((model, history))
}

/// Predicts the exchanger state sequence over `grid`.
///
/// The feedforward network maps each control vector independently. The
/// recurrent network needs a warm start of at least `lookback` true states;
/// window positions beyond the warm start are filled with the network's own
/// predictions, so a warm start covering the whole grid reduces to
/// teacher-forced one-step prediction.
pub fn predict_trajectory(
    model: &NeuralModel,
    controls: &[ControlVector],
    warm_start: &[GhxState],
    grid: &TimeGrid,
) -> Result<Vec<GhxState>> {
    let n = grid.n_steps();
    if controls.len() != n {
        return Err(CoreError::Shape {
            context: "control sequence length",
            expected: n,
            actual: controls.len(),
        });
    }
    match model {
        NeuralModel::Fnn(m) => controls
            .iter()
            .map(|c| {
                let y = fnn_forward(m, &DVector::from_column_slice(&c.as_array()))?;
                Ok(GhxState::from_array([y[0], y[1]]))
            })
            .collect(),
        NeuralModel::Gru(m) => {
            let lookback = m.lookback();
            if warm_start.len() < lookback {
                return Err(CoreError::Data {
                    reason: format!(
                        "warm start of {} states is shorter than the lookback window {lookback}",
                        warm_start.len()
                    ),
                    ids: Vec::new(),
                });
            }
            if warm_start.len() > n {
                return Err(CoreError::Shape {
                    context: "warm start length",
                    expected: n,
                    actual: warm_start.len(),
                });
            }
            let warm_len = warm_start.len();
            let mut predicted = vec![[0.0; N_GHX_STATES]; n];
            let mut out: Vec<GhxState> = warm_start[..lookback].to_vec();
            out.reserve(n - lookback);
            for t in lookback..n {
                let window: Vec<DVector<f64>> = (t - lookback..t)
                    .map(|s| {
                        let state = if s < warm_len {
                            warm_start[s].as_array()
                        } else {
                            predicted[s]
                        };
                        let c = controls[s].as_array();
                        DVector::from_column_slice(&[
                            state[0], state[1], c[0], c[1], c[2], c[3],
                        ])
                    })
                    .collect();
                let y = gru_forward(m, &window)?;
                predicted[t] = [y[0], y[1]];
                out.push(GhxState::from_array(predicted[t]));
            }
            Ok(out)
        }
    }
}

fn max_finite_difference_error<M>(
    model: &mut M,
    analytic: &[Vec<f64>],
    groups: fn(&mut M) -> Vec<&mut [f64]>,
    mut loss: impl FnMut(&M) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for (g, group) in analytic.iter().enumerate() {
        for i in 0..group.len() {
            let orig = groups(model)[g][i];
            groups(model)[g][i] = orig + h;
            let plus = loss(model);
            groups(model)[g][i] = orig - h;
            let minus = loss(model);
            groups(model)[g][i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let denom = group[i].abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max((group[i] - fd).abs() / denom);
        }
    }
    max_rel
}

/// Verifies backpropagation on a small randomly initialized network of the
/// requested family: sweeps every parameter with central finite differences
/// and returns the worst relative disagreement against the analytic
/// gradient. A correct implementation stays well under 1e-4.
pub fn gradient_check(kind: SurrogateKind, stream: &RngStream) -> Result<f64> {
    match kind {
        SurrogateKind::Fnn => {
            let mut model = FnnModel::new(
                &[3, 5, 4, 2],
                Normalizer::identity(3),
                Normalizer::identity(2),
                &stream.child("model"),
            )?;
            let mut rng = stream.child("batch").rng();
            let x = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.5..1.5));
            let t = DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0));
            let (_, grads) = fnn_backward(&model, &x, &t);
            let analytic: Vec<Vec<f64>> = grads
                .layers
                .iter()
                .flat_map(|(gw, gb)| [gw.as_slice().to_vec(), gb.as_slice().to_vec()])
                .collect();
            Ok(max_finite_difference_error(
                &mut model,
                &analytic,
                FnnModel::param_groups_mut,
                |m| fnn_loss(m, &x, &t),
            ))
        }
        SurrogateKind::Gru => {
            let mut model = GruModel::new(
                4,
                GRU_STACK,
                5,
                Normalizer::identity(3),
                Normalizer::identity(2),
                &stream.child("model"),
            )?;
            let mut rng = stream.child("batch").rng();
            let xs: Vec<DMatrix<f64>> = (0..5)
                .map(|_| DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            let t = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(0.0..1.0));
            let (_, grads) = gru_backward(&model, &xs, &t);
            let analytic: Vec<Vec<f64>> = grads
                .group_slices()
                .into_iter()
                .map(|s| s.to_vec())
                .collect();
            Ok(max_finite_difference_error(
                &mut model,
                &analytic,
                GruModel::param_groups_mut,
                |m| gru_loss(m, &xs, &t),
            ))
        }
    }
}

/// Serializable weight dump: architecture header, row-major parameter
/// groups, normalization statistics, training settings, and the stream that
/// seeded initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralArtifact {
    pub kind: SurrogateKind,
    pub dims: Vec<usize>,
    pub lookback: usize,
    pub input_offset: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_offset: Vec<f64>,
    pub output_scale: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub train: TrainConfig,
    pub seed: u64,
    pub stream_label: String,
}

fn mat_rows(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn rows_mat(group: usize, nrows: usize, ncols: usize, values: &[f64]) -> Result<DMatrix<f64>> {
    if values.len() != nrows * ncols {
        return Err(CoreError::Manifest(format!(
            "weight group {group} holds {} values, expected {}",
            values.len(),
            nrows * ncols
        )));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, values))
}

fn rows_vec(group: usize, len: usize, values: &[f64]) -> Result<DVector<f64>> {
    if values.len() != len {
        return Err(CoreError::Manifest(format!(
            "weight group {group} holds {} values, expected {len}",
            values.len()
        )));
    }
    Ok(DVector::from_column_slice(values))
}

impl NeuralArtifact {
    pub fn new(model: &NeuralModel, train: TrainConfig, stream: &RngStream) -> NeuralArtifact {
        let (kind, dims, lookback, input_norm, output_norm, weights) = match model {
            NeuralModel::Fnn(m) => {
                let weights = m
                    .layers()
                    .iter()
                    .flat_map(|l| [mat_rows(&l.w), l.b.as_slice().to_vec()])
                    .collect();
                (
                    SurrogateKind::Fnn,
                    m.dims(),
                    0,
                    m.input_norm(),
                    m.output_norm(),
                    weights,
                )
            }
            NeuralModel::Gru(m) => {
                let mut dims = vec![m.input_norm().dim()];
                dims.extend(std::iter::repeat(m.hidden_width()).take(m.n_layers()));
                dims.push(m.output_norm().dim());
                let mut weights: Vec<Vec<f64>> = Vec::with_capacity(9 * m.n_layers() + 2);
                for l in m.layer_parts() {
                    weights.push(mat_rows(&l.wz));
                    weights.push(mat_rows(&l.uz));
                    weights.push(l.bz.as_slice().to_vec());
                    weights.push(mat_rows(&l.wr));
                    weights.push(mat_rows(&l.ur));
                    weights.push(l.br.as_slice().to_vec());
                    weights.push(mat_rows(&l.wc));
                    weights.push(mat_rows(&l.uc));
                    weights.push(l.bc.as_slice().to_vec());
                }
                let (w_out, b_out) = m.projection();
                weights.push(mat_rows(w_out));
                weights.push(b_out.as_slice().to_vec());
                (
                    SurrogateKind::Gru,
                    dims,
                    m.lookback(),
                    m.input_norm(),
                    m.output_norm(),
                    weights,
                )
            }
        };
        NeuralArtifact {
            kind,
            dims,
            lookback,
            input_offset: input_norm.offset().as_slice().to_vec(),
            input_scale: input_norm.scale().as_slice().to_vec(),
            output_offset: output_norm.offset().as_slice().to_vec(),
            output_scale: output_norm.scale().as_slice().to_vec(),
            weights,
            train,
            seed: stream.seed(),
            stream_label: stream.label().to_string(),
        }
    }

    /// Reconstructs the network, validating the header against the stored
    /// weight groups.
    pub fn model(&self) -> Result<NeuralModel> {
        if self.dims.len() < 2 {
            return Err(CoreError::Manifest(format!(
                "architecture header needs at least two widths, got {:?}",
                self.dims
            )));
        }
        let input_norm = Normalizer::from_parts(
            DVector::from_column_slice(&self.input_offset),
            DVector::from_column_slice(&self.input_scale),
        )?;
        let output_norm = Normalizer::from_parts(
            DVector::from_column_slice(&self.output_offset),
            DVector::from_column_slice(&self.output_scale),
        )?;
        match self.kind {
            SurrogateKind::Fnn => {
                let expected = 2 * (self.dims.len() - 1);
                if self.weights.len() != expected {
                    return Err(CoreError::Manifest(format!(
                        "feedforward artifact holds {} weight groups, expected {expected}",
                        self.weights.len()
                    )));
                }
                let mut layers = Vec::with_capacity(self.dims.len() - 1);
                for (i, pair) in self.dims.windows(2).enumerate() {
                    let w = rows_mat(2 * i, pair[1], pair[0], &self.weights[2 * i])?;
                    let b = rows_vec(2 * i + 1, pair[1], &self.weights[2 * i + 1])?;
                    layers.push((w, b));
                }
                Ok(NeuralModel::Fnn(FnnModel::from_layers(
                    layers,
                    input_norm,
                    output_norm,
                )?))
            }
            SurrogateKind::Gru => {
                let n_layers = self.dims.len() - 2;
                if n_layers == 0 {
                    return Err(CoreError::Manifest(
                        "recurrent artifact header lists no hidden widths".into(),
                    ));
                }
                let hidden = self.dims[1];
                if self.dims[1..=n_layers].iter().any(|&w| w != hidden) {
                    return Err(CoreError::Manifest(format!(
                        "stacked recurrent widths must match, got {:?}",
                        self.dims
                    )));
                }
                let expected = 9 * n_layers + 2;
                if self.weights.len() != expected {
                    return Err(CoreError::Manifest(format!(
                        "recurrent artifact holds {} weight groups, expected {expected}",
                        self.weights.len()
                    )));
                }
                let mut layers = Vec::with_capacity(n_layers);
                let mut in_dim = self.dims[0];
                for l in 0..n_layers {
                    let g = 9 * l;
                    layers.push(gru::GruLayer {
                        wz: rows_mat(g, hidden, in_dim, &self.weights[g])?,
                        uz: rows_mat(g + 1, hidden, hidden, &self.weights[g + 1])?,
                        bz: rows_vec(g + 2, hidden, &self.weights[g + 2])?,
                        wr: rows_mat(g + 3, hidden, in_dim, &self.weights[g + 3])?,
                        ur: rows_mat(g + 4, hidden, hidden, &self.weights[g + 4])?,
                        br: rows_vec(g + 5, hidden, &self.weights[g + 5])?,
                        wc: rows_mat(g + 6, hidden, in_dim, &self.weights[g + 6])?,
                        uc: rows_mat(g + 7, hidden, hidden, &self.weights[g + 7])?,
                        bc: rows_vec(g + 8, hidden, &self.weights[g + 8])?,
                    });
                    in_dim = hidden;
                }
                let g = 9 * n_layers;
                let w_out = rows_mat(g, *self.dims.last().unwrap(), hidden, &self.weights[g])?;
                let b_out = rows_vec(g + 1, *self.dims.last().unwrap(), &self.weights[g + 1])?;
                Ok(NeuralModel::Gru(GruModel::from_parts(
                    layers,
                    w_out,
                    b_out,
                    self.lookback,
                    input_norm,
                    output_norm,
                )?))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::sim::{generate_dataset, BedConfig, GhxConfig, InitialProfile, ScheduleBounds};
    use crate::timeseries::rmse;
    use crate::types::{Provenance, TesState, Trajectory};
    use proptest::prelude::*;
    use rand::Rng;

    fn constant_trajectory(id: usize, n: usize, controls: [f64; 4], ghx: [f64; 2]) -> Trajectory {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        Trajectory::new(
            id,
            Provenance::Simulated,
            grid,
            vec![ControlVector::from_array(controls); n],
            vec![GhxState::from_array(ghx); n],
            vec![TesState::from_array([0.3, 300.0, 330.0, 320.0, 310.0]); n],
        )
        .unwrap()
    }

    fn wavy_trajectory(id: usize, n: usize) -> Trajectory {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let phase = 0.6 * id as f64;
        let mut controls = Vec::with_capacity(n);
        let mut ghx = Vec::with_capacity(n);
        for t in 0..n {
            let x = t as f64 * 0.07 + phase;
            let u = [
                0.5 + 0.4 * x.sin(),
                0.3 + 0.1 * (1.3 * x).cos(),
                300.0 + 4.0 * (0.7 * x).sin(),
                355.0 + 8.0 * (0.4 * x).cos(),
            ];
            controls.push(ControlVector::from_array(u));
            ghx.push(GhxState::from_array([
                0.2 + 0.1 * u[0] + 0.05 * (0.5 * x).sin(),
                1500.0 + 900.0 * u[0] * u[1] + 40.0 * (0.3 * x).cos(),
            ]));
        }
        Trajectory::new(
            id,
            Provenance::Simulated,
            grid,
            controls,
            ghx,
            vec![TesState::from_array([0.3, 300.0, 330.0, 320.0, 310.0]); n],
        )
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn normalization_round_trips(
            seed in 0u64..1000,
            dim in 1usize..6,
            samples in 2usize..25,
        ) {
            let mut rng = RngStream::new(seed, "norm-roundtrip").rng();
            let data = DMatrix::from_fn(dim, samples, |_, _| rng.gen_range(-1e6..1e6));
            for norm in [
                Normalizer::standard(&data).unwrap(),
                Normalizer::min_shifted(&data).unwrap(),
            ] {
                let probe = DVector::from_fn(dim, |i, _| data[(i, 0)]);
                let back = norm.denormalize(&norm.normalize(&probe));
                for i in 0..dim {
                    let tol = 1e-12 * probe[i].abs().max(1.0);
                    prop_assert!((back[i] - probe[i]).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn analytic_gradients_match_central_differences_for_both_families() {
        for kind in [SurrogateKind::Fnn, SurrogateKind::Gru] {
            let worst =
                gradient_check(kind, &RngStream::new(17, "gradcheck")).unwrap();
            assert!(worst < 1e-4, "{}: max relative error {worst}", kind.as_str());
        }
    }

    #[test]
    fn min_shifted_normalization_keeps_in_range_values_non_negative() {
        let mut rng = RngStream::new(4, "min-shift").rng();
        let data = DMatrix::from_fn(2, 40, |_, _| rng.gen_range(-500.0..2000.0));
        let norm = Normalizer::min_shifted(&data).unwrap();
        for j in 0..data.ncols() {
            let v = norm.normalize(&data.column(j).into_owned());
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn constant_trajectory_is_fit_exactly_by_both_families() {
        let traj = constant_trajectory(0, 60, [0.4, 0.25, 305.0, 360.0], [0.31, 2450.0]);
        let dataset = Dataset::new(vec![traj.clone()]).unwrap();
        let stream = RngStream::new(77, "constant-fit");
        for (kind, cfg) in [
            (SurrogateKind::Fnn, {
                let mut c = TrainConfig::fnn().desk();
                c.epochs = 3;
                c.hidden_width = 8;
                c
            }),
            (SurrogateKind::Gru, {
                let mut c = TrainConfig::gru().desk();
                c.epochs = 2;
                c.hidden_width = 8;
                c.lookback = 10;
                c
            }),
        ] {
            let model = train_surrogate(kind, &dataset, &cfg, &stream).unwrap();
            let warm = &traj.ghx[..cfg.lookback.min(traj.ghx.len())];
            let pred = predict_trajectory(&model, &traj.controls, warm, &traj.grid).unwrap();
            let mut mse = 0.0;
            for (p, truth) in pred.iter().zip(&traj.ghx) {
                let (pa, ta) = (p.as_array(), truth.as_array());
                mse += (pa[0] - ta[0]).powi(2) + (pa[1] - ta[1]).powi(2);
            }
            mse /= (2 * pred.len()) as f64;
            assert!(mse < 1e-6, "{} mse {mse}", kind.as_str());
        }
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_stream() {
        let dataset = Dataset::new(vec![wavy_trajectory(0, 50), wavy_trajectory(1, 50)]).unwrap();
        for (kind, cfg) in [
            (SurrogateKind::Fnn, {
                let mut c = TrainConfig::fnn().desk();
                c.epochs = 2;
                c.hidden_width = 8;
                c.batch_size = 16;
                c
            }),
            (SurrogateKind::Gru, {
                let mut c = TrainConfig::gru().desk();
                c.epochs = 2;
                c.hidden_width = 6;
                c.lookback = 8;
                c.batch_size = 16;
                c
            }),
        ] {
            let stream = RngStream::new(12, "determinism");
            let (model_a, hist_a) = train_with_history(kind, &dataset, &cfg, &stream).unwrap();
            let (model_b, hist_b) = train_with_history(kind, &dataset, &cfg, &stream).unwrap();
            assert_eq!(hist_a, hist_b);
            let a = NeuralArtifact::new(&model_a, cfg, &stream);
            let b = NeuralArtifact::new(&model_b, cfg, &stream);
            assert_eq!(a.weights, b.weights);
        }
    }

    #[test]
    fn feedforward_loss_decreases_on_a_learnable_target_in_the_median() {
        let trajectories: Vec<Trajectory> = (0..3).map(|id| wavy_trajectory(id, 120)).collect();
        let dataset = Dataset::new(trajectories).unwrap();
        let mut cfg = TrainConfig::fnn();
        cfg.hidden_width = 16;
        cfg.epochs = 10;
        cfg.batch_size = 4096;
        let mut monotone = 0;
        for seed in 0..5 {
            let stream = RngStream::new(seed, "toy-descent");
            let (_, history) =
                train_with_history(SurrogateKind::Fnn, &dataset, &cfg, &stream).unwrap();
            if history.windows(2).all(|w| w[1] < w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone >= 3, "loss decreased in only {monotone} of 5 seeds");
    }

    #[test]
    fn gru_training_rejects_short_trajectories() {
        let dataset = Dataset::new(vec![wavy_trajectory(0, 20), wavy_trajectory(1, 20)]).unwrap();
        let mut cfg = TrainConfig::gru().desk();
        cfg.lookback = 30;
        let err = train_surrogate(
            SurrogateKind::Gru,
            &dataset,
            &cfg,
            &RngStream::new(1, "short"),
        )
        .unwrap_err();
        match err {
            CoreError::Data { ids, .. } => assert_eq!(ids, vec![0, 1]),
            other => panic!("expected a data error, got {other}"),
        }
    }

    #[test]
    fn one_step_pairs_shift_the_targets() {
        let traj = wavy_trajectory(0, 6);
        let dataset = Dataset::new(vec![traj.clone()]).unwrap();
        let (x_same, t_same) = fnn_pairs(&dataset, false);
        let (x_next, t_next) = fnn_pairs(&dataset, true);
        assert_eq!(x_same.ncols(), 6);
        assert_eq!(x_next.ncols(), 5);
        assert_eq!(t_same.column(2), DVector::from_column_slice(&traj.ghx[2].as_array()));
        assert_eq!(t_next.column(2), DVector::from_column_slice(&traj.ghx[3].as_array()));
        assert_eq!(x_next.column(2), x_same.column(2));
    }

    #[test]
    fn feedforward_prediction_of_constant_controls_is_constant() {
        let dataset = Dataset::new(vec![wavy_trajectory(0, 50)]).unwrap();
        let mut cfg = TrainConfig::fnn().desk();
        cfg.epochs = 2;
        cfg.hidden_width = 8;
        let model =
            train_surrogate(SurrogateKind::Fnn, &dataset, &cfg, &RngStream::new(6, "const")).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 12).unwrap();
        let controls = vec![ControlVector::from_array([0.5, 0.3, 302.0, 358.0]); 12];
        let pred = predict_trajectory(&model, &controls, &[], &grid).unwrap();
        for p in &pred[1..] {
            assert_eq!(p.as_array(), pred[0].as_array());
        }
    }

    #[test]
    fn full_warm_start_reduces_to_teacher_forced_prediction() {
        let traj = wavy_trajectory(3, 40);
        let dataset = Dataset::new(vec![traj.clone()]).unwrap();
        let mut cfg = TrainConfig::gru().desk();
        cfg.epochs = 1;
        cfg.hidden_width = 6;
        cfg.lookback = 10;
        let model =
            train_surrogate(SurrogateKind::Gru, &dataset, &cfg, &RngStream::new(15, "tf")).unwrap();
        let pred = predict_trajectory(&model, &traj.controls, &traj.ghx, &traj.grid).unwrap();
        let gru = match &model {
            NeuralModel::Gru(m) => m,
            _ => unreachable!(),
        };
        for t in 10..40 {
            let window: Vec<DVector<f64>> = (t - 10..t)
                .map(|s| {
                    let st = traj.ghx[s].as_array();
                    let c = traj.controls[s].as_array();
                    DVector::from_column_slice(&[st[0], st[1], c[0], c[1], c[2], c[3]])
                })
                .collect();
            let y = gru_forward(gru, &window).unwrap();
            assert_eq!(pred[t].as_array(), [y[0], y[1]]);
        }
    }

    #[test]
    fn missing_warm_start_is_a_data_error() {
        let traj = wavy_trajectory(2, 40);
        let dataset = Dataset::new(vec![traj.clone()]).unwrap();
        let mut cfg = TrainConfig::gru().desk();
        cfg.epochs = 1;
        cfg.hidden_width = 6;
        cfg.lookback = 12;
        let model =
            train_surrogate(SurrogateKind::Gru, &dataset, &cfg, &RngStream::new(2, "warm")).unwrap();
        let err =
            predict_trajectory(&model, &traj.controls, &traj.ghx[..5], &traj.grid).unwrap_err();
        assert!(matches!(err, CoreError::Data { .. }), "{err}");
    }

    #[test]
    fn rollout_error_stays_within_three_times_teacher_forced() {
        let grid = TimeGrid::from_span(0.0, 5460.0, 141).unwrap();
        let dataset = generate_dataset(
            8,
            &ScheduleBounds::default(),
            &grid,
            600.0,
            &BedConfig::default(),
            &GhxConfig::default(),
            &InitialProfile::default(),
            &RngStream::new(40, "rollout-pool"),
        )
        .unwrap();
        let train_set = dataset.subset(&[0, 1, 2, 3, 4, 5, 6]).unwrap();
        let held_out = dataset.by_id(7).unwrap();
        let mut cfg = TrainConfig::gru().desk();
        cfg.hidden_width = 16;
        cfg.lookback = 20;
        cfg.epochs = 12;
        let model = train_surrogate(
            SurrogateKind::Gru,
            &train_set,
            &cfg,
            &RngStream::new(40, "rollout-train"),
        )
        .unwrap();

        let teacher =
            predict_trajectory(&model, &held_out.controls, &held_out.ghx, &held_out.grid).unwrap();
        let rollout = predict_trajectory(
            &model,
            &held_out.controls,
            &held_out.ghx[..cfg.lookback],
            &held_out.grid,
        )
        .unwrap();
        for channel in 0..N_GHX_STATES {
            let truth: Vec<f64> = held_out.ghx[cfg.lookback..]
                .iter()
                .map(|s| s.as_array()[channel])
                .collect();
            let tf: Vec<f64> = teacher[cfg.lookback..]
                .iter()
                .map(|s| s.as_array()[channel])
                .collect();
            let ro: Vec<f64> = rollout[cfg.lookback..]
                .iter()
                .map(|s| s.as_array()[channel])
                .collect();
            let teacher_rmse = rmse(&tf, &truth).unwrap();
            let rollout_rmse = rmse(&ro, &truth).unwrap();
            assert!(
                rollout_rmse <= 3.0 * teacher_rmse.max(1e-9),
                "channel {channel}: rollout {rollout_rmse} vs teacher-forced {teacher_rmse}"
            );
        }
    }

    #[test]
    fn artifacts_round_trip_bitwise_through_json() {
        let dataset = Dataset::new(vec![wavy_trajectory(0, 50), wavy_trajectory(1, 50)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (kind, cfg) in [
            (SurrogateKind::Fnn, {
                let mut c = TrainConfig::fnn().desk();
                c.epochs = 2;
                c.hidden_width = 8;
                c
            }),
            (SurrogateKind::Gru, {
                let mut c = TrainConfig::gru().desk();
                c.epochs = 1;
                c.hidden_width = 6;
                c.lookback = 8;
                c
            }),
        ] {
            let stream = RngStream::new(9, "artifact");
            let model = train_surrogate(kind, &dataset, &cfg, &stream).unwrap();
            let artifact = NeuralArtifact::new(&model, cfg, &stream);
            let path = dir.path().join(format!("{}.json", kind.as_str()));
            crate::io::write_json(&artifact, &path).unwrap();
            let loaded: NeuralArtifact = crate::io::read_json(&path).unwrap();
            assert_eq!(artifact, loaded);
            let rebuilt = loaded.model().unwrap();
            let again = NeuralArtifact::new(&rebuilt, cfg, &stream);
            assert_eq!(artifact, again);

            let grid = TimeGrid::new(0.0, 1.0, 30).unwrap();
            let probe = wavy_trajectory(5, 30);
            let a = predict_trajectory(&model, &probe.controls, &probe.ghx, &grid).unwrap();
            let b = predict_trajectory(&rebuilt, &probe.controls, &probe.ghx, &grid).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.as_array(), y.as_array());
            }
        }
    }

    #[test]
    fn invalid_artifact_headers_are_manifest_errors() {
        let dataset = Dataset::new(vec![wavy_trajectory(0, 50)]).unwrap();
        let mut cfg = TrainConfig::fnn().desk();
        cfg.epochs = 1;
        cfg.hidden_width = 8;
        let stream = RngStream::new(3, "bad-artifact");
        let model = train_surrogate(SurrogateKind::Fnn, &dataset, &cfg, &stream).unwrap();
        let mut artifact = NeuralArtifact::new(&model, cfg, &stream);
        artifact.weights.pop();
        let err = artifact.model().unwrap_err();
        assert!(matches!(err, CoreError::Manifest(_)), "{err}");
    }
}
