//! Stacked gated recurrent network with backpropagation through time.
//!
//! Gate convention: the update gate `z` gates the carried state, so `z = 1`
//! freezes the hidden state. Per step and layer,
//!
//! ```text
//! z = sigmoid(Wz x + Uz h + bz)
//! r = sigmoid(Wr x + Ur h + br)
//! c = tanh(Wc x + Uc (r .* h) + bc)
//! h' = z .* h + (1 - z) .* c
//! ```
//!
//! and only the final hidden state of the last layer is projected, through a
//! rectifier, to the output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::RngStream;

use super::adam::Adam;
use super::Normalizer;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct GruLayer {
    pub(crate) wz: DMatrix<f64>,
    pub(crate) uz: DMatrix<f64>,
    pub(crate) bz: DVector<f64>,
    pub(crate) wr: DMatrix<f64>,
    pub(crate) ur: DMatrix<f64>,
    pub(crate) br: DVector<f64>,
    pub(crate) wc: DMatrix<f64>,
    pub(crate) uc: DMatrix<f64>,
    pub(crate) bc: DVector<f64>,
}

impl GruLayer {
    fn random(in_dim: usize, hidden: usize, rng: &mut impl Rng) -> GruLayer {
        let mut gate_w = |fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            DMatrix::from_iterator(
                hidden,
                fan_in,
                (0..hidden * fan_in).map(|_| rng.gen_range(-bound..bound)),
            )
        };
        let wz = gate_w(in_dim);
        let uz = gate_w(hidden);
        let wr = gate_w(in_dim);
        let ur = gate_w(hidden);
        let wc = gate_w(in_dim);
        let uc = gate_w(hidden);
        GruLayer {
            wz,
            uz,
            bz: DVector::zeros(hidden),
            wr,
            ur,
            br: DVector::zeros(hidden),
            wc,
            uc,
            bc: DVector::zeros(hidden),
        }
    }

    fn matrices(&self) -> [&DMatrix<f64>; 6] {
        [&self.wz, &self.uz, &self.wr, &self.ur, &self.wc, &self.uc]
    }

    fn biases(&self) -> [&DVector<f64>; 3] {
        [&self.bz, &self.br, &self.bc]
    }
}

/// Recurrent surrogate consuming a fixed-length window of past states and
/// controls per prediction.
#[derive(Debug, Clone)]
pub struct GruModel {
    layers: Vec<GruLayer>,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
    lookback: usize,
    input_norm: Normalizer,
    output_norm: Normalizer,
}

impl GruModel {
    pub fn new(
        hidden_width: usize,
        n_layers: usize,
        lookback: usize,
        input_norm: Normalizer,
        output_norm: Normalizer,
        stream: &RngStream,
    ) -> Result<GruModel> {
        for (name, value) in [
            ("hidden_width", hidden_width),
            ("n_layers", n_layers),
            ("lookback", lookback),
        ] {
            if value == 0 {
                return Err(CoreError::Parameter {
                    name,
                    reason: "must be at least 1".into(),
                });
            }
        }
        let mut rng = stream.rng();
        let mut layers = Vec::with_capacity(n_layers);
        let mut in_dim = input_norm.dim();
        for _ in 0..n_layers {
            layers.push(GruLayer::random(in_dim, hidden_width, &mut rng));
            in_dim = hidden_width;
        }
        let out_dim = output_norm.dim();
        let bound = 1.0 / (hidden_width as f64).sqrt();
        let w_out = DMatrix::from_iterator(
            out_dim,
            hidden_width,
            (0..out_dim * hidden_width).map(|_| rng.gen_range(-bound..bound)),
        );
        GruModel::from_parts(
            layers,
            w_out,
            DVector::zeros(out_dim),
            lookback,
            input_norm,
            output_norm,
        )
    }

    pub(crate) fn from_parts(
        layers: Vec<GruLayer>,
        w_out: DMatrix<f64>,
        b_out: DVector<f64>,
        lookback: usize,
        input_norm: Normalizer,
        output_norm: Normalizer,
    ) -> Result<GruModel> {
        if layers.is_empty() {
            return Err(CoreError::Parameter {
                name: "layers",
                reason: "network needs at least one recurrent layer".into(),
            });
        }
        if lookback == 0 {
            return Err(CoreError::Parameter {
                name: "lookback",
                reason: "must be at least 1".into(),
            });
        }
        let hidden = layers[0].uz.nrows();
        let mut in_dim = input_norm.dim();
        for layer in &layers {
            for (context, m, rows, cols) in [
                ("recurrent layer input weights", &layer.wz, hidden, in_dim),
                ("recurrent layer state weights", &layer.uz, hidden, hidden),
                ("recurrent layer input weights", &layer.wr, hidden, in_dim),
                ("recurrent layer state weights", &layer.ur, hidden, hidden),
                ("recurrent layer input weights", &layer.wc, hidden, in_dim),
                ("recurrent layer state weights", &layer.uc, hidden, hidden),
            ] {
                if m.nrows() != rows || m.ncols() != cols {
                    return Err(CoreError::Shape {
                        context,
                        expected: rows * cols,
                        actual: m.nrows() * m.ncols(),
                    });
                }
            }
            for b in layer.biases() {
                if b.len() != hidden {
                    return Err(CoreError::Shape {
                        context: "recurrent layer bias length",
                        expected: hidden,
                        actual: b.len(),
                    });
                }
            }
            if layer
                .matrices()
                .iter()
                .flat_map(|m| m.iter())
                .chain(layer.biases().iter().flat_map(|b| b.iter()))
                .any(|v| !v.is_finite())
            {
                return Err(CoreError::NonFiniteInput {
                    context: "network parameters",
                });
            }
            in_dim = hidden;
        }
        if w_out.ncols() != hidden || w_out.nrows() != output_norm.dim() {
            return Err(CoreError::Shape {
                context: "output projection",
                expected: output_norm.dim() * hidden,
                actual: w_out.nrows() * w_out.ncols(),
            });
        }
        if b_out.len() != w_out.nrows() {
            return Err(CoreError::Shape {
                context: "output bias length",
                expected: w_out.nrows(),
                actual: b_out.len(),
            });
        }
        if w_out
            .iter()
            .chain(b_out.iter())
            .any(|v| !v.is_finite())
        {
            return Err(CoreError::NonFiniteInput {
                context: "network parameters",
            });
        }
        Ok(GruModel {
            layers,
            w_out,
            b_out,
            lookback,
            input_norm,
            output_norm,
        })
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].uz.nrows()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &Normalizer {
        &self.output_norm
    }

    pub(crate) fn layer_parts(&self) -> &[GruLayer] {
        &self.layers
    }

    pub(crate) fn projection(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.w_out, &self.b_out)
    }

    pub(crate) fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups = Vec::with_capacity(9 * self.layers.len() + 2);
        for layer in &mut self.layers {
            groups.push(layer.wz.as_mut_slice());
            groups.push(layer.uz.as_mut_slice());
            groups.push(layer.bz.as_mut_slice());
            groups.push(layer.wr.as_mut_slice());
            groups.push(layer.ur.as_mut_slice());
            groups.push(layer.br.as_mut_slice());
            groups.push(layer.wc.as_mut_slice());
            groups.push(layer.uc.as_mut_slice());
            groups.push(layer.bc.as_mut_slice());
        }
        groups.push(self.w_out.as_mut_slice());
        groups.push(self.b_out.as_mut_slice());
        groups
    }

    /// Batched forward pass over normalized windows. `xs[t]` holds step `t`
    /// of every window in the batch, one column per window.
    pub(crate) fn forward_batch(&self, xs: &[DMatrix<f64>]) -> GruTape {
        let batch = xs[0].ncols();
        let hidden = self.hidden_width();
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut outs: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut layer_steps = Vec::with_capacity(xs.len());
            let mut layer_outs = Vec::with_capacity(xs.len());
            let mut h = DMatrix::zeros(hidden, batch);
            for t in 0..xs.len() {
                let x_t = if l == 0 { &xs[t] } else { &outs[l - 1][t] };
                let z = {
                    let mut pre = &layer.wz * x_t + &layer.uz * &h;
                    add_bias(&mut pre, &layer.bz);
                    pre.map(sigmoid)
                };
                let r = {
                    let mut pre = &layer.wr * x_t + &layer.ur * &h;
                    add_bias(&mut pre, &layer.br);
                    pre.map(sigmoid)
                };
                let c = {
                    let mut pre = &layer.wc * x_t + &layer.uc * r.component_mul(&h);
                    add_bias(&mut pre, &layer.bc);
                    pre.map(f64::tanh)
                };
                let mut h_next = z.component_mul(&h);
                let mut gained = c.clone();
                gained.zip_apply(&z, |cv, zv| *cv *= 1.0 - zv);
                h_next += gained;
                layer_steps.push(GruStep {
                    h_prev: std::mem::replace(&mut h, h_next),
                    z,
                    r,
                    c,
                });
                layer_outs.push(h.clone());
            }
            steps.push(layer_steps);
            outs.push(layer_outs);
        }
        let h_last = outs.last().unwrap().last().unwrap();
        let mut y_pre = &self.w_out * h_last;
        add_bias(&mut y_pre, &self.b_out);
        let y = y_pre.map(|v| v.max(0.0));
        GruTape {
            steps,
            outs,
            y_pre,
            y,
        }
    }
}

pub(crate) struct GruStep {
    pub(crate) h_prev: DMatrix<f64>,
    pub(crate) z: DMatrix<f64>,
    pub(crate) r: DMatrix<f64>,
    pub(crate) c: DMatrix<f64>,
}

pub(crate) struct GruTape {
    pub(crate) steps: Vec<Vec<GruStep>>,
    pub(crate) outs: Vec<Vec<DMatrix<f64>>>,
    pub(crate) y_pre: DMatrix<f64>,
    pub(crate) y: DMatrix<f64>,
}

/// Evaluates the network on one raw window of `lookback` feature vectors.
pub fn gru_forward(model: &GruModel, window: &[DVector<f64>]) -> Result<DVector<f64>> {
    if window.len() != model.lookback {
        return Err(CoreError::Shape {
            context: "recurrent window length",
            expected: model.lookback,
            actual: window.len(),
        });
    }
    let in_dim = model.input_norm.dim();
    for step in window {
        if step.len() != in_dim {
            return Err(CoreError::Shape {
                context: "recurrent window feature",
                expected: in_dim,
                actual: step.len(),
            });
        }
        if step.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFiniteInput {
                context: "recurrent window",
            });
        }
    }
    let xs: Vec<DMatrix<f64>> = window
        .iter()
        .map(|step| {
            let normalized = model.input_norm.normalize(step);
            DMatrix::from_column_slice(in_dim, 1, normalized.as_slice())
        })
        .collect();
    let tape = model.forward_batch(&xs);
    Ok(model
        .output_norm
        .denormalize(&tape.y.column(0).into_owned()))
}

pub(crate) struct GruLayerGrads {
    wz: DMatrix<f64>,
    uz: DMatrix<f64>,
    bz: DVector<f64>,
    wr: DMatrix<f64>,
    ur: DMatrix<f64>,
    br: DVector<f64>,
    wc: DMatrix<f64>,
    uc: DMatrix<f64>,
    bc: DVector<f64>,
}

pub(crate) struct GruGradients {
    layers: Vec<GruLayerGrads>,
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
}

impl GruGradients {
    pub(crate) fn group_slices(&self) -> Vec<&[f64]> {
        let mut groups = Vec::with_capacity(9 * self.layers.len() + 2);
        for g in &self.layers {
            groups.push(g.wz.as_slice());
            groups.push(g.uz.as_slice());
            groups.push(g.bz.as_slice());
            groups.push(g.wr.as_slice());
            groups.push(g.ur.as_slice());
            groups.push(g.br.as_slice());
            groups.push(g.wc.as_slice());
            groups.push(g.uc.as_slice());
            groups.push(g.bc.as_slice());
        }
        groups.push(self.w_out.as_slice());
        groups.push(self.b_out.as_slice());
        groups
    }
}

/// Mean squared error on normalized window batches.
pub(crate) fn gru_loss(model: &GruModel, xs: &[DMatrix<f64>], targets: &DMatrix<f64>) -> f64 {
    let tape = model.forward_batch(xs);
    (&tape.y - targets).norm_squared() / (targets.len() as f64)
}

/// Backpropagation through time over the window, returning the batch loss
/// and exact gradients for every parameter group.
pub(crate) fn gru_backward(
    model: &GruModel,
    xs: &[DMatrix<f64>],
    targets: &DMatrix<f64>,
) -> (f64, GruGradients) {
    let tape = model.forward_batch(xs);
    let n_steps = xs.len();
    let batch = xs[0].ncols();
    let hidden = model.hidden_width();
    let loss = (&tape.y - targets).norm_squared() / (targets.len() as f64);

    let mut dy = (&tape.y - targets) * (2.0 / targets.len() as f64);
    dy.zip_apply(&tape.y_pre, |d, pre| {
        if pre <= 0.0 {
            *d = 0.0;
        }
    });
    let h_last = tape.outs.last().unwrap().last().unwrap();
    let g_w_out = &dy * h_last.transpose();
    let g_b_out = dy.column_sum();

    let mut dh_outside: Vec<DMatrix<f64>> = (0..n_steps)
        .map(|_| DMatrix::zeros(hidden, batch))
        .collect();
    dh_outside[n_steps - 1] = model.w_out.transpose() * &dy;

    let mut layer_grads: Vec<Option<GruLayerGrads>> = (0..model.layers.len()).map(|_| None).collect();
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let in_dim = layer.wz.ncols();
        let mut g = GruLayerGrads {
            wz: DMatrix::zeros(hidden, in_dim),
            uz: DMatrix::zeros(hidden, hidden),
            bz: DVector::zeros(hidden),
            wr: DMatrix::zeros(hidden, in_dim),
            ur: DMatrix::zeros(hidden, hidden),
            br: DVector::zeros(hidden),
            wc: DMatrix::zeros(hidden, in_dim),
            uc: DMatrix::zeros(hidden, hidden),
            bc: DVector::zeros(hidden),
        };
        let mut dx_below: Vec<DMatrix<f64>> = if l > 0 {
            (0..n_steps).map(|_| DMatrix::zeros(hidden, batch)).collect()
        } else {
            Vec::new()
        };
        let mut dh = DMatrix::zeros(hidden, batch);
        for t in (0..n_steps).rev() {
            let step = &tape.steps[l][t];
            let x_t = if l == 0 { &xs[t] } else { &tape.outs[l - 1][t] };
            let dh_total = &dh + &dh_outside[t];

            let dz = dh_total.component_mul(&(&step.h_prev - &step.c));
            let mut dc_pre = dh_total.clone();
            dc_pre.zip_apply(&step.z, |d, z| *d *= 1.0 - z);
            dc_pre.zip_apply(&step.c, |d, c| *d *= 1.0 - c * c);
            let mut dh_prev = dh_total.component_mul(&step.z);

            let rh = step.r.component_mul(&step.h_prev);
            g.wc += &dc_pre * x_t.transpose();
            g.uc += &dc_pre * rh.transpose();
            g.bc += dc_pre.column_sum();
            let d_rh = layer.uc.transpose() * &dc_pre;
            dh_prev += d_rh.component_mul(&step.r);

            let mut dr_pre = d_rh.component_mul(&step.h_prev);
            dr_pre.zip_apply(&step.r, |d, r| *d *= r * (1.0 - r));
            g.wr += &dr_pre * x_t.transpose();
            g.ur += &dr_pre * step.h_prev.transpose();
            g.br += dr_pre.column_sum();
            dh_prev += layer.ur.transpose() * &dr_pre;

            let mut dz_pre = dz;
            dz_pre.zip_apply(&step.z, |d, z| *d *= z * (1.0 - z));
            g.wz += &dz_pre * x_t.transpose();
            g.uz += &dz_pre * step.h_prev.transpose();
            g.bz += dz_pre.column_sum();
            dh_prev += layer.uz.transpose() * &dz_pre;

            if l > 0 {
                dx_below[t] = layer.wz.transpose() * &dz_pre
                    + layer.wr.transpose() * &dr_pre
                    + layer.wc.transpose() * &dc_pre;
            }
            dh = dh_prev;
        }
        layer_grads[l] = Some(g);
        if l > 0 {
            dh_outside = dx_below;
        }
    }
    let layers = layer_grads.into_iter().map(|g| g.unwrap()).collect();
    (
        loss,
        GruGradients {
            layers,
            w_out: g_w_out,
            b_out: g_b_out,
        },
    )
}

/// One training step: BPTT on the batch, then an Adam update. Returns the
/// loss measured before the step; a non-finite loss skips the update.
pub(crate) fn gru_backward_and_step(
    model: &mut GruModel,
    xs: &[DMatrix<f64>],
    targets: &DMatrix<f64>,
    opt: &mut Adam,
) -> Result<f64> {
    let (loss, grads) = gru_backward(model, xs, targets);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grad_slices = grads.group_slices();
    let mut params = model.param_groups_mut();
    let mut groups: Vec<(&mut [f64], &[f64])> = params
        .drain(..)
        .zip(grad_slices)
        .collect();
    opt.step(&mut groups)?;
    Ok(loss)
}
