//! Fully connected feedforward surrogate with rectifier hidden layers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng::RngStream;

use super::adam::Adam;
use super::Normalizer;

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    pub(crate) w: DMatrix<f64>,
    pub(crate) b: DVector<f64>,
}

/// Feedforward network mapping a control vector to the exchanger state pair.
///
/// The architecture is affine layers with a rectifier between them (none
/// after the last). Inputs are normalized with the embedded statistics and
/// outputs de-normalized, so the public forward pass works in physical units.
#[derive(Debug, Clone)]
pub struct FnnModel {
    layers: Vec<Dense>,
    input_norm: Normalizer,
    output_norm: Normalizer,
}

impl FnnModel {
    /// Builds a network with uniform fan-in-scaled random weights and zero
    /// biases. `dims` lists layer widths from input to output.
    pub fn new(
        dims: &[usize],
        input_norm: Normalizer,
        output_norm: Normalizer,
        stream: &RngStream,
    ) -> Result<FnnModel> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Parameter {
                name: "dims",
                reason: format!("need at least two nonzero layer widths, got {dims:?}"),
            });
        }
        let mut rng = stream.rng();
        let layers = dims
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = DMatrix::from_iterator(
                    fan_out,
                    fan_in,
                    (0..fan_out * fan_in).map(|_| rng.gen_range(-bound..bound)),
                );
                Dense {
                    w,
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        FnnModel::from_dense(layers, input_norm, output_norm)
    }

    /// Assembles a network from explicit `(weights, bias)` pairs.
    pub fn from_layers(
        layers: Vec<(DMatrix<f64>, DVector<f64>)>,
        input_norm: Normalizer,
        output_norm: Normalizer,
    ) -> Result<FnnModel> {
        let layers = layers
            .into_iter()
            .map(|(w, b)| Dense { w, b })
            .collect();
        FnnModel::from_dense(layers, input_norm, output_norm)
    }

    fn from_dense(
        layers: Vec<Dense>,
        input_norm: Normalizer,
        output_norm: Normalizer,
    ) -> Result<FnnModel> {
        if layers.is_empty() {
            return Err(CoreError::Parameter {
                name: "layers",
                reason: "network needs at least one affine layer".into(),
            });
        }
        let mut width = input_norm.dim();
        for layer in &layers {
            if layer.w.ncols() != width {
                return Err(CoreError::Shape {
                    context: "network layer chain",
                    expected: width,
                    actual: layer.w.ncols(),
                });
            }
            if layer.b.len() != layer.w.nrows() {
                return Err(CoreError::Shape {
                    context: "network bias length",
                    expected: layer.w.nrows(),
                    actual: layer.b.len(),
                });
            }
            if layer.w.iter().chain(layer.b.iter()).any(|v| !v.is_finite()) {
                return Err(CoreError::NonFiniteInput {
                    context: "network parameters",
                });
            }
            width = layer.w.nrows();
        }
        if width != output_norm.dim() {
            return Err(CoreError::Shape {
                context: "network output width",
                expected: output_norm.dim(),
                actual: width,
            });
        }
        Ok(FnnModel {
            layers,
            input_norm,
            output_norm,
        })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_norm.dim()];
        dims.extend(self.layers.iter().map(|l| l.w.nrows()));
        dims
    }

    pub fn input_norm(&self) -> &Normalizer {
        &self.input_norm
    }

    pub fn output_norm(&self) -> &Normalizer {
        &self.output_norm
    }

    pub(crate) fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn param_groups_mut(&mut self) -> Vec<&mut [f64]> {
        let mut groups = Vec::with_capacity(2 * self.layers.len());
        for layer in &mut self.layers {
            groups.push(layer.w.as_mut_slice());
            groups.push(layer.b.as_mut_slice());
        }
        groups
    }

    /// Forward pass over a batch of normalized inputs (one column per
    /// sample), keeping each layer's pre-activation and input for backprop.
    fn forward_batch(&self, x: &DMatrix<f64>) -> FnnTape {
        let last = self.layers.len() - 1;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * inputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.b;
            }
            pre.push(z.clone());
            if i < last {
                z.apply(|v| *v = v.max(0.0));
                inputs.push(z);
            } else {
                inputs.push(z);
            }
        }
        let output = inputs.pop().unwrap();
        FnnTape {
            inputs,
            pre,
            output,
        }
    }
}

struct FnnTape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

/// Evaluates the network on one raw input vector.
pub fn fnn_forward(model: &FnnModel, input: &DVector<f64>) -> Result<DVector<f64>> {
    if input.len() != model.input_norm.dim() {
        return Err(CoreError::Shape {
            context: "network input",
            expected: model.input_norm.dim(),
            actual: input.len(),
        });
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NonFiniteInput {
            context: "network input",
        });
    }
    let x = DMatrix::from_column_slice(input.len(), 1, model.input_norm.normalize(input).as_slice());
    let tape = model.forward_batch(&x);
    Ok(model.output_norm.denormalize(&tape.output.column(0).into_owned()))
}

/// Mean squared error of the network on normalized batch matrices.
pub(crate) fn fnn_loss(model: &FnnModel, x: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let tape = model.forward_batch(x);
    (&tape.output - targets).norm_squared() / (targets.len() as f64)
}

pub(crate) struct FnnGradients {
    pub(crate) layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

/// Backpropagates the batch MSE, returning the loss and exact gradients.
pub(crate) fn fnn_backward(
    model: &FnnModel,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
) -> (f64, FnnGradients) {
    let tape = model.forward_batch(x);
    let scale = 2.0 / (targets.len() as f64);
    let loss = (&tape.output - targets).norm_squared() / (targets.len() as f64);
    let mut delta = (&tape.output - targets) * scale;
    let mut grads = vec![None; model.layers.len()];
    for i in (0..model.layers.len()).rev() {
        let gw = &delta * tape.inputs[i].transpose();
        let gb = delta.column_sum();
        grads[i] = Some((gw, gb));
        if i > 0 {
            let mut upstream = model.layers[i].w.transpose() * &delta;
            upstream.zip_apply(&tape.pre[i - 1], |d, z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = upstream;
        }
    }
    let layers = grads.into_iter().map(|g| g.unwrap()).collect();
    (loss, FnnGradients { layers })
}

/// One training step: backprop on the batch, then an Adam update. Returns
/// the loss measured before the step; a non-finite loss skips the update.
pub(crate) fn fnn_backward_and_step(
    model: &mut FnnModel,
    x: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    opt: &mut Adam,
) -> Result<f64> {
    let (loss, grads) = fnn_backward(model, x, targets);
    if !loss.is_finite() {
        return Ok(loss);
    }
    let mut groups: Vec<(&mut [f64], &[f64])> = Vec::with_capacity(2 * model.layers.len());
    for (layer, (gw, gb)) in model.layers.iter_mut().zip(&grads.layers) {
        groups.push((layer.w.as_mut_slice(), gw.as_slice()));
        groups.push((layer.b.as_mut_slice(), gb.as_slice()));
    }
    opt.step(&mut groups)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_norm(dim: usize) -> Normalizer {
        Normalizer::identity(dim)
    }

    #[test]
    fn zero_network_outputs_the_denormalized_zero_vector() {
        let layers = vec![
            (DMatrix::zeros(3, 4), DVector::zeros(3)),
            (DMatrix::zeros(2, 3), DVector::zeros(2)),
        ];
        let output_norm = Normalizer::from_parts(
            DVector::from_column_slice(&[1.5, -2.0]),
            DVector::from_column_slice(&[2.0, 3.0]),
        )
        .unwrap();
        let model = FnnModel::from_layers(layers, identity_norm(4), output_norm).unwrap();
        let out = fnn_forward(&model, &DVector::from_column_slice(&[0.3, -1.0, 2.0, 0.5])).unwrap();
        assert_eq!(out.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn hand_built_two_layer_network_matches_hand_arithmetic() {
        let w1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b1 = DVector::from_column_slice(&[0.5, -0.25]);
        let w2 = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, 0.5, 1.0]);
        let b2 = DVector::from_column_slice(&[0.1, -0.2]);
        let model = FnnModel::from_layers(
            vec![(w1, b1), (w2, b2)],
            identity_norm(2),
            identity_norm(2),
        )
        .unwrap();
        let out = fnn_forward(&model, &DVector::from_column_slice(&[0.3, -0.6])).unwrap();
        let hidden = [0.3f64 + 0.5, (-0.6f64 - 0.25).max(0.0)];
        let expected = [
            2.0 * hidden[0] - 1.0 * hidden[1] + 0.1,
            0.5 * hidden[0] + 1.0 * hidden[1] - 0.2,
        ];
        assert!((out[0] - expected[0]).abs() < 1e-12);
        assert!((out[1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn negative_preactivation_contributes_nothing_downstream() {
        let w1 = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b1 = DVector::zeros(2);
        let input = DVector::from_column_slice(&[0.7]);
        let build = |w2: DMatrix<f64>| {
            FnnModel::from_layers(
                vec![(w1.clone(), b1.clone()), (w2, DVector::zeros(1))],
                identity_norm(1),
                identity_norm(1),
            )
            .unwrap()
        };
        let base = build(DMatrix::from_row_slice(1, 2, &[3.0, 5.0]));
        let flipped = build(DMatrix::from_row_slice(1, 2, &[3.0, -5.0]));
        let a = fnn_forward(&base, &input).unwrap();
        let b = fnn_forward(&flipped, &input).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let model = FnnModel::new(
            &[4, 8, 2],
            identity_norm(4),
            identity_norm(2),
            &RngStream::new(3, "fnn-validate"),
        )
        .unwrap();
        let err = fnn_forward(&model, &DVector::from_column_slice(&[1.0, 2.0])).unwrap_err();
        assert!(matches!(err, CoreError::Shape { .. }), "{err}");
        let err = fnn_forward(
            &model,
            &DVector::from_column_slice(&[1.0, f64::NAN, 0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::NonFiniteInput { .. }), "{err}");
    }

    #[test]
    fn mismatched_layer_chain_is_rejected() {
        let layers = vec![
            (DMatrix::zeros(3, 4), DVector::zeros(3)),
            (DMatrix::zeros(2, 5), DVector::zeros(2)),
        ];
        let err =
            FnnModel::from_layers(layers, identity_norm(4), identity_norm(2)).unwrap_err();
        assert!(matches!(
            err,
            CoreError::Shape {
                context: "network layer chain",
                expected: 3,
                actual: 5,
            }
        ));
    }

    #[test]
    fn zero_learning_rate_training_step_keeps_parameters() {
        let stream = RngStream::new(5, "fnn-zero-lr");
        let mut model = FnnModel::new(
            &[3, 6, 2],
            identity_norm(3),
            identity_norm(2),
            &stream,
        )
        .unwrap();
        let before: Vec<Vec<f64>> = model
            .param_groups_mut()
            .iter()
            .map(|g| g.to_vec())
            .collect();
        let mut opt = Adam::new(0.0, 0.9, 0.999, 1e-8).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.2, -0.5, 1.0]);
        let t = DMatrix::from_column_slice(2, 1, &[0.4, 0.1]);
        fnn_backward_and_step(&mut model, &x, &t, &mut opt).unwrap();
        let after: Vec<Vec<f64>> = model
            .param_groups_mut()
            .iter()
            .map(|g| g.to_vec())
            .collect();
        assert_eq!(before, after);
    }
}
