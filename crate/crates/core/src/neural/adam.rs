//! First-moment/second-moment adaptive gradient steps.

use crate::error::{CoreError, Result};

use super::TrainConfig;

/// Adam optimizer state over a fixed set of parameter groups.
///
/// Groups are identified by position: every call to [`Adam::step`] must pass
/// the same number of groups with the same lengths, in the same order. Moment
/// buffers are allocated lazily on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Adam> {
        if !learning_rate.is_finite() || learning_rate < 0.0 {
            return Err(CoreError::Parameter {
                name: "learning_rate",
                reason: format!("must be finite and non-negative, got {learning_rate}"),
            });
        }
        for (name, value) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&value) {
                return Err(CoreError::Parameter {
                    name,
                    reason: format!("must lie in [0, 1), got {value}"),
                });
            }
        }
        if !epsilon.is_finite() || epsilon <= 0.0 {
            return Err(CoreError::Parameter {
                name: "epsilon",
                reason: format!("must be finite and positive, got {epsilon}"),
            });
        }
        Ok(Adam {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Adam> {
        Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    }

    /// Applies one bias-corrected update to every `(parameters, gradient)`
    /// pair in `groups`.
    pub fn step(&mut self, groups: &mut [(&mut [f64], &[f64])]) -> Result<()> {
        if self.first.is_empty() {
            self.first = groups.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if groups.len() != self.first.len() {
            return Err(CoreError::Shape {
                context: "optimizer parameter groups",
                expected: self.first.len(),
                actual: groups.len(),
            });
        }
        for ((params, grads), m) in groups.iter().zip(&self.first) {
            if params.len() != m.len() || grads.len() != m.len() {
                return Err(CoreError::Shape {
                    context: "optimizer group length",
                    expected: m.len(),
                    actual: params.len().max(grads.len()),
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for ((params, grads), (m, v)) in groups
            .iter_mut()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut opt = Adam::new(0.0, 0.9, 0.999, 1e-8).unwrap();
        let mut params = vec![1.5, -2.25, 0.75];
        let original = params.clone();
        let grads = vec![10.0, -3.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut [(params.as_mut_slice(), grads.as_slice())])
                .unwrap();
        }
        assert_eq!(params, original);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_gradient() {
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8).unwrap();
        let mut params = vec![0.0, 0.0];
        let grads = vec![4.0, -0.25];
        opt.step(&mut [(params.as_mut_slice(), grads.as_slice())])
            .unwrap();
        let eps = 1e-8;
        let expected: Vec<f64> = grads
            .iter()
            .map(|g| -1e-3 * g / (g.abs() + eps))
            .collect();
        for (p, e) in params.iter().zip(&expected) {
            assert!((p - e).abs() < 1e-12, "got {p}, expected {e}");
        }
    }

    #[test]
    fn converges_on_a_scalar_quadratic() {
        let mut opt = Adam::new(0.05, 0.9, 0.999, 1e-8).unwrap();
        let mut params = vec![3.0];
        for _ in 0..2000 {
            let grads = vec![2.0 * (params[0] - 1.0)];
            opt.step(&mut [(params.as_mut_slice(), grads.as_slice())])
                .unwrap();
        }
        assert!((params[0] - 1.0).abs() < 1e-4, "got {}", params[0]);
    }

    #[test]
    fn group_count_changes_are_rejected() {
        let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8).unwrap();
        let mut a = vec![0.0];
        let g = vec![1.0];
        opt.step(&mut [(a.as_mut_slice(), g.as_slice())]).unwrap();
        let mut b = vec![0.0];
        let err = opt
            .step(&mut [
                (a.as_mut_slice(), g.as_slice()),
                (b.as_mut_slice(), g.as_slice()),
            ])
            .unwrap_err();
        assert!(matches!(err, CoreError::Shape { .. }), "{err}");
    }

    #[test]
    fn invalid_hyperparameters_are_rejected() {
        assert!(Adam::new(f64::NAN, 0.9, 0.999, 1e-8).is_err());
        assert!(Adam::new(1e-3, 1.0, 0.999, 1e-8).is_err());
        assert!(Adam::new(1e-3, 0.9, -0.1, 1e-8).is_err());
        assert!(Adam::new(1e-3, 0.9, 0.999, 0.0).is_err());
    }
}
