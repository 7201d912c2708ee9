use serde::{Deserialize, Serialize};

use super::model::{Dense, Gradients, MlpModel};
use crate::error::{Error, Result};

/// SGD with momentum and weight decay, with separate step sizes for the
/// backbone and the classifier layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr_backbone: f64,
    pub lr_classifier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_classifier: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lr_backbone,
            self.lr_classifier,
            self.momentum,
            self.weight_decay,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "SGD hyperparameters must be finite and nonnegative".into(),
            ));
        }
        if self.momentum >= 1.0 {
            return Err(Error::Validation("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per layer.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Dense>,
}

impl SgdState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            velocity: model.zero_buffers(),
        }
    }
}

/// One optimizer step: `v <- m*v + g + wd*theta`, `theta <- theta - lr*v`.
pub fn sgd_step(
    model: &mut MlpModel,
    grads: &Gradients,
    state: &mut SgdState,
    config: &SgdConfig,
) -> Result<()> {
    let n = model.layers().len();
    if grads.layers.len() != n || state.velocity.len() != n {
        return Err(Error::dim("sgd_step layer count", n, grads.layers.len()));
    }
    for ((layer, g), v) in model
        .layers()
        .iter()
        .zip(&grads.layers)
        .zip(&state.velocity)
    {
        if g.param_count() != layer.param_count() || v.param_count() != layer.param_count() {
            return Err(Error::dim(
                "sgd_step layer shape",
                layer.param_count(),
                g.param_count(),
            ));
        }
    }
    let layers = model.layers_mut();
    for (l, ((layer, g), v)) in layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity)
        .enumerate()
    {
        let lr = if l + 1 == n {
            config.lr_classifier
        } else {
            config.lr_backbone
        };
        for ((theta, gi), vi) in layer.params_mut().zip(g.params()).zip(v.params_mut()) {
            *vi = config.momentum * *vi + gi + config.weight_decay * *theta;
            *theta -= lr * *vi;
        }
    }
    model.touch();
    model.check_finite()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nnet::Activation;

    fn model() -> MlpModel {
        MlpModel::new(3, &[4], 2, Activation::Relu, 5).unwrap()
    }

    fn constant_grads(m: &MlpModel, value: f64) -> Gradients {
        let mut layers = m.zero_buffers();
        for l in &mut layers {
            for p in l.params_mut() {
                *p = value;
            }
        }
        Gradients { layers }
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut m = model();
        let before = m.clone();
        let mut state = SgdState::new(&m);
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let g = constant_grads(&m, 0.0);
        sgd_step(&mut m, &g, &mut state, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn plain_sgd_step_uses_layer_learning_rates() {
        let mut m = model();
        let before = m.flat_params();
        let mut state = SgdState::new(&m);
        let cfg = SgdConfig {
            lr_backbone: 0.1,
            lr_classifier: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let g = constant_grads(&m, 0.2);
        sgd_step(&mut m, &g, &mut state, &cfg).unwrap();
        let after = m.flat_params();
        let backbone_params = m.layers()[0].param_count();
        for (i, (a, b)) in after.iter().zip(&before).enumerate() {
            let lr = if i < backbone_params { 0.1 } else { 0.5 };
            assert_eq!(*a, b - lr * 0.2);
        }
    }

    #[test]
    fn momentum_unrolls_over_two_steps() {
        // v1 = g, v2 = 0.9 g + g, total displacement lr * g * 2.9.
        let mut m = model();
        let before = m.flat_params();
        let mut state = SgdState::new(&m);
        let cfg = SgdConfig {
            lr_backbone: 0.01,
            lr_classifier: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let g = constant_grads(&m, 0.3);
        sgd_step(&mut m, &g, &mut state, &cfg).unwrap();
        sgd_step(&mut m, &g, &mut state, &cfg).unwrap();
        for (a, b) in m.flat_params().iter().zip(&before) {
            assert!((b - a - 0.01 * 0.3 * 2.9).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_update_is_reported() {
        let mut m = model();
        let mut state = SgdState::new(&m);
        let g = constant_grads(&m, f64::INFINITY);
        assert!(matches!(
            sgd_step(&mut m, &g, &mut state, &SgdConfig::default()),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut m = model();
        let other = MlpModel::new(3, &[5], 2, Activation::Relu, 5).unwrap();
        let mut state = SgdState::new(&m);
        let g = constant_grads(&other, 0.0);
        assert!(sgd_step(&mut m, &g, &mut state, &SgdConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::default().validate().is_ok());
        let bad = SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SgdConfig {
            lr_backbone: -1.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn separable_toy_set_fits_within_500_steps() {
        // Two classes split by the line x0 + x1 = 0.
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0 * 4.0 - 2.0;
            rows.push(vec![t, 1.0 - t * 0.3]);
            labels.push(0);
            rows.push(vec![t, -1.0 - t * 0.3 - 0.5]);
            labels.push(1);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let mut m = MlpModel::new(2, &[16, 16], 2, Activation::Relu, 9).unwrap();
        let mut state = SgdState::new(&m);
        let cfg = SgdConfig {
            lr_backbone: 0.05,
            lr_classifier: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut solved_at = None;
        for step in 0..500 {
            let (logits, cache) = m.forward(&x).unwrap();
            let probs = crate::nnet::softmax_rows(&logits);
            if probs.argmax_rows() == labels {
                solved_at = Some(step);
                break;
            }
            let mut g = probs;
            for (r, &y) in labels.iter().enumerate() {
                g.row_mut(r)[y] -= 1.0;
            }
            for v in g.as_mut_slice() {
                *v /= x.rows() as f64;
            }
            let grads = m.backward(&cache, &g).unwrap();
            sgd_step(&mut m, &grads, &mut state, &cfg).unwrap();
        }
        assert!(solved_at.is_some(), "did not reach 100% train accuracy");
    }
}
