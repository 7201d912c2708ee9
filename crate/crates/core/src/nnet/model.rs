use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::seeding::{rng_for, TAG_INIT};

/// Nonlinearity applied after every backbone layer. The classifier layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `out x in`.
///
/// The same type doubles as a parameter-shaped buffer for gradients and
/// optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub(crate) weights: Matrix,
    pub(crate) bias: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::dim("Dense::new bias", weights.rows(), bias.len()));
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Symmetric uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    fn random<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(in_dim, out_dim);
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-limit..=limit);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-limit..=limit);
        }
        layer
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim(), self.out_dim())
    }

    /// Flat view: weights then bias.
    pub(crate) fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.as_slice().iter().chain(self.bias.iter())
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }

    pub(crate) fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    fn forward_into(&self, input: &Matrix, out: &mut Matrix) {
        let in_dim = self.in_dim();
        let w = self.weights.as_slice();
        for b in 0..input.rows() {
            let x = input.row(b);
            let y = out.row_mut(b);
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = self.bias[o];
                for (wi, xi) in wr.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo = acc;
            }
        }
    }
}

static STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Small feed-forward classifier: dense backbone layers with a nonlinearity,
/// followed by one affine classifier layer producing logits.
#[derive(Debug)]
pub struct MlpModel {
    layers: Vec<Dense>,
    activation: Activation,
    // Changes on every parameter mutation; ties forward caches to a parameter state.
    stamp: u64,
}

impl Clone for MlpModel {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            activation: self.activation,
            stamp: next_stamp(),
        }
    }
}

impl PartialEq for MlpModel {
    fn eq(&self, other: &Self) -> bool {
        self.activation == other.activation && self.layers == other.layers
    }
}

/// Activations recorded by [`MlpModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    // inputs[l] is the input to layer l.
    inputs: Vec<Matrix>,
    // Pre-activation outputs of each backbone layer.
    pre_activations: Vec<Matrix>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

/// Parameter gradients, one buffer per layer (classifier last).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) layers: Vec<Dense>,
}

impl Gradients {
    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| l.params().all(|v| *v == 0.0))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }
}

impl MlpModel {
    /// Randomly initialised model with the given backbone widths.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::Validation("layer widths must be positive".into()));
        }
        let mut rng = rng_for(seed, &[TAG_INIT]);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input_dim;
        for &h in hidden {
            layers.push(Dense::random(fan_in, h, &mut rng));
            fan_in = h;
        }
        layers.push(Dense::random(fan_in, classes, &mut rng));
        Self::from_layers(layers, activation)
    }

    /// Assembles a model from explicit layers; the last layer is the classifier.
    pub fn from_layers(layers: Vec<Dense>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("model needs a classifier layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[1].in_dim() != pair[0].out_dim() {
                return Err(Error::dim(
                    "MlpModel layer chain",
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        let model = Self {
            layers,
            activation,
            stamp: next_stamp(),
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier().out_dim()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn backbone(&self) -> &[Dense] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn classifier(&self) -> &Dense {
        self.layers.last().expect("model has a classifier")
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.stamp = next_stamp();
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.params().copied()).collect()
    }

    /// Largest absolute parameter difference to another model of the same shape.
    pub fn max_param_gap(&self, other: &MlpModel) -> f64 {
        self.flat_params()
            .iter()
            .zip(other.flat_params())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.layers.iter().all(|l| l.params().all(|v| v.is_finite())) {
            Ok(())
        } else {
            Err(Error::NonFinite("model parameters".into()))
        }
    }

    pub(crate) fn zero_buffers(&self) -> Vec<Dense> {
        self.layers.iter().map(Dense::zeros_like).collect()
    }

    pub(crate) fn touch(&mut self) {
        self.stamp = next_stamp();
    }

    /// Logits for a `B x D` batch, plus the cache needed by [`MlpModel::backward`].
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dim("forward input width", self.input_dim(), batch.cols()));
        }
        let n_backbone = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(n_backbone);
        let mut current = batch.clone();
        for layer in &self.layers[..n_backbone] {
            let mut z = Matrix::zeros(current.rows(), layer.out_dim());
            layer.forward_into(&current, &mut z);
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            inputs.push(current);
            pre_activations.push(z);
            current = a;
        }
        let classifier = self.classifier();
        let mut logits = Matrix::zeros(current.rows(), classifier.out_dim());
        classifier.forward_into(&current, &mut logits);
        inputs.push(current);
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok((
            logits,
            ForwardCache {
                stamp: self.stamp,
                inputs,
                pre_activations,
            },
        ))
    }

    /// Logits only; skips cache construction.
    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.cols() != self.input_dim() {
            return Err(Error::dim("forward input width", self.input_dim(), batch.cols()));
        }
        let mut current = batch.clone();
        let n_backbone = self.layers.len() - 1;
        for layer in &self.layers[..n_backbone] {
            let mut z = Matrix::zeros(current.rows(), layer.out_dim());
            layer.forward_into(&current, &mut z);
            for v in z.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            current = z;
        }
        let classifier = self.classifier();
        let mut logits = Matrix::zeros(current.rows(), classifier.out_dim());
        classifier.forward_into(&current, &mut logits);
        if !logits.is_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Row-wise softmax of the logits.
    pub fn predict_proba(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(super::softmax_rows(&self.logits(batch)?))
    }

    /// Backpropagates `grad_logits` (`B x C`) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        if cache.stamp != self.stamp {
            return Err(Error::StaleCache);
        }
        if grad_logits.rows() != cache.batch_size() {
            return Err(Error::dim("backward batch", cache.batch_size(), grad_logits.rows()));
        }
        if grad_logits.cols() != self.num_classes() {
            return Err(Error::dim("backward classes", self.num_classes(), grad_logits.cols()));
        }
        let mut grads = self.zero_buffers();
        let mut upstream = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.inputs[l];
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            let g = &mut grads[l];
            {
                let gw = g.weights.as_mut_slice();
                for b in 0..input.rows() {
                    let x = input.row(b);
                    let up = upstream.row(b);
                    for o in 0..out_dim {
                        let u = up[o];
                        if u == 0.0 {
                            continue;
                        }
                        g.bias[o] += u;
                        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for (gwi, xi) in row.iter_mut().zip(x) {
                            *gwi += u * xi;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = layer.weights.as_slice();
            let mut down = Matrix::zeros(input.rows(), in_dim);
            for b in 0..input.rows() {
                let up = upstream.row(b);
                let d = down.row_mut(b);
                for (o, &u) in up.iter().enumerate() {
                    if u == 0.0 {
                        continue;
                    }
                    for (di, wi) in d.iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *di += u * wi;
                    }
                }
            }
            // Input to layer l is the activated output of backbone layer l-1.
            let pre = &cache.pre_activations[l - 1];
            for (d, z) in down.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= self.activation.derivative(*z);
            }
            upstream = down;
        }
        Ok(Gradients { layers: grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::softmax_rows;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, &[99]);
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    // Independent scalar-loop evaluation of the layer algebra.
    fn scalar_forward(model: &MlpModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = model.layers().len();
        for (l, layer) in model.layers().iter().enumerate() {
            let mut next = Vec::with_capacity(layer.out_dim());
            for o in 0..layer.out_dim() {
                let mut z = layer.bias()[o];
                for i in 0..layer.in_dim() {
                    z += layer.weights().get(o, i) * h[i];
                }
                if l + 1 < n && model.activation() == Activation::Relu && z < 0.0 {
                    z = 0.0;
                }
                next.push(z);
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut model = MlpModel::new(3, &[4], 2, Activation::Relu, 1).unwrap();
        for layer in model.layers_mut() {
            for w in layer.weights_mut().as_mut_slice() {
                *w = 0.0;
            }
        }
        model.layers_mut()[1].bias_mut().copy_from_slice(&[0.25, -1.5]);
        let (logits, _) = model.forward(&random_batch(5, 3, 2)).unwrap();
        for row in logits.iter_rows() {
            assert_eq!(row, &[0.25, -1.5]);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut w = Matrix::zeros(3, 3);
        for i in 0..3 {
            w.set(i, i, 1.0);
        }
        let model =
            MlpModel::from_layers(vec![Dense::new(w, vec![0.0; 3]).unwrap()], Activation::Relu)
                .unwrap();
        let batch = Matrix::from_rows(&[vec![0.5, 1.0, 2.0], vec![3.0, 0.1, 7.0]]).unwrap();
        let (logits, _) = model.forward(&batch).unwrap();
        assert_eq!(logits, batch);
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        for seed in 0..5 {
            let model = MlpModel::new(4, &[7, 5], 3, Activation::Relu, seed).unwrap();
            let batch = random_batch(6, 4, seed);
            let (logits, _) = model.forward(&batch).unwrap();
            for b in 0..batch.rows() {
                let expected = scalar_forward(&model, batch.row(b));
                for (got, want) in logits.row(b).iter().zip(&expected) {
                    assert!((got - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = MlpModel::new(4, &[8], 3, Activation::Relu, 0).unwrap();
        assert!(matches!(
            model.forward(&random_batch(2, 5, 0)),
            Err(Error::Dimension { .. })
        ));
        let bad = vec![Dense::zeros(2, 3), Dense::zeros(4, 2)];
        assert!(MlpModel::from_layers(bad, Activation::Relu).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let model = MlpModel::new(3, &[5, 5], 4, Activation::Relu, 3).unwrap();
        let (_, cache) = model.forward(&random_batch(4, 3, 3)).unwrap();
        let grads = model.backward(&cache, &Matrix::zeros(4, 4)).unwrap();
        assert!(grads.is_zero());
    }

    #[test]
    fn single_layer_ce_gradient_is_outer_product() {
        // Closed form: dL/dW = (softmax - y) x^T, dL/db = softmax - y.
        let model = MlpModel::new(3, &[], 4, Activation::Relu, 11).unwrap();
        let x = Matrix::from_rows(&[vec![0.3, -1.2, 2.0]]).unwrap();
        let (logits, cache) = model.forward(&x).unwrap();
        let sigma = softmax_rows(&logits);
        let y = [0.0, 0.0, 1.0, 0.0];
        let mut g = sigma.clone();
        for (gk, yk) in g.row_mut(0).iter_mut().zip(y) {
            *gk -= yk;
        }
        let grads = model.backward(&cache, &g).unwrap();
        let layer = &grads.layers()[0];
        for o in 0..4 {
            let delta = sigma.get(0, o) - y[o];
            assert!((layer.bias()[o] - delta).abs() < 1e-15);
            for i in 0..3 {
                assert!((layer.weights().get(o, i) - delta * x.get(0, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn stale_cache_detected() {
        let mut model = MlpModel::new(2, &[3], 2, Activation::Relu, 0).unwrap();
        let (_, cache) = model.forward(&random_batch(1, 2, 0)).unwrap();
        model.layers_mut()[0].bias_mut()[0] += 1.0;
        assert!(matches!(
            model.backward(&cache, &Matrix::zeros(1, 2)),
            Err(Error::StaleCache)
        ));
        // A clone is a different parameter state as far as caches are concerned.
        let copy = model.clone();
        let (_, cache) = model.forward(&random_batch(1, 2, 0)).unwrap();
        assert!(copy.backward(&cache, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = MlpModel::new(2, &[64, 64], 6, Activation::Relu, 42).unwrap();
        let b = MlpModel::new(2, &[64, 64], 6, Activation::Relu, 42).unwrap();
        let c = MlpModel::new(2, &[64, 64], 6, Activation::Relu, 43).unwrap();
        assert_eq!(a, b);
        assert!(a.max_param_gap(&c) > 0.0);
        assert_eq!(a.param_count(), 2 * 64 + 64 + 64 * 64 + 64 + 64 * 6 + 6);
    }
}
