// Compares backpropagated gradients of the combined objective with central
// finite differences on a small network.

use cabb::linalg::Matrix;
use cabb::losses::{eqdiv_loss, entropy_loss, noisy_loss, LossValue};
use cabb::nnet::{softmax_rows, Activation, MlpModel};

fn objective(p: &Matrix, y: &Matrix) -> cabb::Result<LossValue> {
    let mut v = noisy_loss(p, y, 1.0)?;
    let (e, d) = (entropy_loss(p), eqdiv_loss(p)?);
    v.value += e.value + d.value;
    for ((g, a), b) in v.grad_wrt_logits.as_mut_slice().iter_mut().zip(e.grad_wrt_logits.as_slice()).zip(d.grad_wrt_logits.as_slice()) {
        *g += a + b;
    }
    Ok(v)
}

pub fn run_example() -> cabb::Result<String> {
    let model = MlpModel::new(3, &[6], 4, Activation::Relu, 42)?;
    let x = Matrix::from_rows(&[[0.3, -1.2, 0.8], [1.1, 0.4, -0.5], [-0.7, 0.9, 0.2]])?;
    let y = Matrix::from_rows(&[[0.7, 0.1, 0.1, 0.1], [0.0, 1.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]])?;
    let (logits, cache) = model.forward(&x)?;
    let analytic = model.backward(&cache, &objective(&softmax_rows(&logits), &y)?.grad_wrt_logits)?;

    let h = 1e-5;
    let mut out = String::new();
    let mut probe = model.clone();
    for (li, layer) in model.layers().iter().enumerate() {
        let mut worst = 0.0f64;
        for r in 0..layer.weights().rows() {
            for k in 0..layer.weights().cols() {
                let w = layer.weights().get(r, k);
                probe.layers_mut()[li].weights_mut().set(r, k, w + h);
                let up = objective(&probe.predict_proba(&x)?, &y)?.value;
                probe.layers_mut()[li].weights_mut().set(r, k, w - h);
                let down = objective(&probe.predict_proba(&x)?, &y)?.value;
                probe.layers_mut()[li].weights_mut().set(r, k, w);
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - analytic.layers()[li].weights().get(r, k)).abs());
            }
        }
        out += &format!("layer {li}: max |analytic - finite difference| = {worst:.2e}\n");
    }
    Ok(out)
}

fn main() {
    match run_example() {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
