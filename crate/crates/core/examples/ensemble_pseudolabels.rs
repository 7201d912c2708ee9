// Averages two branches over augmented views and sharpens the result.

use cabb::linalg::Matrix;
use cabb::nnet::{Activation, MlpModel};
use cabb::pseudolabel::{ensemble_pseudolabels, sharpen, AugmentSpec, SharpenSpec};

pub fn run_example() -> cabb::Result<String> {
    let mut out = String::new();
    let y = [0.6, 0.3, 0.1];
    for t in [1.0, 0.5, 0.25] {
        out += &format!("sharpen({y:?}, T={t}) = {:.4?}\n", &*sharpen(&y, t)?);
    }

    let b1 = MlpModel::new(2, &[16], 3, Activation::Relu, 1)?;
    let b2 = MlpModel::new(2, &[16], 3, Activation::Relu, 2)?;
    let x = Matrix::from_rows(&[[0.5, -1.0], [2.0, 2.0]])?;
    let labels = ensemble_pseudolabels(&x, &[0, 1], &b1, &b2, &AugmentSpec::default(), &SharpenSpec::default(), 9)?;
    for (i, row) in labels.iter_rows().enumerate() {
        out += &format!(
            "sample {i}: branch1 {:.3?} branch2 {:.3?} ensemble {:.3?}\n",
            b1.predict_proba(&x)?.row(i),
            b2.predict_proba(&x)?.row(i),
            row
        );
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
