// Scores pseudolabels against model outputs with JSD, fits the two-component
// mixture and splits samples into clean and noisy sets.

use cabb::linalg::Matrix;
use cabb::nnet::ProbVector;
use cabb::separation::{fit_gmm, jsd, jsd_scores, split, DEFAULT_MAX_ITER, DEFAULT_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> cabb::Result<String> {
    let mut out = format!("jsd((1,0), (0.5,0.5)) = {:.4}\n", jsd(&[1.0, 0.0], &[0.5, 0.5]));

    // 400 samples, 3 classes; a quarter carry a wrong one-hot pseudolabel.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c) = (400, 3);
    let mut labels = Matrix::zeros(n, c);
    let mut probs = Matrix::zeros(n, c);
    let mut wrong = vec![false; n];
    for i in 0..n {
        let truth = i % c;
        wrong[i] = i % 4 == 0;
        let given = if wrong[i] { (truth + 1) % c } else { truth };
        labels.set(i, given, 1.0);
        let mut w: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..0.3)).collect();
        w[truth] += rng.random_range(1.0..3.0);
        probs.row_mut(i).copy_from_slice(&ProbVector::normalized(w)?);
    }
    let scores = jsd_scores(&labels, &probs)?;
    let fit = fit_gmm(&scores, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    out += &format!(
        "mixture means {:.3} / {:.3} after {} EM iterations\n",
        fit.mean_low, fit.mean_high, fit.iterations_used
    );
    for delta in [0.5, 0.9, 0.99] {
        let s = split(&scores, &fit, delta)?;
        let correct = s.clean_idx.iter().filter(|&&i| !wrong[i]).count();
        out += &format!(
            "delta {delta}: {} clean ({} correctly labelled), {} noisy\n",
            s.clean_idx.len(),
            correct,
            s.noisy_idx.len()
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
