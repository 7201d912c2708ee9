// Evaluates every loss term on one batch and follows gamma over a loss sequence.

use cabb::curriculum::CurriculumState;
use cabb::linalg::Matrix;
use cabb::losses::{ce_clean, entropy_loss, eqdiv_loss, noisy_loss, total_loss};

pub fn run_example() -> cabb::Result<String> {
    let probs = Matrix::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.8, 0.1], [0.3, 0.3, 0.4], [0.5, 0.4, 0.1]])?;
    let targets = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]])?;
    let (clean_rows, noisy_rows) = ([0usize, 1], [2usize, 3]);
    let clean = ce_clean(&probs.select_rows(&clean_rows), &targets.select_rows(&clean_rows))?.scatter(&clean_rows, 4)?;
    let noisy = noisy_loss(&probs.select_rows(&noisy_rows), &targets.select_rows(&noisy_rows), 1.0)?.scatter(&noisy_rows, 4)?;
    let ent = entropy_loss(&probs);
    let eqdiv = eqdiv_loss(&probs)?;
    let mut out = format!(
        "clean {:.4}  noisy {:.4}  entropy {:.4}  eqdiv {:.4}\n",
        clean.value, noisy.value, ent.value, eqdiv.value
    );

    let mut state = CurriculumState::new(1.0, 2e-3)?;
    let clean_losses = [0.9, 0.8, 0.8, 1.2, 0.5, 0.5];
    for l in clean_losses {
        let g = state.gamma_step(l)?;
        let total = total_loss(&clean, &noisy, &ent, &eqdiv, g)?;
        out += &format!("clean loss {l:.1} -> gamma {g:.6}, total {:.4}\n", total.value);
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
