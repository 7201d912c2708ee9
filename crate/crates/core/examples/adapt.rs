// End-to-end adaptation on the desk task.
//
// `cargo run --release --example adapt -- [epochs]` (default 50).

use cabb::blackbox::{train_source, SourceConfig};
use cabb::data::{make_shifted_pair, ShiftSpec};
use cabb::trainer::{run_with, AdaptConfig};

pub fn run_example(epochs: usize) -> cabb::Result<String> {
    let seed = 1;
    let (source, target) = make_shifted_pair(&ShiftSpec::default(), seed)?;
    let bb = train_source(&source, &SourceConfig::default(), seed)?;
    let config = AdaptConfig {
        epochs,
        ..AdaptConfig::default()
    };
    let mut out = String::from("epoch branch  acc    clean  precision  gamma\n");
    let every = (epochs / 10).max(1);
    let result = run_with(&config, &bb, &target, seed, |r| {
        if r.epoch % every == 0 || r.epoch == 1 {
            out += &format!(
                "{:>5} {:>6}  {:.3}  {:>5}  {:.3}      {:.4}\n",
                r.epoch, r.branch, r.target_accuracy, r.clean_set_size, r.clean_set_precision, r.gamma
            );
        }
    })?;
    let s = &result.summary;
    out += &format!(
        "source-only {:.3}, adapted {:.3} / {:.3} (mean {:.3})\n",
        s.source_only_acc, s.branch1_acc, s.branch2_acc, s.mean_acc
    );
    Ok(out)
}

fn main() {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    match run_example(epochs) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
