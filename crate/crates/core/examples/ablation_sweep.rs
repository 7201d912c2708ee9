// Full method against each single-component ablation over a few seeds.
//
// `cargo run --release --example ablation_sweep -- [epochs]` (default 50).

use cabb::blackbox::{train_source, SourceConfig};
use cabb::data::{make_shifted_pair, ShiftSpec};
use cabb::trainer::{run, Ablation, AdaptConfig};

pub fn run_example(epochs: usize, seeds: &[u64]) -> cabb::Result<String> {
    let base = AdaptConfig {
        epochs,
        ..AdaptConfig::default()
    };
    let mut variants = vec![("full".to_string(), base.clone())];
    for a in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.apply(a);
        variants.push((a.name().to_string(), cfg));
    }
    let mut out = format!("{:<14}{}\n", "variant", seeds.iter().map(|s| format!("seed {s:<4}")).collect::<String>());
    let mut source_only = Vec::new();
    let tasks = seeds
        .iter()
        .map(|&s| {
            let (src, tgt) = make_shifted_pair(&ShiftSpec::default(), s)?;
            Ok((tgt, train_source(&src, &SourceConfig::default(), s)?))
        })
        .collect::<cabb::Result<Vec<_>>>()?;
    for (name, cfg) in &variants {
        out += &format!("{name:<14}");
        for ((target, bb), &seed) in tasks.iter().zip(seeds) {
            let r = run(cfg, bb, target, seed)?;
            if name == "full" {
                source_only.push(r.summary.source_only_acc);
            }
            out += &format!("{:<10.4}", r.summary.mean_acc);
        }
        out.push('\n');
    }
    out += &format!("{:<14}{}\n", "source-only", source_only.iter().map(|a| format!("{a:<10.4}")).collect::<String>());
    Ok(out)
}

fn main() {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50);
    match run_example(epochs, &[1, 2, 3]) {
        Ok(text) => print!("{text}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
