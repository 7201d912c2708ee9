// Generates the synthetic source/target pair and shows how the shift moves each class.

use cabb::data::{make_shifted_pair, ShiftSpec};

fn centroid(set: &cabb::data::LabeledSet, k: usize) -> (f64, f64) {
    let rows: Vec<&[f64]> = set.features.iter_rows().zip(&set.labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
    let n = rows.len() as f64;
    (rows.iter().map(|r| r[0]).sum::<f64>() / n, rows.iter().map(|r| r[1]).sum::<f64>() / n)
}

pub fn run_example() -> cabb::Result<String> {
    let spec = ShiftSpec::default();
    let (source, target) = make_shifted_pair(&spec, 7)?;
    let mut out = format!(
        "{} source / {} target samples, {} classes, rotation {} deg\n",
        source.len(),
        target.len(),
        spec.class_count,
        spec.rotation_deg
    );
    for k in 0..spec.class_count {
        let (s, t) = (centroid(&source, k), centroid(&target, k));
        out += &format!("class {k}: source ({:+.2}, {:+.2}) -> target ({:+.2}, {:+.2})\n", s.0, s.1, t.0, t.1);
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
