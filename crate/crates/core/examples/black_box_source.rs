// Trains a source classifier, seals it, and builds the target pseudolabel store
// from its hard labels alone.

use cabb::blackbox::{init_store, train_source, BlackBoxPredictor, HardLabelOracle, SourceConfig, StoreConfig};
use cabb::data::{make_shifted_pair, ShiftSpec};
use cabb::linalg::Matrix;

pub fn run_example() -> cabb::Result<String> {
    let (source, target) = make_shifted_pair(&ShiftSpec::default(), 3)?;
    let bb = train_source(&source, &SourceConfig::default(), 3)?;
    let report = bb.report().expect("fresh predictors carry a report");
    let mut out = format!(
        "source train {:.3}, holdout {:.3}\n",
        report.train_accuracy,
        report.holdout_accuracy.unwrap_or(f64::NAN)
    );

    let dir = std::env::temp_dir().join(format!("cabb-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| cabb::Error::Validation(e.to_string()))?;
    let path = dir.join("source.ckpt");
    bb.save(&path)?;
    let sealed = BlackBoxPredictor::load(&path)?;
    let refused = cabb::nnet::MlpModel::load_checkpoint(&path).is_err();
    let _ = std::fs::remove_dir_all(&dir);
    out += &format!("sealed checkpoint refused by the plain loader: {refused}\n");

    let probe = Matrix::from_rows(&[[3.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])?;
    out += &format!("hard labels for three probe points: {:?}\n", sealed.predict_hard(&probe)?);

    let mut store = init_store(&sealed, &target, StoreConfig::default())?;
    out += &format!("store accuracy on the target (source-only baseline): {:.3}\n", store.accuracy(&target.labels));
    let uniform = Matrix::from_vec(store.len(), store.num_classes(), vec![1.0 / store.num_classes() as f64; store.len() * store.num_classes()])?;
    store.ema_refresh(&uniform)?;
    out += &format!("first row after one EMA step towards uniform: {:.3?}\n", store.labels().row(0));
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
