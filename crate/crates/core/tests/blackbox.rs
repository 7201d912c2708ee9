use cabb::blackbox::{init_store, train_source, HardLabelOracle, SourceConfig, StoreConfig};
use cabb::data::{make_shifted_pair, ShiftSpec};

#[test]
fn default_task_source_fit_and_store() {
    let (s, t) = make_shifted_pair(&ShiftSpec::default(), 21).unwrap();
    let bb = train_source(&s, &SourceConfig::default(), 21).unwrap();
    let pred = bb.predict_hard(&s.features).unwrap();
    let hits = pred.iter().zip(&s.labels).filter(|(a, b)| a == b).count() as f64 / s.len() as f64;
    assert!(hits >= 0.9, "{hits}");
    assert!(bb.report().unwrap().holdout_accuracy.unwrap() >= 0.9);

    let store = init_store(&bb, &t, StoreConfig::default()).unwrap();
    let src_only = store.accuracy(&t.labels);
    assert!(src_only < hits, "the shift should cost accuracy: {src_only} vs {hits}");
}
