//! Runs every crate example at reduced size.

macro_rules! example {
    ($name:ident) => {
        #[allow(dead_code)]
        mod $name {
            include!(concat!("../examples/", stringify!($name), ".rs"));
        }
    };
}

example!(desk_task);
example!(black_box_source);
example!(jsd_gmm_split);
example!(ensemble_pseudolabels);
example!(curriculum_losses);
example!(gradient_check);
example!(adapt);
example!(ablation_sweep);

#[test]
fn desk_task_lists_every_class() {
    assert_eq!(desk_task::run_example().unwrap().lines().count(), 7);
}

#[test]
fn black_box_source_refuses_plain_loading() {
    assert!(black_box_source::run_example().unwrap().contains("plain loader: true"));
}

#[test]
fn jsd_gmm_split_runs() {
    assert!(jsd_gmm_split::run_example().unwrap().contains("0.3113"));
}

#[test]
fn ensemble_pseudolabels_runs() {
    assert!(ensemble_pseudolabels::run_example().unwrap().contains("T=1"));
}

#[test]
fn curriculum_losses_runs() {
    assert!(curriculum_losses::run_example().unwrap().contains("gamma 1.000000"));
}

#[test]
fn gradient_check_is_tight() {
    let text = gradient_check::run_example().unwrap();
    for line in text.lines() {
        let v: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!(v < 1e-7, "{line}");
    }
}

#[test]
fn adapt_runs_briefly() {
    assert!(adapt::run_example(2).unwrap().contains("source-only"));
}

#[test]
fn ablation_sweep_runs_briefly() {
    assert_eq!(ablation_sweep::run_example(1, &[1]).unwrap().lines().count(), 6);
}
