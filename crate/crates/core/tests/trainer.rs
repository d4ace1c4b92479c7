use std::fs;

use maskguide::dataset::{Dataset, Split};
use maskguide::synthetic::{render_all, SyntheticSpec};
use maskguide::train::{
    parse_metrics, train, MetricRecord, TrainConfig, Trainer, LAST_CHECKPOINT, METRICS_FILE,
};
use maskguide::Error;

fn dataset(train_n: usize, val_n: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        canvas_size: 64,
        ..SyntheticSpec::new(3, train_n, val_n, 0, 1.0, seed)
    };
    let (m, r) = render_all(&spec, std::path::Path::new(".")).unwrap();
    Dataset::from_images(&m, r.into_iter().map(|s| s.pixels).collect(), config(1).dataset_config()).unwrap()
}

fn config(epochs: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        image_size: 64,
        ..TrainConfig::synthetic()
    }
}

fn steps(log: &[MetricRecord]) -> Vec<(f64, f64, f64, f64)> {
    log.iter()
        .filter_map(|r| match *r {
            MetricRecord::Step {
                l_cls,
                l_mask,
                total,
                lambda_mask,
                ..
            } => Some((l_cls, l_mask, total, lambda_mask)),
            _ => None,
        })
        .collect()
}

#[test]
fn logged_total_is_weighted_sum() {
    let ds = dataset(10, 0, 1);
    let out = train(&TrainConfig { lambda_mask: 0.7, ..config(2) }, &ds).unwrap();
    let s = steps(&out.log);
    assert_eq!(s.len(), 6);
    for (l_cls, l_mask, total, lambda) in s {
        assert_eq!(lambda, 0.7);
        assert!((total - (l_cls + 0.7 * l_mask)).abs() <= 1e-15 * total.abs().max(1.0));
    }
}

#[test]
fn mask_weight_only_changes_the_mask_path() {
    let ds = dataset(8, 0, 2);
    let a = train(&TrainConfig { lambda_mask: 0.0, max_steps: Some(1), ..config(1) }, &ds).unwrap();
    let b = train(&TrainConfig { lambda_mask: 1.0, max_steps: Some(1), ..config(1) }, &ds).unwrap();
    let (sa, sb) = (steps(&a.log), steps(&b.log));
    assert_eq!(sa[0].0, sb[0].0, "first-step classification loss");
    assert_eq!(sa[0].1, sb[0].1, "mask loss is measured either way");
    assert_ne!(a.state.params, b.state.params);
    // Without the mask term the localization head receives no gradient.
    let init = Trainer::new(config(1), &ds, None).unwrap().state().params.clone();
    assert_eq!(a.state.params.loc_convs, init.loc_convs);
    assert_ne!(b.state.params.loc_convs, init.loc_convs);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let ds = dataset(8, 0, 3);
    let init = Trainer::new(config(1), &ds, None).unwrap().state().params.clone();
    let out = train(&TrainConfig { learning_rate: 0.0, ..config(1) }, &ds).unwrap();
    assert_eq!(out.state.params, init);
    assert_eq!(out.state.step, 2);
}

#[test]
fn identical_configs_write_identical_logs() {
    let ds = dataset(10, 4, 4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        Trainer::new(config(2), &ds, Some(dir)).unwrap().run().unwrap();
    }
    let la = fs::read(a.path().join(METRICS_FILE)).unwrap();
    assert!(!la.is_empty());
    assert_eq!(la, fs::read(b.path().join(METRICS_FILE)).unwrap());
    assert_eq!(
        fs::read(a.path().join(LAST_CHECKPOINT)).unwrap(),
        fs::read(b.path().join(LAST_CHECKPOINT)).unwrap()
    );
    let log = parse_metrics(&String::from_utf8(la).unwrap()).unwrap();
    assert_eq!(log.iter().filter(|r| matches!(r, MetricRecord::Eval { .. })).count(), 2);
}

#[test]
fn resume_reproduces_uninterrupted_trace() {
    let ds = dataset(10, 4, 5);
    let full = tempfile::tempdir().unwrap();
    Trainer::new(config(3), &ds, Some(full.path())).unwrap().run().unwrap();

    // Stop mid-epoch, then continue from the saved state.
    let split = tempfile::tempdir().unwrap();
    let stop = TrainConfig { max_steps: Some(4), ..config(3) };
    Trainer::new(stop, &ds, Some(split.path())).unwrap().run().unwrap();
    let resumed = Trainer::resume(config(3), &ds, split.path(), &split.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(resumed.state().step, 4);
    resumed.run().unwrap();

    assert_eq!(
        fs::read_to_string(full.path().join(METRICS_FILE)).unwrap(),
        fs::read_to_string(split.path().join(METRICS_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(full.path().join(LAST_CHECKPOINT)).unwrap(),
        fs::read(split.path().join(LAST_CHECKPOINT)).unwrap()
    );
}

#[test]
fn resume_discards_records_after_the_checkpoint() {
    let ds = dataset(10, 0, 6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { checkpoint_every: 2, ..config(2) };
    Trainer::new(cfg.clone(), &ds, Some(dir.path())).unwrap().run().unwrap();
    let ckpt = dir.path().join("checkpoint-2.ckpt");
    assert!(ckpt.exists());
    let before = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let t = Trainer::resume(cfg, &ds, dir.path(), &ckpt).unwrap();
    assert_eq!(t.log().len(), 2);
    t.run().unwrap();
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), before);
}

#[test]
fn resume_rejects_a_different_trajectory() {
    let ds = dataset(6, 0, 7);
    let dir = tempfile::tempdir().unwrap();
    Trainer::new(config(1), &ds, Some(dir.path())).unwrap().run().unwrap();
    let other = TrainConfig { seed: 99, ..config(1) };
    assert!(matches!(
        Trainer::resume(other, &ds, dir.path(), &dir.path().join(LAST_CHECKPOINT)),
        Err(Error::Config(_))
    ));
}

#[test]
fn non_finite_loss_names_the_batch() {
    let ds = dataset(8, 0, 8);
    let err = train(&TrainConfig { learning_rate: 1e300, ..config(1) }, &ds).unwrap_err();
    match err {
        Error::NonFiniteLoss { step, indices } => {
            assert_eq!(step, 1);
            assert_eq!(indices.len(), 4);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn empty_training_split_is_an_error() {
    let ds = dataset(3, 0, 9);
    let mut only_val = ds.clone();
    for s in &mut only_val.samples {
        s.split = Split::Val;
    }
    assert!(matches!(train(&config(1), &only_val), Err(Error::EmptySplit(_))));
}
