use std::collections::HashSet;
use std::fs;

use maskguide::dataset::{load_manifest, Dataset, DatasetConfig, Manifest, Split};
use maskguide::synthetic::{generate_synthetic, partner_shape, render_all, render_sample, SyntheticSpec};
use maskguide::Error;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        canvas_size: 64,
        ..SyntheticSpec::new(4, 12, 4, 8, 1.0, seed)
    }
}

#[test]
fn generation_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec(7);
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    for name in ["manifest.jsonl", "distractors.jsonl"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
    let mut files: Vec<_> = fs::read_dir(a.path().join("images")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 24);
    for f in files {
        assert_eq!(
            fs::read(a.path().join("images").join(&f)).unwrap(),
            fs::read(b.path().join("images").join(&f)).unwrap()
        );
    }
}

#[test]
fn generated_manifest_loads_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(3);
    let written = generate_synthetic(&spec, dir.path()).unwrap();
    let path = dir.path().join("manifest.jsonl");
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.records, written.records);
    assert_eq!(loaded.to_text(), fs::read_to_string(&path).unwrap());
    assert_eq!(loaded.split_len(Split::Train), 12);
    assert_eq!(loaded.split_len(Split::Val), 4);
    assert_eq!(loaded.split_len(Split::Test), 8);

    // Decoded PNGs equal the in-memory rendering.
    let ds = Dataset::load(
        &loaded,
        DatasetConfig {
            image_size: 64,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
    let (_, rendered) = render_all(&spec, dir.path()).unwrap();
    for (s, r) in ds.samples.iter().zip(&rendered) {
        assert_eq!(s.sample.pixels, r.pixels);
    }
}

#[test]
fn no_image_shared_between_splits() {
    let (m, _) = render_all(&small_spec(1), std::path::Path::new(".")).unwrap();
    let mut seen = HashSet::new();
    for r in &m.records {
        assert!(seen.insert(r.image.clone()), "{} listed twice", r.image);
    }
}

/// Mutual information (nats) between two discrete variables from counts.
fn mutual_information(pairs: &[(usize, usize)], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![vec![0.0; k]; k];
    for &(a, b) in pairs {
        joint[a][b] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..k).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..k {
            if joint[a][b] > 0.0 {
                mi += joint[a][b] * (joint[a][b] / (pa[a] * pb[b])).ln();
            }
        }
    }
    mi
}

#[test]
fn distractor_correlation_by_counting() {
    let c = 4;
    let spec = SyntheticSpec::new(c, 400, 0, 2000, 1.0, 7);
    let train: Vec<(usize, usize)> = (0..spec.train)
        .map(|i| {
            let r = render_sample(&spec, Split::Train, i);
            (r.label, r.distractor)
        })
        .collect();
    // Perfect dependence over balanced labels: MI = ln C.
    let mi = mutual_information(&train, c);
    assert!((mi - (c as f64).ln()).abs() < 1e-9, "train MI {mi}");

    let test: Vec<(usize, usize)> = (0..spec.test)
        .map(|i| {
            let r = render_sample(&spec, Split::Test, i);
            (r.label, r.distractor)
        })
        .collect();
    let rate = test.iter().filter(|&&(l, d)| d == partner_shape(l, c)).count() as f64 / test.len() as f64;
    assert!((rate - 1.0 / c as f64).abs() <= 0.05, "test partner rate {rate}");
}

#[test]
fn partial_correlation_hits_target_rate() {
    let spec = SyntheticSpec::new(5, 3000, 0, 0, 0.6, 2);
    let hits = (0..spec.train)
        .filter(|&i| {
            let r = render_sample(&spec, Split::Train, i);
            r.distractor == partner_shape(r.label, 5)
        })
        .count() as f64
        / spec.train as f64;
    assert!((hits - 0.6).abs() < 0.03, "{hits}");
}

#[test]
fn missing_image_is_reported_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    fs::write(
        &path,
        "{\"labels\":[\"a\",\"b\"]}\n{\"image\":\"nope.png\",\"label\":\"a\",\"split\":\"test\"}\n",
    )
    .unwrap();
    match load_manifest(&path).unwrap_err() {
        Error::MissingImage { line, image, .. } => {
            assert_eq!(line, 2);
            assert_eq!(image, "nope.png");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn stripped_manifest_keeps_images_and_labels() {
    let (m, _) = render_all(&small_spec(4), std::path::Path::new(".")).unwrap();
    let bare: Manifest = m.without_annotations();
    assert!(bare.records.iter().all(|r| r.boxes.is_empty() && r.keypoints.is_none()));
    assert_eq!(
        bare.records.iter().map(|r| (&r.image, r.label, r.split)).collect::<Vec<_>>(),
        m.records.iter().map(|r| (&r.image, r.label, r.split)).collect::<Vec<_>>()
    );
}

#[test]
fn every_training_target_in_range_over_an_epoch() {
    let spec = small_spec(9);
    let (m, rendered) = render_all(&spec, std::path::Path::new(".")).unwrap();
    let ds = Dataset::from_images(
        &m,
        rendered.into_iter().map(|r| r.pixels).collect(),
        DatasetConfig {
            image_size: 64,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
    let mut n = 0;
    for batch in ds.batches(Split::Train, 5, 1, 0).unwrap() {
        for t in batch.targets {
            let t = t.unwrap();
            assert_eq!(t.dim(), (2, 2));
            assert!(t.grid().iter().all(|v| (0.0..=1.0).contains(v)));
            n += 1;
        }
    }
    assert_eq!(n, 12);
}
