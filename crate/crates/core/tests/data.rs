use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use gethr_core::data::{
    generate, load_dataset, save_dataset, xor_motif, DataError, Dataset, DatasetManifest, GenConfig, MANIFEST_FILE,
};
use gethr_core::fusionnet::{MultimodalSequence, Topology};
use gethr_core::numerics::Matrix;
use gethr_core::trainer::{train_model, TrainConfig};

fn saved(cfg: &GenConfig) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(cfg).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    (dir, ds)
}

fn read_manifest(dir: &Path) -> DatasetManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap()
}

fn write_manifest(dir: &Path, manifest: &DatasetManifest) {
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(manifest).unwrap()).unwrap();
}

fn first_train_file(dir: &Path) -> std::path::PathBuf {
    let manifest = read_manifest(dir);
    dir.join(&manifest.splits.train[0].files["modA"])
}

#[test]
fn save_load_round_trip() {
    let (dir, ds) = saved(&GenConfig::distractor(3, 6, 3, 2, 5, 4, 0.7, 0.5, 4));
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.schema, ds.schema);
    for (a, b) in ds
        .train
        .iter()
        .chain(&ds.val)
        .chain(&ds.test)
        .zip(back.train.iter().chain(&back.val).chain(&back.test))
    {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label, b.label);
        for (name, m) in &a.features {
            let n = &b.features[name];
            assert_eq!(m.shape(), n.shape());
            for (x, y) in m.as_slice().iter().zip(n.as_slice()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn length_mismatch_names_the_sequence() {
    let (dir, _) = saved(&GenConfig::xor(3, 1, 1, 4, 3, 0.1, 1));
    let path = first_train_file(dir.path());
    let text = fs::read_to_string(&path).unwrap();
    let short: Vec<&str> = text.lines().take(3).collect();
    fs::write(&path, short.join("\n") + "\n").unwrap();
    match load_dataset(dir.path()) {
        Err(e @ DataError::Length { .. }) => assert!(e.to_string().contains("train-00000"), "{e}"),
        other => panic!("expected a length error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_its_own_diagnostic() {
    let (dir, _) = saved(&GenConfig::xor(3, 1, 1, 4, 3, 0.1, 1));
    fs::remove_file(first_train_file(dir.path())).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(DataError::MissingFile { id, .. }) if id == "train-00000"));
}

#[test]
fn unknown_label_is_its_own_diagnostic() {
    let (dir, _) = saved(&GenConfig::xor(3, 1, 1, 4, 3, 0.1, 1));
    let mut manifest = read_manifest(dir.path());
    manifest.splits.val[0].label = "parity7".into();
    write_manifest(dir.path(), &manifest);
    assert!(matches!(load_dataset(dir.path()), Err(DataError::UnknownLabel { label, .. }) if label == "parity7"));
}

#[test]
fn dimension_mismatch_is_its_own_diagnostic() {
    let (dir, _) = saved(&GenConfig::xor(3, 1, 1, 4, 3, 0.1, 1));
    let path = first_train_file(dir.path());
    let text = fs::read_to_string(&path).unwrap();
    let widened: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 2 { format!("{l},0.5") } else { l.to_string() })
        .collect();
    fs::write(&path, widened.join("\n") + "\n").unwrap();
    match load_dataset(dir.path()) {
        Err(DataError::Dimension {
            line,
            expected,
            actual,
            modality,
            ..
        }) => {
            assert_eq!((line, expected, actual, modality.as_str()), (3, 3, 4, "modA"));
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
}

#[test]
fn empty_test_split_is_accepted() {
    let (dir, _) = saved(&GenConfig::xor(4, 2, 0, 4, 2, 0.1, 3));
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.test.is_empty());
    assert_eq!(ds.len(), 6);
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn fixed_seed_gives_byte_identical_directories() {
    let cfg = GenConfig::xor(8, 4, 4, 6, 3, 0.25, 99);
    let (a, _) = saved(&cfg);
    let (b, _) = saved(&cfg);
    assert_eq!(tree(a.path()), tree(b.path()));
    let (c, _) = saved(&GenConfig { seed: 100, ..cfg });
    assert_ne!(tree(a.path()), tree(c.path()));
}

#[test]
fn splits_are_disjoint_by_id() {
    let ds = generate(&GenConfig::distractor(4, 30, 10, 10, 4, 4, 0.25, 0.5, 2)).unwrap();
    let ids: Vec<&str> = ds
        .train
        .iter()
        .chain(&ds.val)
        .chain(&ds.test)
        .map(|s| s.id.as_str())
        .collect();
    assert_eq!(ids.iter().collect::<BTreeSet<_>>().len(), ids.len());
}

fn sq_dist(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).powi(2))
        .sum()
}

fn nearest_bit(m: &Matrix, t: usize, d: usize) -> bool {
    sq_dist(m, &xor_motif(true, t, d)) < sq_dist(m, &xor_motif(false, t, d))
}

#[test]
fn nearest_archetype_oracle() {
    let (t, d) = (6, 3);
    let ds = generate(&GenConfig::xor(64, 0, 0, t, d, 0.0, 8)).unwrap();
    // Joint view: the nearest (A, B) archetype pair always determines the label.
    let joint_hits = ds
        .train
        .iter()
        .filter(|s: &&MultimodalSequence| {
            let a = nearest_bit(&s.features["modA"], t, d);
            let b = nearest_bit(&s.features["modB"], t, d);
            usize::from(a ^ b) == s.label
        })
        .count();
    assert_eq!(joint_hits, 64);

    // Single view, enumerated over the four equally likely archetype pairs:
    // every rule mapping one modality's bit to a label is right half the time.
    let pairs = [(false, false), (false, true), (true, false), (true, true)];
    for rule in 0..4u8 {
        let predict = |bit: bool| usize::from(rule >> usize::from(bit) & 1 == 1);
        for view in [0, 1] {
            let hits = pairs
                .iter()
                .filter(|&&(a, b)| predict(if view == 0 { a } else { b }) == usize::from(a ^ b))
                .count();
            assert_eq!(hits as f64 / 4.0, 0.5);
        }
    }
}

fn separable() -> Dataset {
    generate(&GenConfig::distractor(2, 12, 4, 0, 5, 3, 0.1, 0.0, 6)).unwrap()
}

#[test]
fn full_batch_loss_does_not_increase() {
    let ds = separable();
    let config = TrainConfig {
        base_lr: 1e-4,
        dropout: 0.0,
        batch_size: ds.train.len(),
        epochs: 5,
        default_hidden: 6,
        fusion_size: 5,
        combined_hidden: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    for topology in [Topology::Hybrid, Topology::Temporal("modA".into())] {
        let out = train_model(&ds.train, &ds.val, &ds.schema, &topology, &config).unwrap();
        let losses: Vec<f64> = out.reports.iter().map(|r| r.mean_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{topology}: {losses:?}");
    }
}

#[test]
fn epoch_reports_are_deterministic() {
    let ds = separable();
    let config = TrainConfig {
        epochs: 3,
        default_hidden: 4,
        fusion_size: 3,
        combined_hidden: 3,
        base_lr: 0.01,
        seed: 12,
        ..TrainConfig::default()
    };
    let run = || train_model(&ds.train, &ds.val, &ds.schema, &Topology::Hybrid, &config).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.best_epoch, b.best_epoch);
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let ds = separable();
    let config = TrainConfig {
        epochs: 0,
        default_hidden: 4,
        fusion_size: 3,
        combined_hidden: 3,
        seed: 2,
        ..TrainConfig::default()
    };
    let a = train_model(&ds.train, &ds.val, &ds.schema, &Topology::Early, &config).unwrap();
    let b = train_model(&ds.train, &ds.val, &ds.schema, &Topology::Early, &config).unwrap();
    assert!(a.reports.is_empty());
    assert_eq!(a.best_epoch, None);
    assert_eq!(
        a.model.predict(&ds.val[0]).unwrap(),
        b.model.predict(&ds.val[0]).unwrap()
    );
}

#[test]
fn single_modality_frame_head_stays_near_chance_on_xor() {
    let ds = generate(&GenConfig::xor(64, 64, 0, 8, 4, 0.25, 21)).unwrap();
    let config = TrainConfig {
        base_lr: 0.05,
        epochs: 10,
        seed: 21,
        ..TrainConfig::default()
    };
    let out = train_model(&ds.train, &ds.val, &ds.schema, &Topology::NonTemporal("modA".into()), &config).unwrap();
    let scores = gethr_core::trainer::predict_all(&out.model, &ds.val).unwrap();
    let labels = gethr_core::trainer::labels_of(&ds.val);
    let acc = gethr_core::trainer::score_metric(&scores, &labels, gethr_core::trainer::ValMetric::Accuracy).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "{acc}");
}
