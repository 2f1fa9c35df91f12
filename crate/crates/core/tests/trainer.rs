mod common;

use common::cosine;
use protodetect::fixture::{generate_fixture, FixtureSpec};
use protodetect::prototypes::{
    build_background_prototypes, build_object_prototypes, sample_background_crops, ObjectPrototypeOptions,
};
use protodetect::trainer::{finetune, Augmentations, BackgroundTargetMode, TrainConfig};
use protodetect::{Dataset, PrototypeSet};

fn setup(noise: f64, k: usize) -> (tempfile::TempDir, Dataset, PrototypeSet) {
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        noise,
        shots_per_class: 4,
        test_images: 2,
        ..FixtureSpec::default()
    };
    let out = generate_fixture(&spec, dir.path()).unwrap();
    let ds = Dataset::load(&out.train_manifest).unwrap();
    let mut protos = build_object_prototypes(&ds, ObjectPrototypeOptions::default()).unwrap();
    if k > 0 {
        let crops = sample_background_crops(&ds, 5, 1).unwrap().crops;
        protos = protos
            .with_background_rows(&build_background_prototypes(&crops, k, 1).unwrap().rows)
            .unwrap();
    }
    (dir, ds, protos)
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_background_rows_do_not_move() {
    let (_d, ds, init) = setup(1.0, 3);
    let cfg = TrainConfig {
        negatives_per_image: 2,
        freeze_background: true,
        ..config(5)
    };
    let out = finetune(&ds, &init, &cfg).unwrap().prototypes;
    let j = init.class_table().num_objects();
    for r in j..init.num_rows() {
        assert_eq!(out.row(r), init.row(r), "background row {r}");
    }
    assert!((0..j).any(|r| out.row(r) != init.row(r)));
}

#[test]
fn negatives_without_background_rows_fail() {
    let (_d, ds, init) = setup(0.3, 0);
    let cfg = TrainConfig {
        negatives_per_image: 2,
        ..config(1)
    };
    assert!(finetune(&ds, &init, &cfg).is_err());
}

#[test]
fn zero_epochs_are_rejected() {
    let (_d, ds, init) = setup(0.3, 0);
    assert!(finetune(&ds, &init, &config(0)).is_err());
}

#[test]
fn separable_data_is_fitted() {
    let (_d, ds, init) = setup(0.5, 2);
    let cfg = TrainConfig {
        negatives_per_image: 2,
        ..config(20)
    };
    let log = finetune(&ds, &init, &cfg).unwrap().log;
    assert_eq!(log.len(), 20);
    assert!(log.last().unwrap().acc >= 0.95, "{:?}", log.last());
}

#[test]
fn frozen_target_mode_trains() {
    let (_d, ds, init) = setup(0.5, 2);
    let cfg = TrainConfig {
        negatives_per_image: 2,
        background_target_mode: BackgroundTargetMode::Frozen,
        ..config(10)
    };
    let log = finetune(&ds, &init, &cfg).unwrap().log;
    assert!(log.last().unwrap().loss < log[0].loss);
}

#[test]
fn training_is_deterministic() {
    let (_d, ds, init) = setup(1.0, 2);
    let cfg = TrainConfig {
        negatives_per_image: 1,
        ..config(4)
    };
    let a = finetune(&ds, &init, &cfg).unwrap();
    let b = finetune(&ds, &init, &cfg).unwrap();
    assert_eq!(a.prototypes.vectors(), b.prototypes.vectors());
    assert_eq!(a.log, b.log);
    let other = finetune(&ds, &init, &TrainConfig { seed: 8, ..cfg }).unwrap();
    assert_ne!(a.prototypes.vectors(), other.prototypes.vectors());
}

#[test]
fn class_rows_move_apart() {
    let spec_sep = 50.0;
    let dir = tempfile::tempdir().unwrap();
    let spec = FixtureSpec {
        separation_deg: spec_sep,
        noise: 0.5,
        shots_per_class: 4,
        test_images: 1,
        ..FixtureSpec::default()
    };
    let out = generate_fixture(&spec, dir.path()).unwrap();
    let ds = Dataset::load(&out.train_manifest).unwrap();
    let init = build_object_prototypes(&ds, ObjectPrototypeOptions::default()).unwrap();
    let cfg = TrainConfig {
        augmentations: Augmentations::NONE,
        ..config(30)
    };
    let tuned = finetune(&ds, &init, &cfg).unwrap().prototypes;
    let mean_cos = |p: &PrototypeSet| {
        let rows = p.object_rows_f64();
        let mut s = 0.0;
        let mut n = 0.0;
        for a in 0..rows.len() {
            for b in a + 1..rows.len() {
                s += cosine(&rows[a], &rows[b]);
                n += 1.0;
            }
        }
        s / n
    };
    assert!(
        mean_cos(&tuned) < mean_cos(&init),
        "{} vs {}",
        mean_cos(&tuned),
        mean_cos(&init)
    );
}

#[test]
fn output_rows_are_unit_norm() {
    let (_d, ds, init) = setup(1.0, 2);
    let out = finetune(&ds, &init, &config(3)).unwrap().prototypes;
    for r in 0..out.num_rows() {
        let n: f64 = out.row(r).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
    }
}
