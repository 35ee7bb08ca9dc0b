use std::fs;

use proptest::prelude::*;
use safe_core::Error;
use safe_models::data::{load_mnist_idx, write_idx_images, write_idx_labels};
use safe_models::{corrupt_labels, synth_blobs, Dataset};

fn fixture_pixels(n: usize) -> Vec<u8> {
    (0..n * 784).map(|i| (i * 37 % 256) as u8).collect()
}

#[test]
fn ten_image_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    let pixels = fixture_pixels(10);
    write_idx_images(&img, 28, 28, &pixels).unwrap();
    write_idx_labels(&lab, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
    let ds = load_mnist_idx(&img, &lab, "train").unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(ds.features(), 784);
    assert_eq!(ds.classes, 10);
    assert_eq!(ds.labels[7], 7);
    assert!(ds.inputs.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(ds.inputs[[0, 1]], 37.0 / 255.0);
}

#[test]
fn gzip_fixture_loads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let pixels = fixture_pixels(3);
    write_idx_images(&dir.path().join("i"), 28, 28, &pixels).unwrap();
    write_idx_labels(&dir.path().join("l"), &[1, 2, 3]).unwrap();
    write_idx_images(&dir.path().join("i.gz"), 28, 28, &pixels).unwrap();
    write_idx_labels(&dir.path().join("l.gz"), &[1, 2, 3]).unwrap();
    let a = load_mnist_idx(&dir.path().join("i"), &dir.path().join("l"), "x").unwrap();
    let b = load_mnist_idx(&dir.path().join("i.gz"), &dir.path().join("l.gz"), "x").unwrap();
    assert_eq!(a, b);
}

fn format_field(e: Error) -> String {
    match e {
        Error::Format { field, .. } => field,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn wrong_magic_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx_images(&img, 28, 28, &fixture_pixels(2)).unwrap();
    write_idx_labels(&lab, &[0, 1]).unwrap();
    let mut bytes = fs::read(&img).unwrap();
    bytes[3] = 0x01;
    fs::write(&img, &bytes).unwrap();
    assert_eq!(format_field(load_mnist_idx(&img, &lab, "t").unwrap_err()), "images.magic");
    // labels file passed where images expected
    assert_eq!(format_field(load_mnist_idx(&lab, &lab, "t").unwrap_err()), "images.magic");
}

#[test]
fn short_labels_file_is_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx_images(&img, 28, 28, &fixture_pixels(10)).unwrap();
    write_idx_labels(&lab, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    assert_eq!(format_field(load_mnist_idx(&img, &lab, "t").unwrap_err()), "count");
}

#[test]
fn truncated_payload_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx_images(&img, 28, 28, &fixture_pixels(4)).unwrap();
    write_idx_labels(&lab, &[0, 1, 2, 3]).unwrap();
    let bytes = fs::read(&img).unwrap();
    fs::write(&img, &bytes[..bytes.len() - 100]).unwrap();
    assert_eq!(format_field(load_mnist_idx(&img, &lab, "t").unwrap_err()), "images.payload");
    let lb = fs::read(&lab).unwrap();
    write_idx_images(&img, 28, 28, &fixture_pixels(4)).unwrap();
    fs::write(&lab, &lb[..lb.len() - 1]).unwrap();
    assert_eq!(format_field(load_mnist_idx(&img, &lab, "t").unwrap_err()), "labels.payload");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn idx_writer_round_trips_byte_for_byte(n in 1usize..6, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..n * rows * cols).map(|i| (seed.wrapping_mul(i as u64 + 1) >> 7) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx_images(&img, rows, cols, &pixels).unwrap();
        write_idx_labels(&lab, &labels).unwrap();
        let ds = load_mnist_idx(&img, &lab, "t").unwrap();
        let back: Vec<u8> = ds.inputs.iter().map(|v| (v * 255.0).round() as u8).collect();
        let (img2, lab2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx_images(&img2, rows, cols, &back).unwrap();
        let lbl: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
        write_idx_labels(&lab2, &lbl).unwrap();
        prop_assert_eq!(fs::read(&img).unwrap(), fs::read(&img2).unwrap());
        prop_assert_eq!(fs::read(&lab).unwrap(), fs::read(&lab2).unwrap());
    }

    #[test]
    fn corruption_preserves_features(ratio in 0.0f64..=1.0, classes in 2usize..6, seed in any::<u64>()) {
        let ds = synth_blobs(120, 5, classes, 1.0, seed).unwrap();
        let c = corrupt_labels(&ds, ratio, seed ^ 1).unwrap();
        prop_assert_eq!(&c.inputs, &ds.inputs);
        let rec = c.corruption.clone().unwrap();
        let differ = ds.labels.iter().zip(&c.labels).filter(|(a, b)| a != b).count();
        prop_assert_eq!(differ, (ratio * 120.0).round() as usize);
        prop_assert_eq!(rec.indices.len(), differ);
        for (&i, &o) in rec.indices.iter().zip(&rec.original) {
            prop_assert_eq!(ds.labels[i], o);
            prop_assert!(c.labels[i] < classes);
        }
    }
}

#[test]
fn corruption_edge_cases() {
    let ds = synth_blobs(1000, 3, 10, 1.0, 0).unwrap();
    let none = corrupt_labels(&ds, 0.0, 1).unwrap();
    assert_eq!(none.labels, ds.labels);
    assert!(none.corruption.unwrap().indices.is_empty());
    let q = corrupt_labels(&ds, 0.25, 1).unwrap();
    assert_eq!(ds.labels.iter().zip(&q.labels).filter(|(a, b)| a != b).count(), 250);
    let two = synth_blobs(200, 3, 2, 1.0, 2).unwrap();
    let flipped = corrupt_labels(&two, 1.0, 3).unwrap();
    assert!(two.labels.iter().zip(&flipped.labels).all(|(a, b)| a + b == 1));
    assert!(corrupt_labels(&ds, 1.5, 0).is_err());
}

#[test]
fn blobs_are_deterministic_and_single_class_is_zero() {
    assert_eq!(synth_blobs(50, 4, 3, 2.0, 9).unwrap(), synth_blobs(50, 4, 3, 2.0, 9).unwrap());
    assert_ne!(synth_blobs(50, 4, 3, 2.0, 9).unwrap(), synth_blobs(50, 4, 3, 2.0, 10).unwrap());
    assert!(synth_blobs(50, 4, 1, 2.0, 9).unwrap().labels.iter().all(|&l| l == 0));
}

#[test]
fn dataset_cache_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corrupt_labels(&synth_blobs(30, 4, 3, 1.0, 1).unwrap(), 0.5, 2).unwrap();
    let p = dir.path().join("cache.safef64");
    ds.save_cache(&p).unwrap();
    assert_eq!(Dataset::load_cache(&p).unwrap(), ds);
}

#[test]
fn bundled_mnist_subset_loads() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let (train, test) = safe_models::load_mnist_dir(&dir).unwrap();
    assert_eq!(train.features(), 784);
    assert_eq!(test.features(), 784);
    assert!(train.len() >= 8000);
    assert!(test.len() >= 2000);
    assert_eq!(train.classes, 10);
    let std = train.standardized_by(&train);
    let m = std.inputs.mean_axis(ndarray::Axis(0)).unwrap();
    assert!(m.iter().all(|v| v.abs() < 1e-9));
}
