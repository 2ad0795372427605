// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use endp::data::{epoch_batches, load_cifar10, load_idx, subset_and_batch, write_idx, Dataset};
use endp::Error;

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = 0x0000_0803u32.to_be_bytes().to_vec();
    for x in [count, rows, cols] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0000_0801u32.to_be_bytes().to_vec();
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, bytes).unwrap();
    p
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("ENDP_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn two_image_idx_fixture_reads_exact_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let img = write(
        dir.path(),
        "imgs",
        &idx_images(2, 2, 2, &[0, 1, 2, 255, 128, 64, 32, 16]),
    );
    let lab = write(dir.path(), "labs", &idx_labels(&[7, 3]));
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.shape(), [1, 2, 2]);
    assert_eq!(ds.image(0), &[0.0, 1.0 / 255.0, 2.0 / 255.0, 1.0]);
    assert_eq!(ds.image(1), &[128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0, 16.0 / 255.0]);
    assert_eq!(ds.labels(), &[7, 3]);
    assert_eq!(ds.classes, 10);
}

#[test]
fn idx_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let good_lab = write(dir.path(), "labs", &idx_labels(&[1, 2]));
    let short = write(dir.path(), "short", &idx_images(2, 2, 2, &[0; 7]));
    assert!(matches!(load_idx(&short, &good_lab), Err(Error::TruncatedFile { .. })));
    let header_only = write(dir.path(), "hdr", &[0, 0, 8, 3, 0, 0]);
    assert!(matches!(
        load_idx(&header_only, &good_lab),
        Err(Error::TruncatedFile { .. })
    ));
    let mut bad = idx_images(2, 2, 2, &[0; 8]);
    bad[3] = 0x01;
    let bad = write(dir.path(), "bad", &bad);
    assert!(matches!(load_idx(&bad, &good_lab), Err(Error::BadMagic { .. })));
    let img = write(dir.path(), "imgs", &idx_images(2, 2, 2, &[0; 8]));
    let three = write(dir.path(), "three", &idx_labels(&[1, 2, 3]));
    assert!(matches!(
        load_idx(&img, &three),
        Err(Error::CountMismatch { images: 2, labels: 3 })
    ));
    assert!(matches!(
        load_idx(&dir.path().join("missing"), &good_lab),
        Err(Error::Io { .. })
    ));
}

#[test]
fn idx_round_trip_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<f64> = (0..3 * 16).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let ds = Dataset::new("rt", "train", [1, 4, 4], 10, pixels, vec![0, 9, 4]).unwrap();
    let (i, l) = (dir.path().join("i"), dir.path().join("l"));
    write_idx(&ds, &i, &l).unwrap();
    let back = load_idx(&i, &l).unwrap();
    assert_eq!(back.len(), 3);
    for k in 0..3 {
        assert_eq!(back.image(k), ds.image(k));
    }
    assert_eq!(back.labels(), ds.labels());
}

#[test]
fn cifar_record_and_wrong_size() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = vec![6u8];
    rec.extend((0..3072).map(|i| (i % 251) as u8));
    let one = write(dir.path(), "data_batch_1.bin", &rec);
    let ds = load_cifar10(std::slice::from_ref(&one)).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.shape(), [3, 32, 32]);
    assert_eq!(ds.label(0), 6);
    // channel-planar: pixel 1024 is the first green value
    assert_eq!(ds.image(0)[1024], (1024 % 251) as f64 / 255.0);
    let two = load_cifar10(&[one.clone(), one]).unwrap();
    assert_eq!(two.len(), 2);
    let bad = write(dir.path(), "bad.bin", &rec[..3000]);
    assert!(matches!(
        load_cifar10(&[bad]),
        Err(Error::SizeNotMultipleOfRecord {
            size: 3000,
            record: 3073,
            ..
        })
    ));
}

#[test]
fn dataset_rejects_invalid_contents() {
    assert!(Dataset::new("x", "train", [1, 1, 2], 2, vec![0.0, 1.5], vec![0]).is_err());
    assert!(Dataset::new("x", "train", [1, 1, 2], 2, vec![0.0, 0.5], vec![2]).is_err());
    assert!(Dataset::new("x", "train", [1, 1, 2], 2, vec![0.0, 0.5, 0.1], vec![0]).is_err());
}

#[test]
fn batching_is_deterministic_and_keeps_partial_batch() {
    let pixels = vec![0.5; 23];
    let labels: Vec<usize> = (0..23).map(|i| i % 2).collect();
    let ds = Dataset::new("toy", "train", [1, 1, 1], 2, pixels, labels).unwrap();
    let a = subset_and_batch(&ds, 23, 5, 3).unwrap();
    assert_eq!(a.subset.labels(), ds.labels());
    let e0 = a.epoch(0);
    assert_eq!(e0.len(), 5);
    assert_eq!(e0.last().unwrap().len(), 3);
    assert_eq!(e0, subset_and_batch(&ds, 23, 5, 3).unwrap().epoch(0));
    assert_ne!(e0, a.epoch(1));
    assert_eq!(epoch_batches(23, 5, 3, 0), e0);
    assert!(matches!(
        subset_and_batch(&ds, 24, 5, 3),
        Err(Error::SubsetTooLarge { .. })
    ));
}

#[test]
fn official_mnist_files() {
    let dir = mnist_dir();
    let test_images = dir.join("t10k-images-idx3-ubyte");
    if !test_images.exists() {
        eprintln!("MNIST not found under {}; official-file checks not run", dir.display());
        return;
    }
    let test = load_idx(&test_images, &dir.join("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(test.len(), 10_000);
    assert_eq!(test.shape(), [1, 28, 28]);
    assert_eq!(test.split, "test");
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )
    .unwrap();
    assert_eq!(train.len(), 60_000);
    let sub = subset_and_batch(&train, 1000, 32, 4).unwrap();
    assert_eq!(sub.subset.class_counts(), vec![100; 10]);
    assert_eq!(sub.subset, subset_and_batch(&train, 1000, 32, 4).unwrap().subset);
}
