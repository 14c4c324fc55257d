mod common;

use distree_core::data::{
    load_cifar10, parse_cifar10, Normalization, Split, RECORD_BYTES, TEST_FILE, TRAIN_FILES,
};
use distree_core::Error;

#[test]
fn loads_test_split_from_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join(TEST_FILE),
        common::synthetic_cifar_bytes(25, 1),
    )
    .unwrap();
    let images = load_cifar10(dir.path(), Split::Test, &Normalization::default()).unwrap();
    assert_eq!(images.len(), 25);
    assert_eq!(
        images.iter().map(|i| i.label).collect::<Vec<_>>(),
        (0..25).map(|i| i % 10).collect::<Vec<_>>()
    );
    assert_eq!(images[0].pixels.shape(), [3, 32, 32]);
}

#[test]
fn loads_train_split_in_file_order() {
    let dir = tempfile::tempdir().unwrap();
    for (i, f) in TRAIN_FILES.iter().enumerate() {
        std::fs::write(
            dir.path().join(f),
            common::synthetic_cifar_bytes(3, i as u64),
        )
        .unwrap();
    }
    let images = load_cifar10(dir.path(), Split::Train, &Normalization::default()).unwrap();
    assert_eq!(images.len(), 15);
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        load_cifar10(dir.path(), Split::Test, &Normalization::default()),
        Err(Error::Io(_))
    ));
}

#[test]
fn pixel_normalization_matches_formula() {
    let bytes = common::synthetic_cifar_bytes(2, 4);
    let norm = Normalization::default();
    let images = parse_cifar10(&bytes, &norm).unwrap();
    for (r, img) in images.iter().enumerate() {
        for (i, &v) in img.pixels.data().iter().enumerate() {
            let c = i / 1024;
            let raw = f64::from(bytes[r * RECORD_BYTES + 1 + i]);
            let expected = (raw / 255.0 - f64::from(norm.mean[c])) / f64::from(norm.std[c]);
            assert!((f64::from(v) - expected).abs() < 1e-5);
        }
    }
}
