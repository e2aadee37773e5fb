use std::path::PathBuf;

use dpsgd_lab::data::{
    data_dir_from_env, load_cifar10, load_dataset, load_dataset_head, load_idx, parse_idx, poisson_batches,
    shuffle_batches, write_cifar10, write_idx_images, write_idx_labels, DatasetName, Split, IDX_IMAGES_MAGIC,
};
use dpsgd_lab::{Error, Rng};
use proptest::prelude::*;

/// The data root, or `None` (test skipped) when the official files are absent.
fn data_root() -> Option<PathBuf> {
    let dir = data_dir_from_env();
    if dir.join("mnist").is_dir() {
        Some(dir)
    } else {
        eprintln!("skipping: no datasets under {}", dir.display());
        None
    }
}

#[test]
fn official_mnist() {
    let Some(dir) = data_root() else { return };
    let train = load_dataset(DatasetName::Mnist, &dir, Split::Train).unwrap();
    assert_eq!(train.images.shape(), &[60000, 1, 28, 28]);
    let test = load_dataset(DatasetName::Mnist, &dir, Split::Test).unwrap();
    assert_eq!(test.len(), 10000);
    for count in train.label_histogram() {
        assert!((5400..=7000).contains(&count), "{count}");
    }
    assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));

    let raw = std::fs::read(dir.join("mnist/train-images-idx3-ubyte")).unwrap();
    assert_eq!(u32::from_be_bytes(raw[..4].try_into().unwrap()), 2051);
    let (dims, _) = parse_idx(&raw, IDX_IMAGES_MAGIC, "train").unwrap();
    assert_eq!(dims, vec![60000, 28, 28]);
}

#[test]
fn official_fashion_mnist() {
    let Some(dir) = data_root() else { return };
    let train = load_dataset(DatasetName::FashionMnist, &dir, Split::Train).unwrap();
    assert_eq!(train.images.shape(), &[60000, 1, 28, 28]);
    assert_eq!(load_dataset(DatasetName::FashionMnist, &dir, Split::Test).unwrap().len(), 10000);
}

#[test]
fn official_cifar10() {
    let Some(dir) = data_root() else { return };
    let test = load_dataset(DatasetName::Cifar10, &dir, Split::Test).unwrap();
    assert_eq!(test.images.shape(), &[10000, 3, 32, 32]);
    let train = load_dataset(DatasetName::Cifar10, &dir, Split::Train).unwrap();
    assert_eq!(train.images.shape(), &[50000, 3, 32, 32]);
    drop(train);
    let head = load_dataset_head(DatasetName::Cifar10, &dir, Split::Train, 500).unwrap();
    assert_eq!(head.len(), 500);
    assert_eq!(head.images.row_len(), 3072);
}

#[test]
fn synthetic_cifar_record() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("one.bin");
    write_cifar10(&path, &[7], &[0; 3072]).unwrap();
    let ds = load_cifar10(std::slice::from_ref(&path)).unwrap();
    assert_eq!(ds.labels, vec![7]);
    assert!(ds.images.data().iter().all(|&v| v == 0.0));

    std::fs::write(&path, [0u8; 3074]).unwrap();
    assert!(matches!(load_cifar10(&[path]), Err(Error::Format { offset: 3073, .. })));
}

#[test]
fn truncated_idx_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    let lbl = tmp.path().join("lbl");
    write_idx_images(&img, 3, 2, 2, &[9; 12]).unwrap();
    write_idx_labels(&lbl, &[1, 2, 3]).unwrap();
    let bytes = std::fs::read(&img).unwrap();
    std::fs::write(&img, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_idx(&img, &lbl, DatasetName::Mnist), Err(Error::Format { .. })));

    write_idx_images(&img, 2, 2, 2, &[9; 8]).unwrap();
    let err = load_idx(&img, &lbl, DatasetName::Mnist).unwrap_err();
    assert!(err.to_string().contains("3 labels for 2 images"), "{err}");
}

#[test]
fn gzip_is_transparent() {
    use std::io::Write;
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("img");
    let lbl = tmp.path().join("lbl");
    write_idx_images(&img, 2, 1, 3, &[0, 51, 102, 153, 204, 255]).unwrap();
    write_idx_labels(&lbl, &[4, 5]).unwrap();
    let plain = load_idx(&img, &lbl, DatasetName::Mnist).unwrap();
    let gz = tmp.path().join("img.gz");
    let mut enc = flate2::write::GzEncoder::new(std::fs::File::create(&gz).unwrap(), flate2::Compression::default());
    enc.write_all(&std::fs::read(&img).unwrap()).unwrap();
    enc.finish().unwrap();
    assert_eq!(load_idx(&gz, &lbl, DatasetName::Mnist).unwrap(), plain);
    assert_eq!(plain.images.data()[1], 0.2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn idx_round_trip(n in 1usize..6, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..n * h * w).map(|_| rng.below(256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
        let tmp = tempfile::tempdir().unwrap();
        let (img, lbl) = (tmp.path().join("i"), tmp.path().join("l"));
        write_idx_images(&img, n, h, w, &pixels).unwrap();
        write_idx_labels(&lbl, &labels).unwrap();
        let ds = load_idx(&img, &lbl, DatasetName::Mnist).unwrap();
        let (img2, lbl2) = (tmp.path().join("i2"), tmp.path().join("l2"));
        write_idx_images(&img2, n, h, w, &ds.pixel_bytes()).unwrap();
        write_idx_labels(&lbl2, &ds.labels).unwrap();
        prop_assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&img2).unwrap());
        prop_assert_eq!(std::fs::read(&lbl).unwrap(), std::fs::read(&lbl2).unwrap());
    }

    #[test]
    fn cifar_round_trip(n in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..n * 3072).map(|_| rng.below(256) as u8).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        write_cifar10(&a, &labels, &pixels).unwrap();
        let ds = load_cifar10(std::slice::from_ref(&a)).unwrap();
        write_cifar10(&b, &ds.labels, &ds.pixel_bytes()).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn poisson_mean_batch_size() {
    let (n, q) = (10_000, 0.01);
    let mut total = 0usize;
    let mut batches = 0usize;
    let mut rng = Rng::new(77);
    for _ in 0..1000 {
        for b in poisson_batches(n, q, rng.split()).unwrap() {
            total += b.len();
            batches += 1;
        }
    }
    assert_eq!(batches, 100_000);
    let mean = total as f64 / batches as f64;
    assert!((mean - 100.0).abs() < 2.0, "{mean}");
}

#[test]
fn poisson_is_deterministic_and_pairwise_independent() {
    let a: Vec<_> = poisson_batches(500, 0.05, Rng::new(3)).unwrap().collect();
    let b: Vec<_> = poisson_batches(500, 0.05, Rng::new(3)).unwrap().collect();
    assert_eq!(a, b);

    let (n, q, rounds) = (40usize, 0.1, 50_000usize);
    let mut both = 0usize;
    let mut rng = Rng::new(9);
    let mut seen = 0usize;
    for _ in 0..rounds / 10 {
        for batch in poisson_batches(n, q, rng.split()).unwrap() {
            seen += 1;
            if batch.contains(&3) && batch.contains(&17) {
                both += 1;
            }
        }
    }
    let p = both as f64 / seen as f64;
    let se = (q * q * (1.0 - q * q) / seen as f64).sqrt();
    assert!((p - q * q).abs() < 3.0 * se, "{p} vs {}", q * q);
}

#[test]
fn shuffle_first_position_is_uniform() {
    let (n, b, epochs) = (10, 4, 1000);
    let mut counts = vec![0usize; n];
    let mut rng = Rng::new(21);
    for _ in 0..epochs {
        let first = shuffle_batches(n, b, rng.split()).unwrap().next().unwrap();
        counts[first[0]] += 1;
    }
    // frequency 1/10 each, within 5 points
    assert!(counts.iter().all(|&c| (50..=150).contains(&c)), "{counts:?}");
}
