//! Perturbations, the kernel distance and data handling.

use std::path::PathBuf;

use faer::Mat;
use proptest::prelude::*;
use rand::Rng;
use rnf_core::data::{load_mnist_idx, load_split, subsample, write_mnist_idx, Dataset};
use rnf_core::perturb::{average_relative_distance, elastic_deform};
use rnf_core::seed::{child_rng, derive_seed, rng_from_seed};
use rnf_core::tangent::{empirical_ntk, KernelMode};
use rnf_core::{ModelConfig, NetworkModel};

fn zero_bias_model(model_id: u8, seed: u64) -> NetworkModel {
    let mut cfg = ModelConfig::new(model_id).with_width(16);
    cfg.input_dim = 25;
    cfg.sigma.sigma_b = 0.0;
    cfg.sigma.sigma_s = Some(0.1);
    if model_id == 3 {
        cfg.sigma.sigma_r = Some(0.3);
    }
    NetworkModel::build(&cfg, seed).unwrap()
}

fn image(seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..25).map(|_| rng.gen::<f64>()).collect()
}

#[test]
fn kernel_is_two_homogeneous_without_biases() {
    for model_id in 1..=5u8 {
        let net = zero_bias_model(model_id, 3);
        let x = image(4);
        let (a, b) = (0.7, 2.5);
        let stacked = Mat::from_fn(3, 25, |i, j| x[j] * [1.0, a, b][i]);
        let k = empirical_ntk(&net, stacked.as_ref(), None, KernelMode::Scalar).unwrap().entries;
        let kxx = k[(0, 0)];
        assert!((k[(1, 2)] - a * b * kxx).abs() <= 1e-12 * kxx, "model {model_id}");
        assert!((k[(1, 1)] - a * a * kxx).abs() <= 1e-12 * kxx, "model {model_id}");
    }
}

#[test]
fn distance_to_a_doubled_input_is_one() {
    for model_id in 1..=5u8 {
        let net = zero_bias_model(model_id, 5);
        let x = image(6);
        let s = Mat::from_fn(1, 25, |_, j| 2.0 * x[j]);
        let d = average_relative_distance(&net, &x, s.as_ref()).unwrap();
        assert!((d.mean - 1.0).abs() < 1e-10, "model {model_id}: {}", d.mean);
    }
}

#[test]
fn distance_to_itself_is_zero() {
    let mut cfg = ModelConfig::new(4).with_width(16);
    cfg.input_dim = 25;
    cfg.sigma.sigma_s = Some(0.1);
    let net = NetworkModel::build(&cfg, 7).unwrap();
    let x = image(8);
    let s = Mat::from_fn(3, 25, |_, j| x[j]);
    let d = average_relative_distance(&net, &x, s.as_ref()).unwrap();
    assert_eq!(d.mean, 0.0);
}

#[test]
fn seed_derivation_matches_an_independent_hash() {
    // first eight bytes, little endian, of SHA-256(root_le || path), computed externally
    assert_eq!(derive_seed(0, "subsample"), 5760775074754104726);
    assert_eq!(derive_seed(7, "model/layer0"), 12947081893035167250);
    assert_eq!(derive_seed(12345, "ntk/split"), 12615887741272815412);
}

fn toy_dataset(n: usize, rows: usize, cols: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    Dataset {
        images: Mat::from_fn(n, rows * cols, |_, _| rng.gen_range(0u8..=255) as f64 / 255.0),
        labels: (0..n).map(|_| rng.gen_range(1u8..=10)).collect(),
        rows,
        cols,
        split: "all".into(),
        checksum: String::new(),
    }
}

#[test]
fn subsample_indices_are_pinned() {
    // ChaCha8 and the shuffle are fully specified, so these never change
    let ds = toy_dataset(20, 2, 2, 0);
    let s = subsample(&ds, 5, 3, 0).unwrap();
    assert_eq!(s.train_indices, GOLDEN_TRAIN);
    assert_eq!(s.val_indices, GOLDEN_VAL);
}

const GOLDEN_TRAIN: [usize; 5] = [18, 5, 3, 10, 7];
const GOLDEN_VAL: [usize; 3] = [14, 9, 13];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn idx_files_round_trip(n in 1usize..40, rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let ds = toy_dataset(n, rows, cols, seed);
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
        write_mnist_idx(&ds, &img, &lab).unwrap();
        let back = load_mnist_idx(&img, &lab).unwrap();
        prop_assert_eq!(&back.images, &ds.images);
        prop_assert_eq!(&back.labels, &ds.labels);
        prop_assert_eq!((back.rows, back.cols), (rows, cols));
    }

    #[test]
    fn subsample_splits_are_disjoint(n in 2usize..200, seed in any::<u64>()) {
        let ds = toy_dataset(n, 1, 1, seed);
        let n_train = n / 2;
        let s = subsample(&ds, n_train, n - n_train, seed).unwrap();
        let mut all: Vec<usize> = s.train_indices.iter().chain(&s.val_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("RNF_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

#[test]
fn elastic_deformation_roughly_conserves_mass_on_mnist() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; set RNF_DATA_DIR to run this check");
        return;
    };
    let ds = load_split(&dir, true).unwrap();
    for alpha in [1.0, 2.0, 3.0] {
        let mut rng = child_rng(0, &format!("elastic-mass/alpha{alpha}"));
        let mut worst = 0.0f64;
        for i in 0..1000 {
            let x: Vec<f64> = (0..ds.dim()).map(|j| ds.images[(i, j)]).collect();
            let y = elastic_deform(&x, ds.rows, ds.cols, alpha, 4.0, &mut rng).unwrap();
            let (m0, m1): (f64, f64) = (x.iter().sum(), y.iter().sum());
            worst = worst.max((m1 - m0).abs() / m0);
        }
        eprintln!("alpha {alpha}: max relative mass change {worst:.4}");
        assert!(worst < 0.1, "alpha {alpha}: {worst}");
    }
}
