use std::io::Write;
use std::path::{Path, PathBuf};

use flate2::write::GzEncoder;
use flate2::Compression;
use tkfac::config::ExperimentConfig;
use tkfac::data::{
    load_mnist_dir, load_mnist_idx, parse_idx_images, parse_idx_labels, synthetic_dataset, Split, SyntheticLabels,
    SyntheticSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use tkfac::error::Error;
use tkfac::experiment::{grid_configs, init_network, load_data};
use tkfac::net::Targets;
use tkfac::optim::OptimizerKind;

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn header(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_be_bytes()).collect()
}

fn gz(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

#[test]
fn full_size_header_is_read() {
    let mut b = header(&[IDX_IMAGES_MAGIC, 60000, 28, 28]);
    b.resize(16 + 60000 * 784, 7);
    let (n, h, w, px) = parse_idx_images(&b).unwrap();
    assert_eq!((n, h, w), (60000, 28, 28));
    assert_eq!(px.len(), 47_040_000);

    let mut l = header(&[IDX_LABELS_MAGIC, 60000]);
    l.resize(8 + 60000, 3);
    assert_eq!(parse_idx_labels(&l).unwrap().len(), 60000);
}

#[test]
fn wrong_magic_is_a_format_error() {
    let mut b = header(&[IDX_LABELS_MAGIC, 1, 1, 1]);
    b.push(0);
    assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
    assert!(matches!(parse_idx_labels(&header(&[IDX_IMAGES_MAGIC, 0])), Err(Error::Format(_))));
    assert!(matches!(parse_idx_images(&[0, 0]), Err(Error::Format(_))));
}

#[test]
fn gzipped_and_plain_files_agree() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = header(&[IDX_IMAGES_MAGIC, 3, 2, 2]);
    img.extend([0, 255, 51, 102, 1, 2, 3, 4, 10, 20, 30, 40]);
    let mut lab = header(&[IDX_LABELS_MAGIC, 3]);
    lab.extend([4, 0, 9]);
    let p = |f: &str| dir.path().join(f);
    std::fs::write(p("a"), &img).unwrap();
    std::fs::write(p("b"), &lab).unwrap();
    std::fs::write(p("a.gz"), gz(&img)).unwrap();
    std::fs::write(p("b.gz"), gz(&lab)).unwrap();
    let plain = load_mnist_idx(&p("a"), &p("b")).unwrap();
    assert_eq!(plain, load_mnist_idx(&p("a.gz"), &p("b.gz")).unwrap());
    assert_eq!(plain.labels, vec![4, 0, 9]);
    assert_eq!(plain.images.col(0), &[0.0, 1.0, 0.2, 0.4]);
    let small = plain.downsample().unwrap();
    assert_eq!((small.height, small.width), (1, 1));
    assert_eq!(small.images.col(2), &[25.0 / 255.0]);
}

#[test]
fn label_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut img = header(&[IDX_IMAGES_MAGIC, 2, 1, 1]);
    img.extend([0, 0]);
    let mut lab = header(&[IDX_LABELS_MAGIC, 1]);
    lab.push(0);
    std::fs::write(dir.path().join("i"), img).unwrap();
    std::fs::write(dir.path().join("l"), lab).unwrap();
    assert!(matches!(load_mnist_idx(&dir.path().join("i"), &dir.path().join("l")), Err(Error::Format(_))));
    assert!(load_mnist_dir(dir.path(), Split::Train).is_err());
}

#[test]
fn bundled_digits_load() {
    let train = load_mnist_dir(&mnist_dir(), Split::Train).unwrap();
    let test = load_mnist_dir(&mnist_dir(), Split::Test).unwrap();
    assert_eq!((train.len(), train.height, train.width), (8000, 28, 28));
    assert_eq!(test.len(), 2000);
    assert!(train.labels.iter().all(|&l| l < 10));
    for d in 0..10 {
        assert!(train.labels.contains(&d));
    }
    let (lo, hi) = train.images.as_slice().iter().fold((1.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));

    let small = train.downsample().unwrap();
    assert_eq!(small.images.shape(), (196, 8000));
    // pooling keeps each image's mean intensity
    for i in [0, 4321, 7999] {
        let mean = |c: &[f64]| c.iter().sum::<f64>() / c.len() as f64;
        assert!((mean(train.images.col(i)) - mean(small.images.col(i))).abs() < 1e-12);
    }
}

#[test]
fn downsampled_classifier_input_width() {
    let cfg = ExperimentConfig { data_dir: Some(mnist_dir().to_string_lossy().into()), ..Default::default() };
    let data = load_data(&cfg).unwrap();
    let net = init_network(&cfg, &data).unwrap();
    assert_eq!(data.train.features(), 196);
    let widths: Vec<_> = (0..net.num_parametric()).map(|l| net.weights(l).shape()).collect();
    assert_eq!(widths, vec![(20, 196), (20, 20), (20, 20), (20, 20), (10, 20)]);
}

#[test]
fn subset_draws_from_training_file() {
    let cfg = ExperimentConfig {
        task: tkfac::config::Task::Autoencoder,
        data_dir: Some(mnist_dir().to_string_lossy().into()),
        train_subset: 6000,
        subset_seed: 7,
        ..ExperimentConfig::autoencoder()
    };
    let data = load_data(&cfg).unwrap();
    assert_eq!(data.train.len(), 6000);
    assert_eq!(data.train.features(), 784);
    assert!(matches!(&data.train.targets, Targets::Dense(t) if *t == data.train.inputs));
}

#[test]
fn synthetic_random_labels_are_balanced() {
    let spec = SyntheticSpec { dim: 4, classes: 10, samples: 1000, labels: SyntheticLabels::Random };
    let d = synthetic_dataset(&spec, 42);
    let Targets::Classes(labels) = &d.targets else { panic!("class targets expected") };
    let mut hist = [0usize; 10];
    for &l in labels {
        hist[l] += 1;
    }
    // 100 expected per class, allow 5% of the sample count
    for (c, &h) in hist.iter().enumerate() {
        assert!(h.abs_diff(100) <= 50, "class {c}: {h}");
    }
    assert_eq!(d, synthetic_dataset(&spec, 42));
}

#[test]
fn config_round_trip_and_grid() {
    let cfg = ExperimentConfig { optimizer: OptimizerKind::TkfacNew, grid_lr: vec![1e-3, 1e-2], ..Default::default() };
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    let grid = grid_configs(&cfg);
    // learning rates times the default trace clamps
    assert_eq!(grid.len(), 2 * tkfac::experiment::NU_GRID.len());
    assert!(grid.iter().all(|c| c.lambda == cfg.lambda));
    let dirs: std::collections::HashSet<_> = grid.iter().map(|c| &c.output_dir).collect();
    assert_eq!(dirs.len(), grid.len());
    assert!(matches!(ExperimentConfig::from_toml("no_such_field = 1"), Err(Error::Config(_))));
}
