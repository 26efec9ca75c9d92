//! Datasets: IDX (MNIST) files and seeded synthetic data.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::Targets;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs as columns plus matching targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        if inputs.cols() != targets.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", inputs.cols(), targets.len())));
        }
        Ok(Self { inputs, targets })
    }

    /// Reconstruction dataset: every input is its own target.
    pub fn autoencoder(inputs: Matrix) -> Self {
        let targets = Targets::Dense(inputs.clone());
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn features(&self) -> usize {
        self.inputs.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Matrix::zeros(self.features(), idx.len());
        for (k, &i) in idx.iter().enumerate() {
            inputs.col_mut(k).copy_from_slice(self.inputs.col(i));
        }
        Dataset { inputs, targets: self.targets.select(idx) }
    }

    /// `n` samples chosen by a seeded permutation (all of them if `n` is
    /// larger than the dataset), kept in their original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Raw IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(Error::Format(format!(
            "truncated image data: need {} bytes, have {}",
            n * rows * cols,
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..n * rows * cols]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!("truncated label data: need {n} bytes, have {}", body.len())));
    }
    Ok(&body[..n])
}

/// Images scaled to `[0, 1]`, one column per image (row-major pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// 2x2 mean pooling (28x28 -> 14x14).
    pub fn downsample(&self) -> Result<ImageSet> {
        Ok(ImageSet {
            images: mean_pool_2x2(&self.images, self.height, self.width)?,
            labels: self.labels.clone(),
            height: self.height / 2,
            width: self.width / 2,
        })
    }

    pub fn classification(&self) -> Dataset {
        Dataset { inputs: self.images.clone(), targets: Targets::Classes(self.labels.clone()) }
    }

    pub fn autoencoder(&self) -> Dataset {
        Dataset::autoencoder(self.images.clone())
    }
}

/// Reads an image/label IDX pair, optionally gzip-compressed.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<ImageSet> {
    let ib = read_maybe_gz(images)?;
    let lb = read_maybe_gz(labels)?;
    let (n, h, w, pixels) = parse_idx_images(&ib)?;
    let lab = parse_idx_labels(&lb)?;
    if lab.len() != n {
        return Err(Error::Format(format!("{n} images but {} labels", lab.len())));
    }
    let images = Matrix::from_col_major(h * w, n, pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Ok(ImageSet { images, labels: lab.iter().map(|&l| l as usize).collect(), height: h, width: w })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Loads `train-*` or `t10k-*` files (with or without `.gz`) from `dir`.
pub fn load_mnist_dir(dir: &Path, split: Split) -> Result<ImageSet> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let find = |kind: &str| {
        let base = format!("{prefix}-{kind}");
        [format!("{base}.gz"), base.clone()]
            .into_iter()
            .map(|f| dir.join(f))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Format(format!("no {base}[.gz] in {}", dir.display())))
    };
    load_mnist_idx(&find("images-idx3-ubyte")?, &find("labels-idx1-ubyte")?)
}

/// Averages non-overlapping 2x2 blocks of every column-stored image.
pub fn mean_pool_2x2(images: &Matrix, height: usize, width: usize) -> Result<Matrix> {
    if images.rows() != height * width || !height.is_multiple_of(2) || !width.is_multiple_of(2) {
        return Err(Error::DimensionMismatch(format!("cannot pool {} pixels as {height}x{width}", images.rows())));
    }
    let (h2, w2) = (height / 2, width / 2);
    let mut out = Matrix::zeros(h2 * w2, images.cols());
    for i in 0..images.cols() {
        let src = images.col(i);
        for (k, o) in out.col_mut(i).iter_mut().enumerate() {
            let (y, x) = (2 * (k / w2), 2 * (k % w2));
            let at = |yy: usize, xx: usize| src[yy * width + xx];
            *o = (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticLabels {
    /// Uniform random classes independent of the input.
    Random,
    /// Argmax of a fixed random linear teacher.
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub labels: SyntheticLabels,
}

/// Standard-normal inputs with seeded labels.
pub fn synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Matrix::from_fn(spec.dim, spec.samples, |_, _| rng.sample(StandardNormal));
    let classes = spec.classes.max(1);
    let labels = match spec.labels {
        SyntheticLabels::Random => (0..spec.samples).map(|_| rng.random_range(0..classes)).collect(),
        SyntheticLabels::Teacher => {
            let teacher = Matrix::from_fn(classes, spec.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let scores = teacher.matmul(&inputs).expect("teacher shape");
            (0..spec.samples)
                .map(|i| {
                    let z = scores.col(i);
                    (0..classes).fold(0, |b, j| if z[j] > z[b] { j } else { b })
                })
                .collect()
        }
    };
    Dataset { inputs, targets: Targets::Classes(labels) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, h, w] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn header_parse() {
        let b = idx_images(2, 2, 3, &[0; 12]);
        let (n, h, w, px) = parse_idx_images(&b).unwrap();
        assert_eq!((n, h, w, px.len()), (2, 2, 3, 12));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut b = idx_images(1, 2, 2, &[0; 4]);
        b[3] = 0x01;
        assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
        let b = idx_images(2, 2, 2, &[0; 5]);
        assert!(matches!(parse_idx_images(&b), Err(Error::Format(_))));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(Error::Format(_))));
    }

    #[test]
    fn pooling_is_block_mean() {
        let img = Matrix::from_fn(16, 1, |k, _| k as f64);
        let p = mean_pool_2x2(&img, 4, 4).unwrap();
        // top-left block 0,1,4,5
        assert_eq!(p.col(0), &[2.5, 4.5, 10.5, 12.5]);
        assert!(mean_pool_2x2(&img, 2, 8).is_ok());
        assert!(mean_pool_2x2(&img, 3, 5).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SyntheticSpec { dim: 5, classes: 3, samples: 20, labels: SyntheticLabels::Teacher };
        assert_eq!(synthetic_dataset(&spec, 4), synthetic_dataset(&spec, 4));
        assert_ne!(synthetic_dataset(&spec, 4), synthetic_dataset(&spec, 5));
    }

    #[test]
    fn subset_is_deterministic_and_ordered() {
        let spec = SyntheticSpec { dim: 2, classes: 2, samples: 50, labels: SyntheticLabels::Random };
        let d = synthetic_dataset(&spec, 1);
        let a = d.subset(10, 9);
        assert_eq!(a, d.subset(10, 9));
        assert_eq!(a.len(), 10);
        assert_eq!(d.subset(100, 9), d);
    }
}
