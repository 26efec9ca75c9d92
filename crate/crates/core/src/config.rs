//! Flat TOML experiment configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::DEFAULT_FIM_CAP;
use crate::data::SyntheticLabels;
use crate::error::{Error, Result};
use crate::net::{Activation, BiasMode, LabelMode};
use crate::optim::{OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// MNIST reconstruction with a Bernoulli output.
    Autoencoder,
    /// MNIST digit classification.
    Classify,
    /// Seeded Gaussian inputs with classification labels.
    Synthetic,
}

/// Hidden layers of the autoencoder: the code layer appears once, so the
/// listing `1000-500-250-30-30-250-500-1000` (encoder output, then decoder
/// input) becomes eight weight layers around the 784-pixel input and output.
pub const AUTOENCODER_HIDDEN: &str = "1000-500-250-30-250-500-1000";
/// Hidden layers of the `196-20-20-20-20-10` classifier.
pub const CLASSIFIER_HIDDEN: &str = "20-20-20-20";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Hidden layers separated by `-`: a number is a dense layer of that
    /// width, `c<channels>k<kernel>[s<stride>][p<pad>]` a convolution. The
    /// input and output layers follow from the data.
    pub architecture: String,
    /// Multiplies every hidden width and channel count (rounded, at least 1).
    pub width_scale: f64,
    pub activation: Activation,
    pub bias: BiasMode,

    /// Directory with the MNIST IDX files; falls back to `TKFAC_DATA_DIR`.
    pub data_dir: Option<String>,
    /// 2x2 mean pooling of MNIST images (28x28 -> 14x14).
    pub downsample: bool,
    /// Training samples to keep (0 keeps all), chosen with `subset_seed`.
    pub train_subset: usize,
    /// Test samples to evaluate each epoch (0 skips the test set).
    pub test_subset: usize,
    pub subset_seed: u64,

    pub synthetic_dim: usize,
    pub synthetic_classes: usize,
    pub synthetic_samples: usize,
    pub synthetic_labels: SyntheticLabels,
    /// Image shape for conv layers on synthetic data (`channels·h·w` must
    /// equal `synthetic_dim`); ignored for MNIST.
    pub synthetic_shape: Option<[usize; 3]>,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_decay_epochs: usize,
    pub lambda: f64,
    pub nu: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub t_fim: usize,
    pub t_inv: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_iterations: usize,
    pub seed: u64,
    pub label_mode: LabelMode,
    pub ema_before_damping: bool,
    pub curvature_eigs: bool,

    /// Record exact-vs-approximate Fisher errors every this many iterations
    /// (0 disables).
    pub analysis_every: usize,
    /// Largest exact Fisher block allowed in the analysis.
    pub fim_cap: usize,

    pub output_dir: String,

    /// Grid values; empty lists fall back to the defaults in
    /// [`crate::experiment::default_grid`].
    pub grid_lr: Vec<f64>,
    pub grid_lambda: Vec<f64>,
    pub grid_nu: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            task: Task::Classify,
            architecture: CLASSIFIER_HIDDEN.into(),
            width_scale: 1.0,
            activation: Activation::Relu,
            bias: BiasMode::None,
            data_dir: None,
            downsample: true,
            train_subset: 0,
            test_subset: 0,
            subset_seed: 0,
            synthetic_dim: 196,
            synthetic_classes: 10,
            synthetic_samples: 1000,
            synthetic_labels: SyntheticLabels::Teacher,
            synthetic_shape: None,
            optimizer: t.optimizer,
            lr: t.lr,
            lr_decay_epochs: t.lr_decay_epochs,
            lambda: t.lambda,
            nu: t.nu,
            epsilon: t.epsilon,
            tau: t.tau,
            t_fim: t.t_fim,
            t_inv: t.t_inv,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_iterations: t.max_iterations,
            seed: t.seed,
            label_mode: t.label_mode,
            ema_before_damping: t.ema_before_damping,
            curvature_eigs: t.curvature_eigs,
            analysis_every: 0,
            fim_cap: DEFAULT_FIM_CAP,
            output_dir: "runs/default".into(),
            grid_lr: Vec::new(),
            grid_lambda: Vec::new(),
            grid_nu: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults for the MNIST autoencoder.
    pub fn autoencoder() -> Self {
        Self { task: Task::Autoencoder, architecture: AUTOENCODER_HIDDEN.into(), downsample: false, ..Self::default() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer,
            lr: self.lr,
            lr_decay_epochs: self.lr_decay_epochs,
            lambda: self.lambda,
            nu: self.nu,
            epsilon: self.epsilon,
            tau: self.tau,
            t_fim: self.t_fim,
            t_inv: self.t_inv,
            batch_size: self.batch_size,
            epochs: self.epochs,
            max_iterations: self.max_iterations,
            seed: self.seed,
            label_mode: self.label_mode,
            ema_before_damping: self.ema_before_damping,
            curvature_eigs: self.curvature_eigs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if !(self.width_scale > 0.0) || !self.width_scale.is_finite() {
            return Err(Error::Config(format!("width_scale must be positive, got {}", self.width_scale)));
        }
        if self.fim_cap == 0 {
            return Err(Error::Config("fim_cap must be positive".into()));
        }
        if self.task == Task::Synthetic && (self.synthetic_dim == 0 || self.synthetic_samples == 0) {
            return Err(Error::Config("synthetic task needs synthetic_dim and synthetic_samples".into()));
        }
        if let Some([c, h, w]) = self.synthetic_shape {
            if c * h * w != self.synthetic_dim {
                return Err(Error::Config(format!(
                    "synthetic_shape {c}x{h}x{w} does not match synthetic_dim {}",
                    self.synthetic_dim
                )));
            }
        }
        crate::experiment::parse_architecture(&self.architecture)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Replaces fields by name. Each raw value is read as a TOML value
    /// (`0.1`, `true`, `[1e-3, 1e-2]`) and otherwise taken as a string; a
    /// bare comma-separated list is read as an array, and a single value for
    /// a list field as a one-element list.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in pairs {
            let mut value = parse_value(raw);
            // a single value for a list field is a one-element list
            if matches!(table.get(key), Some(toml::Value::Array(_))) && !value.is_array() {
                value = toml::Value::Array(vec![value]);
            }
            table.insert(key.to_string(), value);
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    let text = if raw.contains(',') && !raw.starts_with('[') { format!("[{raw}]") } else { raw.to_string() };
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
