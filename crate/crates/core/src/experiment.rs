//! Experiment orchestration: data, network construction, training and the
//! files each run leaves behind.
//!
//! A run directory holds `config.toml` (snapshot), `metrics.csv` (one row
//! per epoch), `curvature.csv` (one row per layer and factor refresh),
//! `errors.csv` (when the Fisher analysis is on), `timing.csv` and
//! `summary.json`. Wall-clock time only appears in `timing.csv` and
//! `summary.json`, so `metrics.csv` is byte-identical across reruns.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::analysis::{ErrorCurve, ErrorReport};
use crate::config::{ExperimentConfig, Task};
use crate::data::{load_mnist_dir, synthetic_dataset, Dataset, ImageSet, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::net::{Activation, ConvGeometry, LayerSpec, Loss, Network};
use crate::optim::{run_training, CurvatureRecord, MetricsRecord, NoObserver, Observer, OptimizerKind, TimingRecord};
use crate::{seeded_rng, RngStream};

pub const DATA_DIR_ENV: &str = "TKFAC_DATA_DIR";
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Learning rates searched for every optimizer.
pub const LR_GRID: [f64; 10] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0];
/// Damping values searched for the second-order methods.
pub const LAMBDA_GRID: [f64; 10] = [1e-8, 1e-6, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1];
/// Damping range listed per method for KFAC and the normal-damping variant.
pub const LAMBDA_GRID_KFAC: [f64; 8] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1];
/// Epsilon range listed for Adam.
pub const LAMBDA_GRID_ADAM: [f64; 5] = [1e-8, 1e-4, 1e-3, 1e-2, 1e-1];
/// Trace clamp values for the trace-scaled damping.
pub const NU_GRID: [f64; 6] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
/// Wider trace clamp range listed per method.
pub const NU_GRID_WIDE: [f64; 7] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HiddenLayer {
    Dense(usize),
    Conv { channels: usize, kernel: usize, stride: usize, padding: usize },
}

fn parse_conv(tok: &str) -> Option<HiddenLayer> {
    let rest = tok.strip_prefix('c')?;
    let mut fields = [None, None, Some(1), Some(0)];
    let mut key = 0;
    let mut num = String::new();
    let mut flush = |key: usize, num: &mut String| -> Option<()> {
        fields[key] = Some(num.parse().ok()?);
        num.clear();
        Some(())
    };
    for ch in rest.chars() {
        match ch {
            '0'..='9' => num.push(ch),
            'k' | 's' | 'p' => {
                flush(key, &mut num)?;
                key = match ch {
                    'k' => 1,
                    's' => 2,
                    _ => 3,
                };
            }
            _ => return None,
        }
    }
    flush(key, &mut num)?;
    Some(HiddenLayer::Conv { channels: fields[0]?, kernel: fields[1]?, stride: fields[2]?, padding: fields[3]? })
}

/// Parses `-`-separated hidden layers, e.g. `c8k3p1-c8k3s2p1-64`.
pub fn parse_architecture(spec: &str) -> Result<Vec<HiddenLayer>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    spec.split('-')
        .map(|tok| {
            let tok = tok.trim();
            let layer = match tok.parse::<usize>() {
                Ok(w) => Some(HiddenLayer::Dense(w)),
                Err(_) => parse_conv(tok),
            };
            match layer {
                Some(HiddenLayer::Dense(0)) | Some(HiddenLayer::Conv { channels: 0, .. }) | None => {
                    Err(Error::Config(format!("bad layer {tok:?} in architecture {spec:?}")))
                }
                Some(l) => Ok(l),
            }
        })
        .collect()
}

fn scaled(w: usize, scale: f64) -> usize {
    ((w as f64 * scale).round() as usize).max(1)
}

/// Builds the network for an input of shape `(channels, height, width)`.
pub fn build_network(
    hidden: &[HiddenLayer],
    input: [usize; 3],
    outputs: usize,
    activation: Activation,
    width_scale: f64,
    loss: Loss,
    bias: crate::net::BiasMode,
) -> Result<Network> {
    let [mut c, mut h, mut w] = input;
    let mut layers = Vec::new();
    for layer in hidden {
        match *layer {
            HiddenLayer::Dense(width) => {
                let out = scaled(width, width_scale);
                layers.push(LayerSpec::dense(c * h * w, out, activation));
                (c, h, w) = (out, 1, 1);
            }
            HiddenLayer::Conv { channels, kernel, stride, padding } => {
                let out = scaled(channels, width_scale);
                let g = ConvGeometry::new(c, out, kernel, (h, w), stride, padding)?;
                (c, h, w) = (out, g.out_height(), g.out_width());
                layers.push(LayerSpec::conv(g, activation));
            }
        }
    }
    layers.push(LayerSpec::dense(c * h * w, outputs, Activation::Identity));
    Network::new(layers, loss, bias)
}

/// Training and optional test data of a run, plus the input image shape.
pub struct RunData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub input_shape: [usize; 3],
    pub outputs: usize,
    pub loss: Loss,
}

/// `cfg.data_dir`, then `$TKFAC_DATA_DIR`, then `data/mnist`.
pub fn resolve_data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.data_dir
        .clone()
        .or_else(|| std::env::var(DATA_DIR_ENV).ok())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"))
}

fn mnist(cfg: &ExperimentConfig, split: Split) -> Result<ImageSet> {
    let set = load_mnist_dir(&resolve_data_dir(cfg), split)?;
    if cfg.downsample {
        set.downsample()
    } else {
        Ok(set)
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<RunData> {
    let pick = |d: Dataset, n: usize, seed: u64| if n > 0 { d.subset(n, seed) } else { d };
    match cfg.task {
        Task::Classify | Task::Autoencoder => {
            let auto = cfg.task == Task::Autoencoder;
            let to_ds = |s: &ImageSet| if auto { s.autoencoder() } else { s.classification() };
            let train_set = mnist(cfg, Split::Train)?;
            let shape = [1, train_set.height, train_set.width];
            let train = pick(to_ds(&train_set), cfg.train_subset, cfg.subset_seed);
            let test = if cfg.test_subset > 0 {
                Some(pick(to_ds(&mnist(cfg, Split::Test)?), cfg.test_subset, cfg.subset_seed))
            } else {
                None
            };
            let (outputs, loss) =
                if auto { (train.features(), Loss::BinaryCrossEntropy) } else { (10, Loss::SoftmaxCrossEntropy) };
            Ok(RunData { train, test, input_shape: shape, outputs, loss })
        }
        Task::Synthetic => {
            let spec = SyntheticSpec {
                dim: cfg.synthetic_dim,
                classes: cfg.synthetic_classes,
                samples: cfg.synthetic_samples,
                labels: cfg.synthetic_labels,
            };
            let train = synthetic_dataset(&spec, cfg.subset_seed);
            let test = (cfg.test_subset > 0).then(|| {
                let spec = SyntheticSpec { samples: cfg.test_subset, ..spec };
                synthetic_dataset(&spec, cfg.subset_seed.wrapping_add(1))
            });
            Ok(RunData {
                train,
                test,
                input_shape: cfg.synthetic_shape.unwrap_or([cfg.synthetic_dim, 1, 1]),
                outputs: cfg.synthetic_classes,
                loss: Loss::SoftmaxCrossEntropy,
            })
        }
    }
}

/// Network for `cfg` and `data`, initialized from the run seed.
pub fn init_network(cfg: &ExperimentConfig, data: &RunData) -> Result<Network> {
    let hidden = parse_architecture(&cfg.architecture)?;
    let mut net =
        build_network(&hidden, data.input_shape, data.outputs, cfg.activation, cfg.width_scale, data.loss, cfg.bias)?;
    net.init_weights(&mut seeded_rng(cfg.seed, RngStream::Init));
    Ok(net)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn header(kind: &str, columns: &str) -> String {
    format!("# tkfac {kind} v{CSV_SCHEMA_VERSION}\n{columns}\n")
}

pub fn metrics_csv(rows: &[MetricsRecord]) -> String {
    let mut s = header("metrics", "epoch,iteration,lr,batch_loss,train_loss,train_error,test_loss,test_error");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iteration,
            num(r.lr),
            opt(r.batch_loss),
            num(r.train_loss),
            num(r.train_error),
            opt(r.test_loss),
            opt(r.test_error)
        );
    }
    s
}

pub fn curvature_csv(rows: &[CurvatureRecord]) -> String {
    let mut s = header(
        "curvature",
        "iteration,layer,conv,delta,delta_used,beta,trace_in,trace_out,damping_in,damping_out,ratio_in,ratio_out,min_eig_in,min_eig_out",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.layer,
            r.conv,
            num(r.delta),
            num(r.delta_used),
            num(r.beta),
            num(r.trace_in),
            num(r.trace_out),
            num(r.damping_in),
            num(r.damping_out),
            num(r.ratio_in),
            num(r.ratio_out),
            opt(r.min_eig_in),
            opt(r.min_eig_out)
        );
    }
    s
}

pub fn errors_csv(reports: &[ErrorReport]) -> String {
    let mut s =
        header("errors", "iteration,layer,dim,tkfac_error,kfac_error,tkfac_bound,kfac_bound,trace_exact,trace_tkfac");
    for r in reports {
        for e in &r.layers {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration,
                e.layer,
                e.dim,
                num(e.tkfac_error),
                num(e.kfac_error),
                opt(e.tkfac_bound),
                opt(e.kfac_bound),
                num(e.trace_exact),
                num(e.trace_tkfac)
            );
        }
        let _ = writeln!(s, "{},sum,,{},{},,,,", r.iteration, num(r.sum_tkfac), num(r.sum_kfac));
    }
    s
}

pub fn timing_csv(rows: &[TimingRecord]) -> String {
    let mut s = header("timing", "epoch,iteration,step_seconds");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.epoch, r.iteration, num(r.step_seconds));
    }
    s
}

/// Stable JSON summary of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub schema: u32,
    pub optimizer: OptimizerKind,
    /// `ok` or `non_finite`.
    pub status: String,
    pub message: Option<String>,
    pub iterations: usize,
    pub epochs: usize,
    pub final_train_loss: Option<f64>,
    pub final_train_error: Option<f64>,
    pub best_train_error: Option<f64>,
    pub final_test_error: Option<f64>,
    pub best_test_error: Option<f64>,
    pub factor_refreshes: usize,
    pub inverse_refreshes: usize,
    pub step_seconds: f64,
    pub error_points: usize,
    /// Sampled points where the summed TKFAC error is at most the KFAC error.
    pub tkfac_below_kfac: usize,
}

fn min_of(it: impl Iterator<Item = f64>) -> Option<f64> {
    it.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))))
}

/// Everything a run produced, also written to `cfg.output_dir`.
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRecord>,
    pub curvature: Vec<CurvatureRecord>,
    pub errors: Vec<ErrorReport>,
    pub network: Network,
}

/// Trains as configured and writes the run directory. On a non-finite loss
/// the summary is still written (status `non_finite`) before the error is
/// returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = Path::new(&cfg.output_dir);
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let data = load_data(cfg)?;
    let net = init_network(cfg, &data)?;
    let train_cfg = cfg.train_config();
    let mut curve =
        (cfg.analysis_every > 0).then(|| ErrorCurve::new(cfg.analysis_every, cfg.fim_cap, cfg.label_mode, cfg.seed));
    let mut noop = NoObserver;
    let observer: &mut dyn Observer = match curve.as_mut() {
        Some(c) => c,
        None => &mut noop,
    };
    let result = run_training(net, &data.train, data.test.as_ref(), &train_cfg, observer);
    let errors = curve.map(|c| c.reports).unwrap_or_default();

    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::NonFiniteLoss(_)) => {
            let summary = RunSummary {
                schema: CSV_SCHEMA_VERSION,
                optimizer: cfg.optimizer,
                status: "non_finite".into(),
                message: Some(e.to_string()),
                iterations: 0,
                epochs: 0,
                final_train_loss: None,
                final_train_error: None,
                best_train_error: None,
                final_test_error: None,
                best_test_error: None,
                factor_refreshes: 0,
                inverse_refreshes: 0,
                step_seconds: 0.0,
                error_points: errors.len(),
                tkfac_below_kfac: errors.iter().filter(|r| r.sum_tkfac <= r.sum_kfac).count(),
            };
            write_json(&out.join("summary.json"), &summary)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    fs::write(out.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    fs::write(out.join("curvature.csv"), curvature_csv(&outcome.curvature))?;
    fs::write(out.join("timing.csv"), timing_csv(&outcome.timing))?;
    if cfg.analysis_every > 0 {
        fs::write(out.join("errors.csv"), errors_csv(&errors))?;
    }
    let last = outcome.metrics.last();
    let summary = RunSummary {
        schema: CSV_SCHEMA_VERSION,
        optimizer: cfg.optimizer,
        status: "ok".into(),
        message: None,
        iterations: outcome.iterations,
        epochs: last.map_or(0, |m| m.epoch),
        final_train_loss: last.map(|m| m.train_loss),
        final_train_error: last.map(|m| m.train_error),
        best_train_error: min_of(outcome.metrics.iter().map(|m| m.train_error)),
        final_test_error: last.and_then(|m| m.test_error),
        best_test_error: min_of(outcome.metrics.iter().filter_map(|m| m.test_error)),
        factor_refreshes: outcome.factor_refreshes,
        inverse_refreshes: outcome.inverse_refreshes,
        step_seconds: outcome.timing.last().map_or(0.0, |t| t.step_seconds),
        error_points: errors.len(),
        tkfac_below_kfac: errors.iter().filter(|r| r.sum_tkfac <= r.sum_kfac).count(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(RunArtifacts { summary, metrics: outcome.metrics, curvature: outcome.curvature, errors, network: outcome.net })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Grid values for `optimizer`: `(lr, lambda, nu)` lists. Parameters the
/// optimizer ignores get a single entry.
pub fn default_grid(cfg: &ExperimentConfig) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let or = |v: &Vec<f64>, d: &[f64]| if v.is_empty() { d.to_vec() } else { v.clone() };
    let lr = or(&cfg.grid_lr, &LR_GRID);
    let (lambda, nu) = match cfg.optimizer {
        OptimizerKind::TkfacNor | OptimizerKind::Kfac => (or(&cfg.grid_lambda, &LAMBDA_GRID), vec![cfg.nu]),
        OptimizerKind::Adam => (or(&cfg.grid_lambda, &LAMBDA_GRID_ADAM), vec![cfg.nu]),
        OptimizerKind::TkfacNew => (vec![cfg.lambda], or(&cfg.grid_nu, &NU_GRID)),
        OptimizerKind::Sgdm => (vec![cfg.lambda], vec![cfg.nu]),
    };
    (lr, lambda, nu)
}

/// One config per grid point, each writing to its own subdirectory.
pub fn grid_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let (lrs, lambdas, nus) = default_grid(base);
    let mut out = Vec::new();
    for &lr in &lrs {
        for &lambda in &lambdas {
            for &nu in &nus {
                let dir =
                    Path::new(&base.output_dir).join(format!("{}_lr{lr:e}_lam{lambda:e}_nu{nu:e}", base.optimizer));
                out.push(ExperimentConfig {
                    lr,
                    lambda,
                    nu,
                    output_dir: dir.to_string_lossy().into_owned(),
                    ..base.clone()
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub lr: f64,
    pub lambda: f64,
    pub nu: f64,
    /// `None` when the run hit a non-finite loss.
    pub summary: Option<RunSummary>,
}

impl GridPoint {
    /// Best training error, infinite for diverged runs.
    pub fn score(&self) -> f64 {
        self.summary.as_ref().and_then(|s| s.best_train_error).unwrap_or(f64::INFINITY)
    }
}

/// Runs every grid point and writes `grid.csv` next to the run folders.
/// Returns all points; diverged runs are kept with no summary.
pub fn run_grid(base: &ExperimentConfig, mut progress: impl FnMut(&GridPoint)) -> Result<Vec<GridPoint>> {
    let mut points = Vec::new();
    for cfg in grid_configs(base) {
        let summary = match run_experiment(&cfg) {
            Ok(a) => Some(a.summary),
            Err(Error::NonFiniteLoss(_)) => None,
            Err(e) => return Err(e),
        };
        let p = GridPoint { lr: cfg.lr, lambda: cfg.lambda, nu: cfg.nu, summary };
        progress(&p);
        points.push(p);
    }
    let mut s = header("grid", "optimizer,lr,lambda,nu,status,final_train_error,best_train_error,best_test_error");
    for p in &points {
        let (status, fin, best, test) = match &p.summary {
            Some(x) => ("ok", opt(x.final_train_error), opt(x.best_train_error), opt(x.best_test_error)),
            None => ("non_finite", String::new(), String::new(), String::new()),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{status},{fin},{best},{test}",
            base.optimizer,
            num(p.lr),
            num(p.lambda),
            num(p.nu)
        );
    }
    fs::create_dir_all(&base.output_dir)?;
    fs::write(Path::new(&base.output_dir).join("grid.csv"), s)?;
    Ok(points)
}

/// The point with the lowest best training error.
pub fn best_point(points: &[GridPoint]) -> Option<&GridPoint> {
    points.iter().filter(|p| p.score().is_finite()).min_by(|a, b| a.score().total_cmp(&b.score()))
}
