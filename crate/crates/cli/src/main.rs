use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tkfac::analysis::location_correlation;
use tkfac::config::ExperimentConfig;
use tkfac::experiment::{best_point, load_data, run_experiment, run_grid};
use tkfac::verify::{run_all, Counts};
use tkfac::{seeded_rng, RngStream};

/// Trace-restricted Kronecker-factored natural gradient experiments.
///
/// Settings are resolved in this order, later winning: built-in defaults,
/// the `--config` file, per-field flags, then `--set key=value` pairs.
#[derive(Parser)]
#[command(name = "tkfac", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Train(RunArgs),
    /// Train every point of the learning-rate / damping grid.
    Grid(RunArgs),
    /// Train with the exact-Fisher error analysis attached.
    Analyze(RunArgs),
    /// Run the randomized invariant suite.
    Verify(VerifyArgs),
}

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// One flag per configuration field.
        #[derive(Args, Default)]
        struct Overrides {
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

overrides!(
    task,
    architecture,
    width_scale,
    activation,
    bias,
    data_dir,
    downsample,
    train_subset,
    test_subset,
    subset_seed,
    synthetic_dim,
    synthetic_classes,
    synthetic_samples,
    synthetic_labels,
    synthetic_shape,
    optimizer,
    lr,
    lr_decay_epochs,
    lambda,
    nu,
    epsilon,
    tau,
    t_fim,
    t_inv,
    batch_size,
    epochs,
    max_iterations,
    seed,
    label_mode,
    ema_before_damping,
    curvature_eigs,
    analysis_every,
    fim_cap,
    output_dir,
    grid_lr,
    grid_lambda,
    grid_nu,
);

#[derive(Args)]
struct RunArgs {
    /// TOML file with configuration fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Start from the autoencoder defaults instead of the classifier ones.
    #[arg(long)]
    autoencoder: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    fields: Overrides,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer random instances per check.
    #[arg(long)]
    quick: bool,
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let base = match &args.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None if args.autoencoder => ExperimentConfig::autoencoder(),
        None => ExperimentConfig::default(),
    };
    let mut pairs = args.fields.pairs();
    for kv in &args.set {
        let Some((k, v)) = kv.split_once('=') else { bail!("--set expects key=value, got {kv:?}") };
        pairs.push((k.trim(), v));
    }
    let cfg = base.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train(cfg: &ExperimentConfig) -> Result<()> {
    let art = run_experiment(cfg)?;
    println!("{}", serde_json::to_string_pretty(&art.summary)?);
    Ok(())
}

fn grid(cfg: &ExperimentConfig) -> Result<()> {
    let points = run_grid(cfg, |p| match &p.summary {
        Some(s) => eprintln!(
            "lr={:e} lambda={:e} nu={:e} best_train_error={:.6}",
            p.lr,
            p.lambda,
            p.nu,
            s.best_train_error.unwrap_or(f64::NAN)
        ),
        None => eprintln!("lr={:e} lambda={:e} nu={:e} diverged", p.lr, p.lambda, p.nu),
    })?;
    match best_point(&points) {
        Some(p) => println!("best lr={:e} lambda={:e} nu={:e} train_error={:.6}", p.lr, p.lambda, p.nu, p.score()),
        None => bail!("every grid point diverged"),
    }
    Ok(())
}

fn analyze(cfg: &ExperimentConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    if cfg.analysis_every == 0 {
        cfg.analysis_every = 100;
    }
    let art = run_experiment(&cfg)?;
    println!(
        "{} of {} sampled points have summed TKFAC error <= KFAC error",
        art.summary.tkfac_below_kfac, art.summary.error_points
    );
    if let Some(last) = art.errors.last() {
        println!("iteration {}: tkfac {:.6e} kfac {:.6e}", last.iteration, last.sum_tkfac, last.sum_kfac);
    }

    // location correlations of the trained conv layers on the first batch
    let data = load_data(&cfg)?;
    if !data.train.is_empty() {
        let n = cfg.batch_size.min(data.train.len());
        let batch = data.train.select(&(0..n).collect::<Vec<_>>());
        let net = &art.network;
        let cache = net.forward(&batch.inputs)?;
        let mut rng = seeded_rng(cfg.seed, RngStream::Analysis);
        let trace = net.backward(&cache, &batch.targets, cfg.label_mode, &mut rng)?;
        for l in 0..net.num_parametric() {
            if !trace.layers[l].is_conv {
                continue;
            }
            let c = location_correlation(&trace, l)?;
            let path = Path::new(&cfg.output_dir).join(format!("location_correlation_{l}.csv"));
            fs::write(&path, correlation_csv(&c.matrix, &c.degenerate))?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn correlation_csv(m: &tkfac::Matrix, degenerate: &[bool]) -> String {
    let mut s = String::from("# tkfac location_correlation v1\nlocation,degenerate");
    for q in 0..m.cols() {
        let _ = write!(s, ",l{q}");
    }
    s.push('\n');
    for p in 0..m.rows() {
        let _ = write!(s, "{p},{}", degenerate[p]);
        for q in 0..m.cols() {
            let _ = write!(s, ",{}", m[(p, q)]);
        }
        s.push('\n');
    }
    s
}

fn verify(args: &VerifyArgs) -> Result<()> {
    let counts = if args.quick { Counts::QUICK } else { Counts::FULL };
    let checks = run_all(args.seed, counts);
    let mut failed = 0;
    for c in &checks {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<45} n={:<6} worst={:.3e} tol={:.0e}", c.name, c.instances, c.worst, c.tolerance);
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => resolve(a).and_then(|c| train(&c)),
        Command::Grid(a) => resolve(a).and_then(|c| grid(&c)),
        Command::Analyze(a) => resolve(a).and_then(|c| analyze(&c)),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
