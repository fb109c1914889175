//! Checkpoint utilities: statistics initialization and migration.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use batchless::checkpoint::{load_checkpoint, save_checkpoint};
use batchless::data::{generate_spirals, load_cifar10, Examples, SpiralParams};
use batchless::experiments::{derive_seed, fmt_sig9};
use batchless::network::{ForwardOptions, Model};
use batchless::norm::{init_from_sample, migrate_from_batchnorm, migrate_from_plain, SigmaMode};
use batchless::{Tape, Tensor};

use crate::config::{echo, resolve, set, Settings};
use crate::output::base_metadata;
use crate::{CliError, CmdResult, Status};

const CHUNK: usize = 256;
/// Largest output change a migration may cause.
const MIGRATION_TOLERANCE: f64 = 1e-6;

fn default_sample_size() -> usize {
    1000
}

/// `sample_size` instances for a model with this input shape: spiral
/// training points (classes interleaved) for `[2]`, leading CIFAR training
/// images for `[3, 32, 32]`. Returned in chunks.
fn load_sample(
    input_shape: &[usize],
    n: usize,
    seed: u64,
    data_dir: Option<&Path>,
) -> Result<Vec<Tensor>, CliError> {
    match input_shape {
        [2] => {
            let per_class = n.div_ceil(3);
            let (train, _) = generate_spirals(
                per_class,
                1,
                derive_seed(seed, &[0xDA7A]),
                &SpiralParams::default(),
            )?;
            let rows: Vec<usize> = (0..n).map(|i| (i % 3) * per_class + i / 3).collect();
            Ok(rows.chunks(CHUNK).map(|c| train.batch(c).0).collect())
        }
        [3, 32, 32] => {
            let dir = data_dir
                .ok_or_else(|| CliError::Usage("a CIFAR-shaped model needs --data-dir".into()))?;
            let (train, _) = load_cifar10(dir)?;
            let n = n.min(train.len());
            Ok(train
                .chunks(CHUNK)
                .into_iter()
                .filter(|&(s, _)| s < n)
                .map(|(s, e)| train.range(s, e.min(n)).0)
                .collect())
        }
        other => Err(CliError::Usage(format!(
            "no sample source for input shape {other:?}"
        ))),
    }
}

/// Row-weighted gauged metric per batchless layer over the sample.
fn gauged_on(model: &mut Model, sample: &[Tensor]) -> Result<Vec<f64>, CliError> {
    let mut sums = vec![0.0; model.batchless_layers().len()];
    let mut rows = 0usize;
    for x in sample {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, x, ForwardOptions::eval())?;
        let n = x.shape()[0];
        for (s, g) in sums.iter_mut().zip(&pass.gauged) {
            *s += g * n as f64;
        }
        rows += n;
    }
    Ok(sums.into_iter().map(|s| s / rows as f64).collect())
}

fn logits(model: &mut Model, x: &Tensor) -> Result<Tensor, CliError> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x, ForwardOptions::eval())?;
    Ok(tape.value(pass.logits).clone())
}

#[derive(Args, Debug)]
pub struct InitStatsArgs {
    /// Source checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Destination checkpoint; defaults to init_stats.json in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Instances the statistics are estimated from.
    #[arg(long)]
    sample_size: Option<usize>,
    /// CIFAR-10 directory, required for CNN checkpoints.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Seed of the generated spiral sample.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitStatsConfig {
    checkpoint: PathBuf,
    output: Option<PathBuf>,
    #[serde(default = "default_sample_size")]
    sample_size: usize,
    data_dir: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
}

pub fn run_init(settings: &Settings, a: InitStatsArgs) -> CmdResult {
    let mut t = settings.section("init-stats");
    set(&mut t, "checkpoint", a.checkpoint)?;
    set(&mut t, "output", a.output)?;
    set(&mut t, "sample_size", a.sample_size)?;
    set(&mut t, "data_dir", a.data_dir)?;
    set(&mut t, "seed", a.seed)?;
    let cfg: InitStatsConfig = resolve("init-stats", t)?;
    if cfg.sample_size == 0 {
        return Err(CliError::Usage("sample size must be positive".into()));
    }
    let source = load_checkpoint(&cfg.checkpoint)?;
    let mut model = source.model;
    if model.batchless_layers().is_empty() {
        return Err(CliError::Usage("checkpoint has no batchless layers".into()));
    }
    let sample = load_sample(
        model.input_shape(),
        cfg.sample_size,
        cfg.seed,
        cfg.data_dir.as_deref(),
    )?;
    let before = gauged_on(&mut model, &sample)?;
    let reports = init_from_sample(&mut model, || sample.iter().cloned())?;
    let after = gauged_on(&mut model, &sample)?;
    let rows: usize = sample.iter().map(|x| x.shape()[0]).sum();
    println!(
        "initialized {} batchless layer(s) from {rows} sample instance(s)",
        reports.len()
    );
    println!("layer\tgauged_before\tgauged_after");
    for ((r, b), a) in reports.iter().zip(&before).zip(&after) {
        println!("{}\t{}\t{}", r.layer, fmt_sig9(*b), fmt_sig9(*a));
    }

    let output = cfg
        .output
        .clone()
        .unwrap_or_else(|| settings.out_dir.join("init_stats.json"));
    if let Some(dir) = output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut meta = source.metadata;
    for (k, v) in base_metadata("init-stats", Some(cfg.seed), echo(&cfg)) {
        meta.insert(format!("init-stats.{k}"), v);
    }
    save_checkpoint(&output, &model, &meta)?;
    println!("wrote {}", output.display());
    Ok(Status::Ok)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MigrateMode {
    /// Replace batch-norm layers using their stored statistics.
    Bn,
    /// Insert batchless layers into a model without normalization.
    Plain,
}

#[derive(Args, Debug)]
pub struct MigrateArgs {
    /// Source checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Which migration to apply.
    #[arg(long, value_enum)]
    mode: Option<MigrateMode>,
    /// σ parameterization of the new layers: direct, log or inverse.
    #[arg(long)]
    sigma_mode: Option<String>,
    /// Weight of the batchless likelihood loss in the new layers.
    #[arg(long)]
    lambda: Option<f64>,
    /// Layer indices before which batchless layers are inserted (plain mode).
    #[arg(long, value_delimiter = ',')]
    points: Vec<usize>,
    /// Instances the new statistics are estimated from (plain mode).
    #[arg(long)]
    sample_size: Option<usize>,
    /// CIFAR-10 directory, required for CNN checkpoints.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Seed of the generated spiral sample and the probe batch.
    #[arg(long)]
    seed: Option<u64>,
    /// Instances in the random probe batch used for verification.
    #[arg(long)]
    probe_size: Option<usize>,
    /// Destination checkpoint; defaults to migrated.json in the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MigrateConfig {
    checkpoint: PathBuf,
    mode: MigrateMode,
    #[serde(default = "default_sigma_mode")]
    sigma_mode: SigmaMode,
    #[serde(default = "default_lambda")]
    lambda: f64,
    #[serde(default)]
    points: Vec<usize>,
    #[serde(default = "default_sample_size")]
    sample_size: usize,
    data_dir: Option<PathBuf>,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_probe")]
    probe_size: usize,
    output: Option<PathBuf>,
}

fn default_sigma_mode() -> SigmaMode {
    SigmaMode::Log
}

fn default_lambda() -> f64 {
    0.1
}

fn default_probe() -> usize {
    100
}

pub fn run_migrate(settings: &Settings, a: MigrateArgs) -> CmdResult {
    let mut t = settings.section("migrate");
    set(&mut t, "checkpoint", a.checkpoint)?;
    set(&mut t, "mode", a.mode)?;
    set(&mut t, "sigma_mode", a.sigma_mode)?;
    set(&mut t, "lambda", a.lambda)?;
    if !a.points.is_empty() {
        set(&mut t, "points", Some(a.points))?;
    }
    set(&mut t, "sample_size", a.sample_size)?;
    set(&mut t, "data_dir", a.data_dir)?;
    set(&mut t, "seed", a.seed)?;
    set(&mut t, "probe_size", a.probe_size)?;
    set(&mut t, "output", a.output)?;
    let cfg: MigrateConfig = resolve("migrate", t)?;
    if cfg.probe_size == 0 {
        return Err(CliError::Usage("probe size must be positive".into()));
    }
    let source = load_checkpoint(&cfg.checkpoint)?;
    let mut original = source.model;
    let mut migrated = match cfg.mode {
        MigrateMode::Bn => {
            if original.batchnorm_layers().is_empty() {
                return Err(CliError::Usage(
                    "mode bn needs a checkpoint with batch-norm layers".into(),
                ));
            }
            migrate_from_batchnorm(&original, cfg.sigma_mode, cfg.lambda)?
        }
        MigrateMode::Plain => {
            if cfg.points.is_empty() {
                return Err(CliError::Usage("mode plain needs --points".into()));
            }
            if cfg.sample_size == 0 {
                return Err(CliError::Usage("sample size must be positive".into()));
            }
            let sample = load_sample(
                original.input_shape(),
                cfg.sample_size,
                cfg.seed,
                cfg.data_dir.as_deref(),
            )?;
            migrate_from_plain(&original, sample, &cfg.points, cfg.sigma_mode, cfg.lambda)?
        }
    };

    let mut shape = vec![cfg.probe_size];
    shape.extend_from_slice(original.input_shape());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0x960B]));
    let n: usize = shape.iter().product();
    let probe = Tensor::new(
        shape,
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
    )?;
    let a = logits(&mut original, &probe)?;
    let b = logits(&mut migrated, &probe)?;
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let output = cfg
        .output
        .clone()
        .unwrap_or_else(|| settings.out_dir.join("migrated.json"));
    if let Some(dir) = output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut meta = source.metadata;
    for (k, v) in base_metadata("migrate", Some(cfg.seed), echo(&cfg)) {
        meta.insert(format!("migrate.{k}"), v);
    }
    meta.insert("migrate.max_abs_difference".into(), format!("{diff:e}"));
    save_checkpoint(&output, &migrated, &meta)?;
    println!("migrated layers: {:?}", migrated.batchless_layers());
    println!(
        "max abs output difference on {} probe instances: {diff:e}",
        cfg.probe_size
    );
    println!("wrote {}", output.display());
    Ok(if diff <= MIGRATION_TOLERANCE {
        Status::Ok
    } else {
        Status::Failed(format!(
            "output difference {diff:e} exceeds {MIGRATION_TOLERANCE:e}"
        ))
    })
}
