use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, Examples, SamplingMode};
use crate::error::{Error, Result};
use crate::experiments::{derive_seed, is_applicable, RunStatus};
use crate::network::{build_cifar_cnn, ArchConfig, InitWidth, Model, NormKind};
use crate::norm::{finalize_population_stats, init_from_sample, RenormClip};
use crate::optim::{LambdaMode, OptimConfig, OptimizerKind};
use crate::tensor::Tensor;
use crate::train::{evaluate, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CifarConfig {
    pub norms: Vec<NormKind>,
    pub batch_sizes: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub lambda_mode: LambdaMode,
    pub drop_rate: f64,
    pub weight_decay: f64,
    pub init_width: InitWidth,
    pub epochs: usize,
    /// Train on the first `subset` training images.
    pub subset: Option<usize>,
    /// Validate on the first `val_subset` test images.
    pub val_subset: Option<usize>,
    /// Leading training images used to initialize batchless statistics;
    /// 0 keeps the default μ = 0, σ = 1.
    pub init_samples: usize,
    /// Evaluate batch-norm models with population statistics over the
    /// training subset instead of moving averages.
    pub finalize_bn: bool,
    pub micro_batch: Option<usize>,
    /// Rows per forward pass during evaluation and initialization.
    pub eval_chunk: usize,
}

impl Default for CifarConfig {
    fn default() -> Self {
        Self {
            norms: vec![
                NormKind::None,
                NormKind::Bn,
                NormKind::Bin,
                NormKind::BinLog,
                NormKind::BinInv,
            ],
            batch_sizes: vec![4],
            runs: 1,
            seed: 0,
            lr: 0.001,
            optimizer: OptimizerKind::Adam,
            lambda: 0.1,
            lambda_mode: LambdaMode::LossMultiplier,
            drop_rate: 0.25,
            weight_decay: 0.0,
            init_width: InitWidth::FullSupport,
            epochs: 5,
            subset: Some(5000),
            val_subset: None,
            init_samples: 1000,
            finalize_bn: false,
            micro_batch: None,
            eval_chunk: 100,
        }
    }
}

impl CifarConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.norms.is_empty() || self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return fail("norm kinds and batch sizes (≥ 1) are required");
        }
        if self.norms.contains(&NormKind::Brn) {
            return fail("the CIFAR network has no batch-renorm variant");
        }
        if self.runs == 0 || self.epochs == 0 || self.eval_chunk == 0 {
            return fail("runs, epochs and eval chunk must be positive");
        }
        if self.subset == Some(0) || self.val_subset == Some(0) {
            return fail("subsets must be non-empty");
        }
        if !(0.0..1.0).contains(&self.drop_rate)
            || !(self.lambda >= 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return fail("invalid drop rate, lambda or weight decay");
        }
        OptimConfig::new(self.optimizer, self.lr).validate()
    }
}

/// First `len` rows of another set.
struct Prefix<'a> {
    inner: &'a dyn Examples,
    len: usize,
}

impl Examples for Prefix<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn classes(&self) -> usize {
        self.inner.classes()
    }

    fn instance_shape(&self) -> Vec<usize> {
        self.inner.instance_shape()
    }

    fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        self.inner.batch(rows)
    }
}

fn prefix(data: &dyn Examples, limit: Option<usize>) -> Prefix<'_> {
    Prefix {
        inner: data,
        len: limit.map_or(data.len(), |l| l.min(data.len())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Mean gauged metric over the epoch's batches, per batchless layer.
    pub gauged: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CifarRunResult {
    pub norm: NormKind,
    pub batch_size: usize,
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    pub trace: Vec<EpochPoint>,
    /// Training images the batchless statistics were initialized from.
    pub init_samples_used: usize,
    pub model: Option<Model>,
}

impl CifarRunResult {
    pub fn max_accuracy(&self) -> Option<f64> {
        self.trace.iter().map(|p| p.val_acc).reduce(f64::max)
    }

    pub fn min_loss(&self) -> Option<f64> {
        self.trace.iter().map(|p| p.val_loss).reduce(f64::min)
    }
}

pub fn run_cifar_once(
    cfg: &CifarConfig,
    train: &dyn Examples,
    val: &dyn Examples,
    norm: NormKind,
    batch_size: usize,
    run: usize,
) -> Result<CifarRunResult> {
    let seed = derive_seed(cfg.seed, &[batch_size as u64, run as u64]);
    let mut result = CifarRunResult {
        norm,
        batch_size,
        run,
        seed,
        status: RunStatus::Completed,
        trace: Vec::new(),
        init_samples_used: 0,
        model: None,
    };
    if !is_applicable(norm, batch_size) {
        result.status = RunStatus::Inapplicable;
        return Ok(result);
    }
    let train = prefix(train, cfg.subset);
    let val = prefix(val, cfg.val_subset);
    let arch = ArchConfig {
        drop_rate: cfg.drop_rate,
        lambda: cfg.lambda,
        init_width: cfg.init_width,
        weight_decay: cfg.weight_decay,
        renorm: RenormClip::default(),
        ..ArchConfig::cifar(norm, derive_seed(seed, &[1]))
    };
    let mut model = build_cifar_cnn(&arch)?;
    if norm.is_batchless() && cfg.init_samples > 0 {
        let n = cfg.init_samples.min(train.len());
        let sample = prefix(&train, Some(n));
        let chunks = sample.chunks(cfg.eval_chunk);
        init_from_sample(&mut model, || {
            chunks.iter().map(|&(s, e)| sample.range(s, e).0)
        })?;
        result.init_samples_used = n;
    }
    let mut trainer = Trainer::new(
        model,
        OptimConfig::new(cfg.optimizer, cfg.lr),
        cfg.lambda_mode,
    )?;
    trainer.micro_batch = cfg.micro_batch;
    let mut sampler = BatchSampler::new(
        train.len(),
        batch_size,
        derive_seed(seed, &[2]),
        SamplingMode::Epochs,
    )?;
    let dropout_base = derive_seed(seed, &[3]);
    let mut step = 0usize;

    let outcome: Result<()> = (|| {
        for epoch in 1..=cfg.epochs {
            let mut loss_sum = 0.0;
            let mut gauged_sum: Vec<f64> = Vec::new();
            let batches = sampler.batches_per_epoch();
            for _ in 0..batches {
                let (x, y) = train.batch(&sampler.next_batch());
                let out = trainer.step(&x, &y, derive_seed(dropout_base, &[step as u64]))?;
                step += 1;
                loss_sum += out.task_loss;
                gauged_sum.resize(out.gauged.len(), 0.0);
                for (s, g) in gauged_sum.iter_mut().zip(&out.gauged) {
                    *s += g;
                }
            }
            if norm.uses_batch_stats() && cfg.finalize_bn {
                let chunks = train.chunks(cfg.eval_chunk);
                finalize_population_stats(&mut trainer.model, || {
                    chunks.iter().map(|&(s, e)| train.range(s, e).0)
                })?;
            }
            let (val_loss, val_acc) = evaluate(&mut trainer.model, &val, cfg.eval_chunk)?;
            if !val_loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "validation loss",
                });
            }
            result.trace.push(EpochPoint {
                epoch,
                train_loss: loss_sum / batches as f64,
                val_loss,
                val_acc,
                gauged: gauged_sum.iter().map(|s| s / batches as f64).collect(),
            });
        }
        Ok(())
    })();
    match outcome {
        Ok(()) => {}
        Err(e) if e.is_divergence() => {
            result.status = RunStatus::Diverged {
                batch: step,
                reason: e.to_string(),
            };
        }
        Err(e) => return Err(e),
    }
    result.model = Some(trainer.model);
    Ok(result)
}

/// Every (norm, batch size, run) cell; results in (batch size, norm, run)
/// order.
pub fn run_cifar_suite(
    cfg: &CifarConfig,
    train: &dyn Examples,
    val: &dyn Examples,
) -> Result<Vec<CifarRunResult>> {
    cfg.validate()?;
    let mut batches = cfg.batch_sizes.clone();
    batches.sort_unstable();
    batches.dedup();
    let mut norms = cfg.norms.clone();
    norms.sort_unstable();
    norms.dedup();
    let jobs: Vec<(usize, NormKind, usize)> = batches
        .iter()
        .flat_map(|&b| {
            norms
                .iter()
                .flat_map(move |&n| (0..cfg.runs).map(move |r| (b, n, r)))
        })
        .collect();
    jobs.par_iter()
        .map(|&(b, n, r)| run_cifar_once(cfg, train, val, n, b, r))
        .collect()
}
