use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_spirals, BatchSampler, Dataset, Examples, SamplingMode, SpiralParams};
use crate::error::{Error, Result};
use crate::experiments::{
    derive_seed, fluctuation, grid_sites, is_applicable, ConvergenceDetector, RunStatus,
};
use crate::network::{build_spiral_mlp, ArchConfig, InitWidth, Model, NormKind};
use crate::norm::{finalize_population_stats, RenormClip};
use crate::optim::{LambdaMode, OptimConfig, OptimizerKind};
use crate::tensor::Tensor;
use crate::train::{evaluate, Trainer};

const EVAL_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpiralConfig {
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
    pub renorm: RenormClip,
    /// Rolling-median window of the stopping rule.
    pub window: usize,
    /// Batches without a new median low before stopping.
    pub patience: usize,
    /// Training batches over which output snapshots are taken.
    pub fluctuation_batches: usize,
    /// Measurement sites form a `grid × grid` lattice.
    pub grid: usize,
    /// Hard cap on batches before the fluctuation phase.
    pub max_batches: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub spiral: SpiralParams,
    /// Accumulate gradients over slices of this many instances.
    pub micro_batch: Option<usize>,
    /// Keep the per-batch task-loss trace.
    pub trace: bool,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self {
            norms: NormKind::ALL.to_vec(),
            batch_sizes: vec![1, 2, 4, 8, 16, 32, 64],
            runs: 10,
            seed: 0,
            lr: 0.01,
            optimizer: OptimizerKind::Amsgrad,
            lambda: 0.1,
            lambda_mode: LambdaMode::LossMultiplier,
            drop_rate: 0.1,
            weight_decay: 1e-6,
            init_width: InitWidth::FullSupport,
            renorm: RenormClip::default(),
            window: 15,
            patience: 1000,
            fluctuation_batches: 1000,
            grid: 8,
            max_batches: 20_000,
            train_per_class: 20_000,
            val_per_class: 4_000,
            spiral: SpiralParams::default(),
            micro_batch: None,
            trace: false,
        }
    }
}

impl SpiralConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.norms.is_empty() || self.batch_sizes.is_empty() {
            return fail("at least one norm kind and one batch size are required");
        }
        if self.batch_sizes.contains(&0) {
            return fail("batch sizes must be ≥ 1");
        }
        if self.runs == 0 {
            return fail("runs must be ≥ 1");
        }
        if self.window == 0 || self.patience < self.window {
            return fail("patience must be ≥ window ≥ 1");
        }
        if self.fluctuation_batches == 0 || self.grid == 0 || self.max_batches == 0 {
            return fail("fluctuation batches, grid and max batches must be positive");
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail("drop rate must be in [0, 1)");
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lambda and weight decay must be ≥ 0");
        }
        let max_batch = *self.batch_sizes.iter().max().expect("non-empty");
        if max_batch > 3 * self.train_per_class {
            return fail("batch size exceeds the training set");
        }
        OptimConfig::new(self.optimizer, self.lr).validate()
    }

    fn arch(&self, norm: NormKind, seed: u64) -> ArchConfig {
        ArchConfig {
            norm,
            seed,
            drop_rate: self.drop_rate,
            lambda: self.lambda,
            init_width: self.init_width,
            weight_decay: self.weight_decay,
            renorm: self.renorm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpiralRunResult {
    pub norm: NormKind,
    pub batch_size: usize,
    pub run: usize,
    pub seed: u64,
    pub status: RunStatus,
    /// Batch index at which the stopping rule fired; `None` if the cap hit.
    pub converged_at: Option<usize>,
    /// All optimizer steps, fluctuation phase included.
    pub batches_trained: usize,
    pub fluctuation: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    /// Per-batch task loss (when tracing).
    pub loss_trace: Vec<f64>,
    /// Gauged metric per batchless layer, every 100 batches.
    pub gauged_trace: Vec<(usize, Vec<f64>)>,
    pub model: Option<Model>,
}

impl SpiralRunResult {
    fn empty(norm: NormKind, batch_size: usize, run: usize, seed: u64, status: RunStatus) -> Self {
        Self {
            norm,
            batch_size,
            run,
            seed,
            status,
            converged_at: None,
            batches_trained: 0,
            fluctuation: None,
            val_loss: None,
            val_acc: None,
            loss_trace: Vec::new(),
            gauged_trace: Vec::new(),
            model: None,
        }
    }
}

/// Continues training for `batches` steps, snapshotting the eval-phase
/// output distribution at `sites` after each step, and returns the
/// fluctuation score.
pub fn measure_fluctuation(
    trainer: &mut Trainer,
    sites: &Tensor,
    batches: usize,
    mut next: impl FnMut(usize) -> (Tensor, Vec<usize>, u64),
) -> Result<f64> {
    let mut snapshots = Vec::with_capacity(batches);
    for i in 0..batches {
        let (x, y, seed) = next(i);
        trainer.step(&x, &y, seed)?;
        snapshots.push(trainer.model.predict_proba(sites)?);
    }
    fluctuation(&snapshots)
}

/// One run: train to convergence, measure fluctuation, evaluate.
pub fn run_spiral_once(
    cfg: &SpiralConfig,
    train: &Dataset,
    val: &Dataset,
    norm: NormKind,
    batch_size: usize,
    run: usize,
) -> Result<SpiralRunResult> {
    // norm kinds share seeds so each run index compares like with like
    let seed = derive_seed(cfg.seed, &[batch_size as u64, run as u64]);
    if !is_applicable(norm, batch_size) {
        return Ok(SpiralRunResult::empty(
            norm,
            batch_size,
            run,
            seed,
            RunStatus::Inapplicable,
        ));
    }
    let model = build_spiral_mlp(&cfg.arch(norm, derive_seed(seed, &[1])))?;
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
        SamplingMode::Subsets,
    )?;
    let dropout_base = derive_seed(seed, &[3]);
    let mut result = SpiralRunResult::empty(norm, batch_size, run, seed, RunStatus::Completed);
    let mut step = 0usize;

    let outcome: Result<()> = (|| {
        let mut detector = ConvergenceDetector::new(cfg.window, cfg.patience);
        while step < cfg.max_batches {
            let (x, y) = train.batch(&sampler.next_batch());
            let out = trainer.step(&x, &y, derive_seed(dropout_base, &[step as u64]))?;
            step += 1;
            if cfg.trace {
                result.loss_trace.push(out.task_loss);
            }
            if step.is_multiple_of(100) && !out.gauged.is_empty() {
                result.gauged_trace.push((step, out.gauged.clone()));
            }
            if let Some(t) = detector.push(out.task_loss) {
                result.converged_at = Some(t);
                break;
            }
        }
        let sites = grid_sites(train.bounds(), cfg.grid)?;
        let f = measure_fluctuation(&mut trainer, &sites, cfg.fluctuation_batches, |_| {
            let (x, y) = train.batch(&sampler.next_batch());
            let s = derive_seed(dropout_base, &[step as u64]);
            step += 1;
            (x, y, s)
        })?;
        result.fluctuation = Some(f);
        if norm.uses_batch_stats() {
            let chunks = train.chunks(EVAL_CHUNK);
            finalize_population_stats(&mut trainer.model, || {
                chunks.iter().map(|&(s, e)| train.range(s, e).0)
            })?;
        }
        let (loss, acc) = evaluate(&mut trainer.model, val, EVAL_CHUNK)?;
        result.val_loss = Some(loss);
        result.val_acc = Some(acc);
        Ok(())
    })();
    result.batches_trained = step;
    match outcome {
        Ok(()) => {}
        Err(e) if e.is_divergence() => {
            result.status = RunStatus::Diverged {
                batch: step,
                reason: e.to_string(),
            };
            result.fluctuation = None;
        }
        Err(e) => return Err(e),
    }
    result.model = Some(trainer.model);
    Ok(result)
}

/// Every (norm, batch size, run) cell on datasets generated from the config
/// seed. Cells run in parallel; results come back in (batch size, norm,
/// run) order.
pub fn run_spiral_suite(cfg: &SpiralConfig) -> Result<Vec<SpiralRunResult>> {
    cfg.validate()?;
    let (train, val) = generate_spirals(
        cfg.train_per_class,
        cfg.val_per_class,
        derive_seed(cfg.seed, &[0xDA7A]),
        &cfg.spiral,
    )?;
    run_spiral_suite_on(cfg, &train, &val)
}

pub fn run_spiral_suite_on(
    cfg: &SpiralConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<Vec<SpiralRunResult>> {
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
        .map(|&(b, n, r)| run_spiral_once(cfg, train, val, n, b, r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SpiralConfig {
        SpiralConfig {
            norms: vec![NormKind::Bn, NormKind::BinLog],
            batch_sizes: vec![1, 4],
            runs: 1,
            seed: 3,
            window: 5,
            patience: 20,
            fluctuation_batches: 10,
            grid: 3,
            max_batches: 200,
            train_per_class: 200,
            val_per_class: 50,
            trace: true,
            ..Default::default()
        }
    }

    #[test]
    fn suite_is_reproducible_and_marks_inapplicable() {
        let a = run_spiral_suite(&tiny()).unwrap();
        let b = run_spiral_suite(&tiny()).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.val_loss, y.val_loss);
            assert_eq!(x.fluctuation, y.fluctuation);
            assert_eq!(x.loss_trace, y.loss_trace);
        }
        let bn1 = a
            .iter()
            .find(|r| r.norm == NormKind::Bn && r.batch_size == 1)
            .unwrap();
        assert_eq!(bn1.status, RunStatus::Inapplicable);
        let done = a
            .iter()
            .filter(|r| r.status == RunStatus::Completed)
            .count();
        assert_eq!(done, 3);
        assert!(a.iter().all(|r| r.fluctuation.is_none_or(|f| f >= 0.0)));
    }

    #[test]
    fn cell_results_do_not_depend_on_order() {
        let cfg = tiny();
        let all = run_spiral_suite(&cfg).unwrap();
        let reversed = SpiralConfig {
            norms: vec![NormKind::BinLog],
            batch_sizes: vec![4],
            ..cfg
        };
        let one = run_spiral_suite(&reversed).unwrap();
        let same = all
            .iter()
            .find(|r| r.norm == NormKind::BinLog && r.batch_size == 4)
            .unwrap();
        assert_eq!(one[0].val_loss, same.val_loss);
        assert_eq!(one[0].fluctuation, same.fluctuation);
    }

    #[test]
    fn invalid_config() {
        let mut c = tiny();
        c.patience = 2;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.batch_sizes = vec![0];
        assert!(c.validate().is_err());
    }
}
