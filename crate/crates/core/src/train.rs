//! Gradient computation and parameter updates.
//!
//! A batch can be processed whole or as consecutive slices whose gradients
//! are summed. For models without batch-statistics layers the two give
//! bitwise-identical gradients: every loss term is averaged with the full
//! batch's normalizer, dropout masks are addressed by row index, and every
//! reduction over the batch happens in row order.

use std::collections::BTreeMap;

use crate::data::Examples;
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, Model, Phase};
use crate::optim::{apply_weight_decay, decay_map, LambdaMode, OptimConfig, OptimizerState};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Gradients and losses of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGradients {
    /// One tensor per model parameter, in [`Model::params`] order.
    pub grads: Vec<Tensor>,
    /// Cross-entropy only.
    pub task_loss: f64,
    /// Cross-entropy plus likelihood terms.
    pub total_loss: f64,
    /// Gauged metric per batchless layer.
    pub gauged: Vec<f64>,
}

fn slice_gradients(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    opts: ForwardOptions,
    batch: usize,
) -> Result<BatchGradients> {
    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        x,
        ForwardOptions {
            loss_batch: Some(batch),
            ..opts
        },
    )?;
    let loss = model.total_loss(&mut tape, &pass, labels, Some(batch as f64), false)?;
    let mut g = tape.backward(loss.total)?;
    let grads = pass
        .params
        .iter()
        .map(|&v| g.take(v).expect("every parameter has a gradient"))
        .collect();
    Ok(BatchGradients {
        grads,
        task_loss: tape.value(loss.task).item(),
        total_loss: tape.value(loss.total).item(),
        gauged: pass.gauged,
    })
}

/// Gradients of the batch loss (without weight decay). With `micro_batch`
/// set, the batch is split into slices of that many rows and their
/// gradients are summed; losses and gauged metrics are summed and
/// row-weighted respectively.
pub fn batch_gradients(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    phase: Phase,
    dropout_seed: u64,
    lambda_mode: LambdaMode,
    micro_batch: Option<usize>,
) -> Result<BatchGradients> {
    let n = labels.len();
    let opts = ForwardOptions {
        phase,
        dropout_seed,
        instance_offset: 0,
        loss_batch: Some(n),
        lambda_in_loss: lambda_mode == LambdaMode::LossMultiplier,
    };
    let micro = match micro_batch {
        None => return slice_gradients(model, x, labels, opts, n),
        Some(0) => return Err(Error::Config("micro-batch size must be positive".into())),
        Some(m) if m >= n => return slice_gradients(model, x, labels, opts, n),
        Some(m) => m,
    };
    let mut acc: Option<BatchGradients> = None;
    for start in (0..n).step_by(micro) {
        let end = (start + micro).min(n);
        let part = slice_gradients(
            model,
            &x.slice_rows(start, end),
            &labels[start..end],
            ForwardOptions {
                instance_offset: start,
                ..opts
            },
            n,
        )?;
        let w = (end - start) as f64 / n as f64;
        acc = Some(match acc {
            None => BatchGradients {
                gauged: part.gauged.iter().map(|g| g * w).collect(),
                ..part
            },
            Some(mut a) => {
                for (s, p) in a.grads.iter_mut().zip(&part.grads) {
                    for (u, v) in s.data_mut().iter_mut().zip(p.data()) {
                        *u += v;
                    }
                }
                a.task_loss += part.task_loss;
                a.total_loss += part.total_loss;
                for (s, p) in a.gauged.iter_mut().zip(&part.gauged) {
                    *s += p * w;
                }
                a
            }
        });
    }
    Ok(acc.expect("n > 0"))
}

/// Model, optimizer and the settings of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub decay: BTreeMap<String, f64>,
    pub lambda_mode: LambdaMode,
    pub micro_batch: Option<usize>,
}

impl Trainer {
    pub fn new(model: Model, config: OptimConfig, lambda_mode: LambdaMode) -> Result<Self> {
        config.validate()?;
        let info = model.param_info();
        Ok(Self {
            optimizer: OptimizerState::for_params(config, &info, lambda_mode),
            decay: decay_map(&info),
            model,
            lambda_mode,
            micro_batch: None,
        })
    }

    /// One optimizer step on a batch. Errors on non-finite losses and on σ
    /// falling below the floor.
    pub fn step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        dropout_seed: u64,
    ) -> Result<BatchGradients> {
        let mut out = batch_gradients(
            &mut self.model,
            x,
            labels,
            Phase::Train,
            dropout_seed,
            self.lambda_mode,
            self.micro_batch,
        )?;
        if !out.total_loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        let info = self.model.param_info();
        apply_weight_decay(&mut out.grads, &self.model.params(), &info, &self.decay)?;
        if out.grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        self.optimizer
            .step(&mut self.model.params_mut(), &out.grads)?;
        if self.model.params().iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer step",
            });
        }
        self.model.check_sigma()?;
        Ok(out)
    }
}

/// Eval-phase mean cross-entropy and top-1 accuracy, in chunks of `chunk`
/// rows. Likelihood terms are not included.
pub fn evaluate(model: &mut Model, data: &dyn Examples, chunk: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Contract("evaluation on an empty dataset".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (s, e) in data.chunks(chunk) {
        let (x, y) = data.range(s, e);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x, ForwardOptions::eval())?;
        let ce = tape.softmax_cross_entropy_normalized(pass.logits, &y, 1.0)?;
        loss += tape.value(ce).item();
        let logits = tape.value(pass.logits);
        let c = logits.shape()[1];
        for (row, &label) in logits.data().chunks(c).zip(&y) {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            correct += (best == label) as usize;
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, correct as f64 / n))
}
