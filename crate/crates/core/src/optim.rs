//! Adam and AMSGrad.
//!
//! With adaptive gradient normalization a constant loss multiplier cancels
//! once the second-moment estimate has warmed up, so λ as a loss multiplier
//! mostly shapes early transients. [`LambdaMode::LearningRate`] applies λ to
//! the step size of μ and σ instead.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamInfo;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Amsgrad,
}

/// Where a batchless layer's λ acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Multiplies the layer's likelihood loss.
    #[default]
    LossMultiplier,
    /// Multiplies the learning rate of the layer's μ and σ parameters.
    LearningRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimConfig {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimConfig,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Running maximum of `v`; AMSGrad only.
    pub v_max: Option<Vec<Tensor>>,
    /// Per-parameter learning-rate multiplier.
    pub lr_scale: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimConfig, shapes: &[Vec<usize>]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Self {
            config,
            t: 0,
            m: zeros(),
            v: zeros(),
            v_max: (config.kind == OptimizerKind::Amsgrad).then(zeros),
            lr_scale: vec![1.0; shapes.len()],
        }
    }

    /// State for a model's parameters; in [`LambdaMode::LearningRate`] the
    /// μ and σ parameters of batchless layers get their layer's λ as
    /// learning-rate multiplier.
    pub fn for_params(config: OptimConfig, info: &[ParamInfo], mode: LambdaMode) -> Self {
        let shapes: Vec<Vec<usize>> = info.iter().map(|p| p.shape.clone()).collect();
        let mut state = Self::new(config, &shapes);
        if mode == LambdaMode::LearningRate {
            for (scale, p) in state.lr_scale.iter_mut().zip(info) {
                if let Some(lambda) = p.lambda {
                    *scale = lambda;
                }
            }
        }
        state
    }

    /// One update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "optimizer",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.t += 1;
        let OptimConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let step = lr * self.lr_scale[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let mut vmax = self.v_max.as_mut().map(|vm| vm[i].data_mut());
            let theta = params[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let second = match vmax.as_mut() {
                    Some(vm) => {
                        vm[j] = vm[j].max(v[j]);
                        vm[j]
                    }
                    None => v[j],
                };
                theta[j] -= step * (m[j] / bc1) / ((second / bc2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// `θ ← θ − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if state.v_max.is_some() {
        return Err(Error::Config("adam_step on an AMSGrad state".into()));
    }
    state.step(params, grads)
}

/// Adam with the running maximum of `v` in the denominator.
pub fn amsgrad_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if state.v_max.is_none() {
        return Err(Error::Config("amsgrad_step on an Adam state".into()));
    }
    state.step(params, grads)
}

/// Decay strengths of the parameters that carry one.
pub fn decay_map(info: &[ParamInfo]) -> BTreeMap<String, f64> {
    info.iter()
        .filter(|p| p.decay > 0.0)
        .map(|p| (p.name.clone(), p.decay))
        .collect()
}

/// `g ← g + decay·θ` for each parameter named in `decay`. Parameters of
/// normalization layers are never decayed.
pub fn apply_weight_decay(
    grads: &mut [Tensor],
    params: &[&Tensor],
    info: &[ParamInfo],
    decay: &BTreeMap<String, f64>,
) -> Result<()> {
    for (name, &d) in decay {
        let i = info.iter().position(|p| &p.name == name).ok_or_else(|| {
            Error::Config(format!("weight decay names unknown parameter {name:?}"))
        })?;
        if info[i].norm || d == 0.0 {
            continue;
        }
        for (g, &t) in grads[i].data_mut().iter_mut().zip(params[i].data()) {
            *g += d * t;
        }
    }
    Ok(())
}
