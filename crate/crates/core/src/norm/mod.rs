//! Normalization layers.
//!
//! Batchless normalization keeps a learnable Gaussian (μ, σ) per unit and
//! trains it by gradient descent on the negative log-likelihood of the
//! incoming activations. Batch normalization and batch renormalization are
//! the batch-statistics baselines.

mod batchless;
mod batchnorm;
mod init;
mod migrate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batchless::{
    batchless_forward, exact_nll, gauged_losses, gauged_metric, BatchlessOutput, BatchlessVars,
    NllWeighting,
};
pub use batchnorm::{batchnorm_forward, batchrenorm_forward};
pub use init::{finalize_population_stats, init_from_sample, LayerInitReport};
pub use migrate::{migrate_from_batchnorm, migrate_from_plain};

/// Smallest |σ| a batchless layer accepts before reporting a degenerate
/// layer.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Default batch-norm variance epsilon.
pub const BN_EPSILON: f64 = 1e-5;

/// Default momentum of batch-norm moving averages.
pub const BN_MOMENTUM: f64 = 0.99;

/// How the learnable σ of a batchless layer is stored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// `p = σ`
    Direct,
    /// `p = log σ`
    Log,
    /// `p = 1 / σ`
    Inverse,
}

impl SigmaMode {
    /// σ for a single parameter value. `Inverse` with `p == 0` gives infinity;
    /// use [`sigma_from_param`] for the checked version.
    pub fn sigma(self, p: f64) -> f64 {
        match self {
            SigmaMode::Direct => p,
            SigmaMode::Log => p.exp(),
            SigmaMode::Inverse => 1.0 / p,
        }
    }

    /// Parameter value that encodes a positive `sigma`.
    pub fn param_for(self, sigma: f64) -> f64 {
        match self {
            SigmaMode::Direct => sigma,
            SigmaMode::Log => sigma.ln(),
            SigmaMode::Inverse => 1.0 / sigma,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SigmaMode::Direct => "direct",
            SigmaMode::Log => "log",
            SigmaMode::Inverse => "inverse",
        }
    }
}

/// Whether statistics are kept per feature (dense activations) or shared by
/// all positions of a channel (convolutional activations).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    PerFeature,
    PerChannel,
}

/// σ for every unit. DIRECT passes the sign through unchanged.
pub fn sigma_from_param(p: &[f64], mode: SigmaMode) -> Result<Vec<f64>> {
    p.iter()
        .enumerate()
        .map(|(unit, &v)| {
            if mode == SigmaMode::Inverse && v == 0.0 {
                Err(Error::DegenerateParameter { unit })
            } else {
                Ok(mode.sigma(v))
            }
        })
        .collect()
}

/// Learnable state of one batchless normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormLayerState {
    pub mu: Tensor,
    pub sigma_param: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mode: SigmaMode,
    /// Multiplier on this layer's likelihood loss.
    pub lambda: f64,
    pub sharing: Sharing,
}

impl NormLayerState {
    /// μ = 0, σ = 1, γ = 1, β = 0.
    pub fn new(units: usize, mode: SigmaMode, lambda: f64, sharing: Sharing) -> Self {
        Self {
            mu: Tensor::zeros(&[units]),
            sigma_param: Tensor::full(&[units], mode.param_for(1.0)),
            gamma: Tensor::ones(&[units]),
            beta: Tensor::zeros(&[units]),
            mode,
            lambda,
            sharing,
        }
    }

    pub fn units(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Result<Vec<f64>> {
        sigma_from_param(self.sigma_param.data(), self.mode)
    }

    /// Errors if any |σ| is below [`SIGMA_FLOOR`] or not finite.
    pub fn check_sigma(&self) -> Result<Vec<f64>> {
        let sigma = self.sigma()?;
        for (unit, &s) in sigma.iter().enumerate() {
            if !(s.abs() >= SIGMA_FLOOR) || !s.is_finite() {
                return Err(Error::DegenerateSigma {
                    unit,
                    value: s,
                    floor: SIGMA_FLOOR,
                });
            }
        }
        Ok(sigma)
    }

    /// Sets μ and σ, encoding σ in this layer's parameterization.
    pub fn set_statistics(&mut self, mu: &[f64], sigma: &[f64]) {
        assert_eq!(mu.len(), self.units());
        assert_eq!(sigma.len(), self.units());
        self.mu.data_mut().copy_from_slice(mu);
        for (p, &s) in self.sigma_param.data_mut().iter_mut().zip(sigma) {
            *p = self.mode.param_for(s);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.units();
        for (name, t) in [
            ("sigma_param", &self.sigma_param),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
        ] {
            if t.rank() != 1 || t.len() != n {
                return Err(Error::dim(
                    "batchless",
                    format!("{name} has shape {:?}, expected [{n}]", t.shape()),
                ));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be ≥ 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Clip bounds for batch renormalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenormClip {
    pub r_max: f64,
    pub d_max: f64,
}

impl Default for RenormClip {
    fn default() -> Self {
        Self {
            r_max: 3.0,
            d_max: 5.0,
        }
    }
}

/// Batch normalization (optionally renormalization) state.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub moving_mu: Tensor,
    pub moving_var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    pub population_mu: Option<Tensor>,
    pub population_var: Option<Tensor>,
    pub sharing: Sharing,
    /// `Some` for batch renormalization.
    pub renorm: Option<RenormClip>,
}

impl BatchNormState {
    pub fn new(units: usize, sharing: Sharing, renorm: Option<RenormClip>) -> Self {
        Self {
            moving_mu: Tensor::zeros(&[units]),
            moving_var: Tensor::ones(&[units]),
            gamma: Tensor::ones(&[units]),
            beta: Tensor::zeros(&[units]),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            population_mu: None,
            population_var: None,
            sharing,
            renorm,
        }
    }

    pub fn units(&self) -> usize {
        self.gamma.len()
    }

    /// Mean and variance used in the eval phase: finalized population
    /// statistics when present, moving averages otherwise.
    pub fn inference_stats(&self) -> (&Tensor, &Tensor) {
        match (&self.population_mu, &self.population_var) {
            (Some(m), Some(v)) => (m, v),
            _ => (&self.moving_mu, &self.moving_var),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.units();
        for (name, t) in [
            ("moving_mu", Some(&self.moving_mu)),
            ("moving_var", Some(&self.moving_var)),
            ("beta", Some(&self.beta)),
            ("population_mu", self.population_mu.as_ref()),
            ("population_var", self.population_var.as_ref()),
        ] {
            if let Some(t) = t {
                if t.rank() != 1 || t.len() != n {
                    return Err(Error::dim(
                        "batchnorm",
                        format!("{name} has shape {:?}, expected [{n}]", t.shape()),
                    ));
                }
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("batch-norm epsilon must be > 0".into()));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::Config(
                "batch-norm momentum must be in (0, 1)".into(),
            ));
        }
        if self.moving_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Config("negative moving variance".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_modes() {
        assert_eq!(sigma_from_param(&[0.0], SigmaMode::Log).unwrap(), vec![1.0]);
        assert_eq!(
            sigma_from_param(&[2.0], SigmaMode::Inverse).unwrap(),
            vec![0.5]
        );
        assert_eq!(
            sigma_from_param(&[-1.5], SigmaMode::Direct).unwrap(),
            vec![-1.5]
        );
        assert!(matches!(
            sigma_from_param(&[1.0, 0.0], SigmaMode::Inverse),
            Err(Error::DegenerateParameter { unit: 1 })
        ));
    }

    #[test]
    fn default_state_encodes_unit_sigma() {
        for (mode, p) in [
            (SigmaMode::Direct, 1.0),
            (SigmaMode::Log, 0.0),
            (SigmaMode::Inverse, 1.0),
        ] {
            let s = NormLayerState::new(3, mode, 0.1, Sharing::PerFeature);
            assert_eq!(s.sigma_param.data(), &[p; 3]);
            assert_eq!(s.sigma().unwrap(), vec![1.0; 3]);
            assert_eq!(s.gamma.data(), &[1.0; 3]);
            assert_eq!(s.beta.data(), &[0.0; 3]);
            assert_eq!(s.mu.data(), &[0.0; 3]);
        }
    }

    #[test]
    fn floor_is_enforced() {
        let mut s = NormLayerState::new(2, SigmaMode::Direct, 0.1, Sharing::PerFeature);
        s.sigma_param.data_mut()[1] = 1e-13;
        assert!(matches!(
            s.check_sigma(),
            Err(Error::DegenerateSigma { unit: 1, .. })
        ));
        s.sigma_param.data_mut()[1] = -1e-3;
        assert!(s.check_sigma().is_ok());
    }
}
