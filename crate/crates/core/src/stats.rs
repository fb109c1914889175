//! Streaming per-unit mean/variance (Welford).

use crate::error::{Error, Result};
use crate::norm::Sharing;
use crate::tensor::Tensor;

/// Running mean and maximum-likelihood variance for each unit of a layer.
#[derive(Clone, Debug)]
pub struct UnitStats {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl UnitStats {
    pub fn new(units: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; units],
            m2: vec![0.0; units],
        }
    }

    pub fn units(&self) -> usize {
        self.mean.len()
    }

    /// Number of values seen per unit.
    pub fn count(&self) -> u64 {
        self.count
    }

    /// Folds in every value of a `[N, F]` (per-feature) or `[N, C, H, W]`
    /// (per-channel) batch.
    pub fn push_batch(&mut self, x: &Tensor, sharing: Sharing) -> Result<()> {
        let units = unit_count(x.shape(), sharing)?;
        if units != self.units() {
            return Err(Error::dim(
                "unit_stats",
                format!(
                    "batch {:?} has {units} units, expected {}",
                    x.shape(),
                    self.units()
                ),
            ));
        }
        let per_unit = match sharing {
            Sharing::PerFeature => 1,
            Sharing::PerChannel => x.shape()[2..].iter().product(),
        };
        let instance = units * per_unit;
        for row in x.data().chunks(instance) {
            // one "observation" per (instance, position); every unit sees the
            // same number of observations so a single counter suffices
            for pos in 0..per_unit {
                self.count += 1;
                let n = self.count as f64;
                for u in 0..units {
                    let v = row[u * per_unit + pos];
                    let delta = v - self.mean[u];
                    self.mean[u] += delta / n;
                    self.m2[u] += delta * (v - self.mean[u]);
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population (divide-by-n) variance.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.m2.iter().map(|m| (m / n).max(0.0)).collect()
    }

    pub fn std(&self) -> Vec<f64> {
        self.variance().into_iter().map(f64::sqrt).collect()
    }
}

/// Number of normalized units of an activation tensor under a sharing rule.
pub fn unit_count(shape: &[usize], sharing: Sharing) -> Result<usize> {
    match (sharing, shape.len()) {
        (Sharing::PerFeature, 2) => Ok(shape[1]),
        (Sharing::PerChannel, 4) => Ok(shape[1]),
        _ => Err(Error::dim(
            "normalization",
            format!("{sharing:?} sharing cannot normalize shape {shape:?}"),
        )),
    }
}
