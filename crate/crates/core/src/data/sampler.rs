use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every batch is an independent uniform subset drawn without
    /// replacement.
    Subsets,
    /// Shuffle once per epoch, then take consecutive slices; a trailing
    /// partial batch is dropped.
    Epochs,
}

/// Deterministic stream of row-index batches.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
    batch_size: usize,
    mode: SamplingMode,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl BatchSampler {
    pub fn new(len: usize, batch_size: usize, seed: u64, mode: SamplingMode) -> Result<Self> {
        if batch_size == 0 || batch_size > len {
            return Err(Error::Config(format!(
                "batch size {batch_size} invalid for a dataset of {len}"
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            batch_size,
            mode,
            order: (0..len).collect(),
            cursor: len,
            epoch: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Completed epochs (epoch mode).
    pub fn epoch(&self) -> usize {
        self.epoch.saturating_sub(1)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        match self.mode {
            SamplingMode::Subsets => {
                index::sample(&mut self.rng, self.len, self.batch_size).into_vec()
            }
            SamplingMode::Epochs => {
                if self.cursor + self.batch_size > self.len {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                    self.epoch += 1;
                }
                let b = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
                self.cursor += self.batch_size;
                b
            }
        }
    }

    pub fn sample_batches(&mut self, count: usize) -> Vec<Vec<usize>> {
        (0..count).map(|_| self.next_batch()).collect()
    }
}
