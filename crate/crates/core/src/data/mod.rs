//! Datasets and batch sampling.

mod cifar;
mod sampler;
mod spiral;

use crate::tensor::Tensor;

pub use cifar::{
    cifar_files, load_cifar10, read_cifar_file, write_cifar_file, CifarSet, CIFAR_RECORD,
};
pub use sampler::{BatchSampler, SamplingMode};
pub use spiral::{generate_spirals, spiral_point, write_csv, Dataset, SpiralParams};

/// Labeled instances that can be gathered into batches.
pub trait Examples: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn classes(&self) -> usize;

    /// Shape of one instance.
    fn instance_shape(&self) -> Vec<usize>;

    /// Inputs `[n, ...instance_shape]` and labels of the given rows.
    fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>);

    /// Consecutive rows `start..end`.
    fn range(&self, start: usize, end: usize) -> (Tensor, Vec<usize>) {
        let rows: Vec<usize> = (start..end).collect();
        self.batch(&rows)
    }

    /// The whole set in consecutive chunks of at most `chunk` rows.
    fn chunks(&self, chunk: usize) -> Vec<(usize, usize)> {
        let chunk = chunk.max(1);
        (0..self.len())
            .step_by(chunk)
            .map(|s| (s, (s + chunk).min(self.len())))
            .collect()
    }
}
