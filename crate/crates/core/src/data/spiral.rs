use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Examples;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shape of the three intertwined spirals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpiralParams {
    pub r_max: f64,
    pub turns: f64,
    /// Noise std at the outer end; grows linearly with `t`.
    pub noise: f64,
}

/// Defaults are calibrated so an unnormalized network stays near chance at
/// batch size 1 while validation losses at batch size 16 fall near 0.3.
impl Default for SpiralParams {
    fn default() -> Self {
        Self {
            r_max: 1.0,
            turns: 0.85,
            noise: 0.25,
        }
    }
}

/// Noiseless point of arm `class` at curve parameter `t ∈ [0, 1]`.
pub fn spiral_point(class: usize, t: f64, p: &SpiralParams) -> [f64; 2] {
    let r = p.r_max * t;
    let theta = p.turns * 2.0 * PI * t + 2.0 * PI * class as f64 / 3.0;
    [r * theta.cos(), r * theta.sin()]
}

/// In-memory dataset of flat feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, F]`
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Curve parameter of each spiral point.
    pub t: Vec<f64>,
}

impl Examples for Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn instance_shape(&self) -> Vec<usize> {
        self.inputs.shape()[1..].to_vec()
    }

    fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.gather_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }
}

impl Dataset {
    /// Axis-aligned bounding box `[(x_min, x_max), (y_min, y_max)]`.
    pub fn bounds(&self) -> [(f64, f64); 2] {
        let mut b = [(f64::INFINITY, f64::NEG_INFINITY); 2];
        for row in self.inputs.data().chunks(2) {
            for d in 0..2 {
                b[d].0 = b[d].0.min(row[d]);
                b[d].1 = b[d].1.max(row[d]);
            }
        }
        b
    }
}

fn generate(per_class: usize, rng: &mut ChaCha8Rng, p: &SpiralParams) -> Dataset {
    let mut data = Vec::with_capacity(per_class * 6);
    let mut labels = Vec::with_capacity(per_class * 3);
    let mut ts = Vec::with_capacity(per_class * 3);
    for class in 0..3 {
        for _ in 0..per_class {
            let t: f64 = rng.random();
            let [x, y] = spiral_point(class, t, p);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            data.push(x + p.noise * t * nx);
            data.push(y + p.noise * t * ny);
            labels.push(class);
            ts.push(t);
        }
    }
    Dataset {
        inputs: Tensor::new(vec![per_class * 3, 2], data).expect("counts are positive"),
        labels,
        classes: 3,
        t: ts,
    }
}

/// Training and validation spirals, class-major. Each split has its own
/// random stream so changing one count leaves the other split unchanged.
pub fn generate_spirals(
    train_per_class: usize,
    val_per_class: usize,
    seed: u64,
    params: &SpiralParams,
) -> Result<(Dataset, Dataset)> {
    if train_per_class == 0 || val_per_class == 0 {
        return Err(Error::Config("spiral counts must be positive".into()));
    }
    if !(params.r_max > 0.0 && params.turns.is_finite() && params.noise >= 0.0) {
        return Err(Error::Config(format!(
            "invalid spiral parameters {params:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let train = generate(train_per_class, &mut rng, params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let val = generate(val_per_class, &mut rng, params);
    Ok((train, val))
}

/// Writes `x,y,label` rows.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y", "label"])?;
    for (row, label) in data.inputs.data().chunks(2).zip(&data.labels) {
        w.write_record([
            format!("{:e}", row[0]),
            format!("{:e}", row[1]),
            label.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
