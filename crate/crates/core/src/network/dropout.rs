use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::Phase;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Addresses a counter-based mask stream: the draws for row `r` of a call
/// depend only on `(seed, layer, offset + r)`, never on how the batch was
/// split across calls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutStream {
    pub seed: u64,
    pub layer: u64,
    pub offset: usize,
}

/// Inverted-dropout mask for `shape` (`[N, ...]`): each entry is 0 with
/// probability `rate` and `1/(1 − rate)` otherwise.
pub fn dropout_mask(shape: &[usize], rate: f64, stream: DropoutStream) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    let n = shape.first().copied().unwrap_or(1);
    let units: usize = shape.iter().skip(1).product();
    let keep = 1.0 / (1.0 - rate);
    let mut rng = ChaCha8Rng::seed_from_u64(stream.seed);
    rng.set_stream(stream.layer);
    let mut data = Vec::with_capacity(n * units);
    for row in 0..n {
        // one f64 consumes two 32-bit words
        rng.set_word_pos(((stream.offset + row) * units * 2) as u128);
        for _ in 0..units {
            let u: f64 = rng.random();
            data.push(if u < rate { 0.0 } else { keep });
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Identity in eval phase or at rate 0; otherwise multiplies by
/// [`dropout_mask`].
pub fn dropout(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    phase: Phase,
    stream: DropoutStream,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if phase == Phase::Eval || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask(tape.shape(x), rate, stream)?;
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}
