use crate::error::{Error, Result};
use crate::network::Phase;
use crate::norm::{BatchNormState, RenormClip, Sharing};
use crate::stats::unit_count;
use crate::tape::{Reduction, Tape, Var};
use crate::tensor::Tensor;

fn view_shape(units: usize, sharing: Sharing) -> Vec<usize> {
    match sharing {
        Sharing::PerFeature => vec![units],
        Sharing::PerChannel => vec![units, 1, 1],
    }
}

fn stat_axes(sharing: Sharing) -> &'static [usize] {
    match sharing {
        Sharing::PerFeature => &[0],
        Sharing::PerChannel => &[0, 2, 3],
    }
}

/// Batch normalization. Train phase normalizes by the batch statistics
/// (gradients flow through them) and updates the moving averages; eval phase
/// uses [`BatchNormState::inference_stats`].
pub fn batchnorm_forward(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    phase: Phase,
) -> Result<Var> {
    forward(tape, input, gamma, beta, state, phase, None)
}

/// Batch renormalization: the train-phase batch estimate is corrected
/// towards the moving statistics by `r` and `d`, both clipped and both
/// treated as constants by the reverse pass.
pub fn batchrenorm_forward(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    phase: Phase,
    clip: RenormClip,
) -> Result<Var> {
    forward(tape, input, gamma, beta, state, phase, Some(clip))
}

fn forward(
    tape: &mut Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState,
    phase: Phase,
    clip: Option<RenormClip>,
) -> Result<Var> {
    let shape = tape.shape(input).to_vec();
    let units = unit_count(&shape, state.sharing)?;
    if units != state.units() {
        return Err(Error::dim(
            "batchnorm",
            format!(
                "input {shape:?} has {units} units, layer has {}",
                state.units()
            ),
        ));
    }
    let view = view_shape(units, state.sharing);
    let eps = state.epsilon;

    let xhat = match phase {
        Phase::Eval => {
            let (mean, var) = state.inference_stats();
            let mean = tape.constant(mean.clone().reshape(view.clone())?);
            let std = var.map(|v| (v + eps).sqrt()).reshape(view.clone())?;
            let std = tape.constant(std);
            let centered = tape.sub(input, mean)?;
            tape.div(centered, std)?
        }
        Phase::Train => {
            let axes = stat_axes(state.sharing);
            let count: usize = axes.iter().map(|&a| shape[a]).product();
            if count < 2 {
                return Err(Error::InsufficientBatch { count });
            }
            let mean = tape.reduce(input, Reduction::Mean, axes)?;
            let mean_v = tape.reshape(mean, &view)?;
            let centered = tape.sub(input, mean_v)?;
            let sq = tape.square(centered)?;
            let var = tape.reduce(sq, Reduction::Mean, axes)?;
            let var_eps = tape.add_scalar(var, eps)?;
            let std = tape.sqrt(var_eps)?;
            let std_v = tape.reshape(std, &view)?;
            let mut xhat = tape.div(centered, std_v)?;

            let batch_mu = tape.value(mean).clone();
            let batch_var = tape.value(var).clone();
            if let Some(clip) = clip {
                let batch_std = tape.value(std).data().to_vec();
                let (r, d) = renorm_factors(state, batch_mu.data(), &batch_std, clip);
                let r = tape.constant(Tensor::new(view.clone(), r)?);
                let d = tape.constant(Tensor::new(view.clone(), d)?);
                let scaled = tape.mul(xhat, r)?;
                xhat = tape.add(scaled, d)?;
            }
            update_moving(state, batch_mu.data(), batch_var.data());
            xhat
        }
    };

    let gamma = tape.reshape(gamma, &view)?;
    let beta = tape.reshape(beta, &view)?;
    let scaled = tape.mul(xhat, gamma)?;
    tape.add(scaled, beta)
}

/// `r = clip(σ_B/σ_mov, 1/r_max, r_max)`, `d = clip((μ_B − μ_mov)/σ_mov, ±d_max)`
fn renorm_factors(
    state: &BatchNormState,
    batch_mu: &[f64],
    batch_std: &[f64],
    clip: RenormClip,
) -> (Vec<f64>, Vec<f64>) {
    let eps = state.epsilon;
    let mov_mu = state.moving_mu.data();
    let mov_var = state.moving_var.data();
    let mut r = Vec::with_capacity(batch_mu.len());
    let mut d = Vec::with_capacity(batch_mu.len());
    for u in 0..batch_mu.len() {
        let mov_std = (mov_var[u] + eps).sqrt();
        r.push((batch_std[u] / mov_std).clamp(1.0 / clip.r_max, clip.r_max));
        d.push(((batch_mu[u] - mov_mu[u]) / mov_std).clamp(-clip.d_max, clip.d_max));
    }
    (r, d)
}

fn update_moving(state: &mut BatchNormState, batch_mu: &[f64], batch_var: &[f64]) {
    let m = state.momentum;
    for (mv, &b) in state.moving_mu.data_mut().iter_mut().zip(batch_mu) {
        *mv = m * *mv + (1.0 - m) * b;
    }
    for (mv, &b) in state.moving_var.data_mut().iter_mut().zip(batch_var) {
        *mv = m * *mv + (1.0 - m) * b;
    }
}
