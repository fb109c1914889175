use crate::error::{Error, Result};
use crate::norm::{NormLayerState, Sharing, SigmaMode};
use crate::stats::unit_count;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tape handles of one batchless layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BatchlessVars {
    pub mu: Var,
    pub sigma_param: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl BatchlessVars {
    pub fn register(tape: &mut Tape, state: &NormLayerState) -> Self {
        Self {
            mu: tape.param(state.mu.clone()),
            sigma_param: tape.param(state.sigma_param.clone()),
            gamma: tape.param(state.gamma.clone()),
            beta: tape.param(state.beta.clone()),
        }
    }
}

/// How a layer's likelihood loss is weighted and averaged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllWeighting {
    /// Multiply the loss by λ. Off when λ is applied to the learning rate of
    /// μ and σ instead.
    pub lambda_in_loss: bool,
    /// Activation count the layer mean divides by; `None` uses the count of
    /// this call. Gradient accumulation over slices of a batch passes the
    /// full batch's count.
    pub count: Option<usize>,
}

impl Default for NllWeighting {
    fn default() -> Self {
        Self {
            lambda_in_loss: true,
            count: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchlessOutput {
    pub output: Var,
    /// Per-layer mean of `λ·(½((sg a − μ)/σ)² + log|σ|)`; the constant
    /// `½ log 2π` is left out.
    pub nll: Var,
    /// Mean squared gauged loss. Monitoring only, never differentiated.
    pub gauged_metric: f64,
}

/// Adds back the `λ·½ log 2π` constant dropped from the training loss,
/// giving the actual mean negative log-likelihood per activation.
pub fn exact_nll(nll: f64, lambda: f64) -> f64 {
    nll + lambda * 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Broadcasts a per-unit parameter over the activation shape.
fn expand(tape: &mut Tape, v: Var, shape: &[usize], sharing: Sharing) -> Result<Var> {
    let v = match sharing {
        Sharing::PerFeature => v,
        Sharing::PerChannel => {
            let units = tape.shape(v)[0];
            tape.reshape(v, &[units, 1, 1])?
        }
    };
    tape.broadcast_to(v, shape)
}

/// Batchless normalization of `input`.
///
/// The output `(a − sg μ) / sg σ · γ + β` sends gradient to the input, γ and
/// β but never to μ or σ. The likelihood term `(sg a − μ) / σ` sends
/// gradient to μ and σ but never to the input.
pub fn batchless_forward(
    tape: &mut Tape,
    input: Var,
    vars: BatchlessVars,
    state: &NormLayerState,
    weighting: NllWeighting,
) -> Result<BatchlessOutput> {
    let shape = tape.shape(input).to_vec();
    let units = unit_count(&shape, state.sharing)?;
    if units != state.units() {
        return Err(Error::dim(
            "batchless",
            format!(
                "input {shape:?} has {units} units, layer has {}",
                state.units()
            ),
        ));
    }
    state.check_sigma()?;

    let mu = expand(tape, vars.mu, &shape, state.sharing)?;
    let p = expand(tape, vars.sigma_param, &shape, state.sharing)?;
    let gamma = expand(tape, vars.gamma, &shape, state.sharing)?;
    let beta = expand(tape, vars.beta, &shape, state.sharing)?;
    let sigma = match state.mode {
        SigmaMode::Direct => p,
        SigmaMode::Log => tape.exp(p)?,
        SigmaMode::Inverse => tape.recip(p)?,
    };

    let mu_sg = tape.stop_gradient(mu);
    let sigma_sg = tape.stop_gradient(sigma);
    let centered = tape.sub(input, mu_sg)?;
    let normed = tape.div(centered, sigma_sg)?;
    let scaled = tape.mul(normed, gamma)?;
    let output = tape.add(scaled, beta)?;

    let a_sg = tape.stop_gradient(input);
    let dev = tape.sub(a_sg, mu)?;
    let z = tape.div(dev, sigma)?;
    let z2 = tape.square(z)?;
    let quad = tape.scale(z2, 0.5)?;
    let abs_sigma = tape.abs(sigma)?;
    let log_sigma = tape.log(abs_sigma)?;
    let terms = tape.add(quad, log_sigma)?;
    let total = tape.sum_all(terms)?;
    let count = weighting.count.unwrap_or(tape.value(input).len());
    let weight = if weighting.lambda_in_loss {
        state.lambda
    } else {
        1.0
    };
    let nll = tape.scale(total, weight / count as f64)?;

    let gauged_metric = gauged_metric(tape.value(input), state)?;
    Ok(BatchlessOutput {
        output,
        nll,
        gauged_metric,
    })
}

/// Per-activation gauged loss
/// `λ·(½((a − μ)/σ)² + log|σ| − sg log|σ| − ½)`, which has zero
/// expectation when `a ~ N(μ, σ²)`.
pub fn gauged_losses(input: &Tensor, state: &NormLayerState) -> Result<Vec<f64>> {
    let shape = input.shape();
    let units = unit_count(shape, state.sharing)?;
    if units != state.units() {
        return Err(Error::dim(
            "gauged_losses",
            format!(
                "input {shape:?} has {units} units, layer has {}",
                state.units()
            ),
        ));
    }
    let sigma = state.check_sigma()?;
    let per_unit = match state.sharing {
        Sharing::PerFeature => 1,
        Sharing::PerChannel => shape[2..].iter().product(),
    };
    let mu = state.mu.data();
    let lambda = state.lambda;
    Ok(input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let u = (i / per_unit) % units;
            let z = (a - mu[u]) / sigma[u];
            let log_sigma = sigma[u].abs().ln();
            lambda * (0.5 * z * z + log_sigma - log_sigma - 0.5)
        })
        .collect())
}

/// Mean of squared [`gauged_losses`].
pub fn gauged_metric(input: &Tensor, state: &NormLayerState) -> Result<f64> {
    let losses = gauged_losses(input, state)?;
    Ok(losses.iter().map(|l| l * l).sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mu: f64, sigma_p: f64, gamma: f64, beta: f64, mode: SigmaMode) -> NormLayerState {
        let mut s = NormLayerState::new(1, mode, 1.0, Sharing::PerFeature);
        s.mu = Tensor::vector(vec![mu]);
        s.sigma_param = Tensor::vector(vec![sigma_p]);
        s.gamma = Tensor::vector(vec![gamma]);
        s.beta = Tensor::vector(vec![beta]);
        s
    }

    fn run(state: &NormLayerState, a: &[f64]) -> (Tape, Var, BatchlessVars, BatchlessOutput) {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![a.len(), 1], a.to_vec()).unwrap());
        let vars = BatchlessVars::register(&mut tape, state);
        let out = batchless_forward(&mut tape, x, vars, state, NllWeighting::default()).unwrap();
        (tape, x, vars, out)
    }

    #[test]
    fn input_at_mean_maps_to_beta() {
        let mut s = NormLayerState::new(3, SigmaMode::Log, 0.1, Sharing::PerFeature);
        s.mu = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let mut tape = Tape::new();
        let x =
            tape.constant(Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap());
        let vars = BatchlessVars::register(&mut tape, &s);
        let out = batchless_forward(&mut tape, x, vars, &s, NllWeighting::default()).unwrap();
        assert!(tape.value(out.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_evaluation() {
        let s = single(1.0, 2.0, 4.0, -1.0, SigmaMode::Direct);
        let (tape, _, _, out) = run(&s, &[3.0]);
        assert_eq!(tape.value(out.output).item(), 3.0);
    }

    #[test]
    fn gauged_loss_values() {
        let mut s = single(0.7, 1.3, 1.0, 0.0, SigmaMode::Direct);
        s.lambda = 0.1;
        let at_mean = gauged_losses(&Tensor::new(vec![1, 1], vec![0.7]).unwrap(), &s).unwrap();
        assert!((at_mean[0] + 0.05).abs() < 1e-15);
        for lambda in [0.1, 1.0, 3.0] {
            s.lambda = lambda;
            let one_sigma =
                gauged_losses(&Tensor::new(vec![1, 1], vec![2.0]).unwrap(), &s).unwrap();
            assert_eq!(one_sigma[0], 0.0);
        }
    }

    #[test]
    fn nll_gradients_match_analytic() {
        // d/dμ = −(a−μ)/σ², d/dσ = −(a−μ)²/σ³ + 1/σ
        let s = single(0.0, 1.0, 1.0, 0.0, SigmaMode::Direct);
        let (tape, x, vars, out) = run(&s, &[2.0]);
        let g = tape.backward(out.nll).unwrap();
        assert_eq!(g.get(vars.mu).unwrap().item(), -2.0);
        assert_eq!(g.get(vars.sigma_param).unwrap().item(), -3.0);
        assert_eq!(g.get(x).unwrap().item(), 0.0);
        assert_eq!(g.get(vars.gamma).unwrap().item(), 0.0);
    }

    #[test]
    fn output_gradient_skips_statistics() {
        let s = single(0.4, 0.3, 1.5, 0.2, SigmaMode::Log);
        let (tape, x, vars, out) = run(&s, &[1.0, -2.0, 0.5]);
        let mut tape = tape;
        let l = tape.sum_all(out.output).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(vars.mu).unwrap().item(), 0.0);
        assert_eq!(g.get(vars.sigma_param).unwrap().item(), 0.0);
        assert!(g.get(x).unwrap().data().iter().all(|&v| v != 0.0));
    }

    #[test]
    fn degenerate_sigma_is_an_error() {
        let s = single(0.0, 1e-13, 1.0, 0.0, SigmaMode::Direct);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let vars = BatchlessVars::register(&mut tape, &s);
        assert!(matches!(
            batchless_forward(&mut tape, x, vars, &s, NllWeighting::default()),
            Err(Error::DegenerateSigma { .. })
        ));
    }

    #[test]
    fn direct_mode_negative_sigma_uses_abs_in_log() {
        let s = single(0.0, -1.5, 1.0, 0.0, SigmaMode::Direct);
        let (tape, _, _, out) = run(&s, &[0.0]);
        assert!((tape.value(out.nll).item() - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn metric_is_sign_invariant_in_direct_mode() {
        let mut s = NormLayerState::new(2, SigmaMode::Direct, 0.3, Sharing::PerFeature);
        s.sigma_param = Tensor::vector(vec![0.8, 2.0]);
        let x = Tensor::new(vec![3, 2], vec![1.0, -0.5, 0.2, 3.0, -1.1, 0.0]).unwrap();
        let m1 = gauged_metric(&x, &s).unwrap();
        s.sigma_param = Tensor::vector(vec![-0.8, -2.0]);
        let m2 = gauged_metric(&x, &s).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn per_channel_shares_over_positions() {
        let mut s = NormLayerState::new(2, SigmaMode::Direct, 1.0, Sharing::PerChannel);
        s.mu = Tensor::vector(vec![1.0, -1.0]);
        s.sigma_param = Tensor::vector(vec![2.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 1, 2], vec![3.0, 1.0, 0.0, -1.0]).unwrap());
        let vars = BatchlessVars::register(&mut tape, &s);
        let out = batchless_forward(&mut tape, x, vars, &s, NllWeighting::default()).unwrap();
        assert_eq!(tape.value(out.output).data(), &[1.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn exact_nll_restores_constant() {
        let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((exact_nll(1.0, 0.1) - (1.0 + 0.1 * c)).abs() < 1e-15);
    }
}
