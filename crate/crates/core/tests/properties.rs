mod common;

use batchless::data::{generate_spirals, spiral_point, Examples, SpiralParams};
use batchless::network::{build_spiral_mlp, ArchConfig, ForwardOptions, Model, NormKind, Phase};
use batchless::norm::{
    batchless_forward, batchnorm_forward, batchrenorm_forward, gauged_losses, gauged_metric,
    migrate_from_plain, BatchNormState, BatchlessVars, NllWeighting, NormLayerState, RenormClip,
    Sharing, SigmaMode,
};
use batchless::optim::LambdaMode;
use batchless::train::batch_gradients;
use batchless::{Tape, Tensor};
use common::{column_stats, rng, uniform};
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn mode() -> impl Strategy<Value = SigmaMode> {
    prop_oneof![
        Just(SigmaMode::Direct),
        Just(SigmaMode::Log),
        Just(SigmaMode::Inverse)
    ]
}

fn layer(units: usize, mode: SigmaMode, lambda: f64, mu: &[f64], sigma: &[f64]) -> NormLayerState {
    let mut s = NormLayerState::new(units, mode, lambda, Sharing::PerFeature);
    s.set_statistics(mu, sigma);
    s
}

fn logits(model: &mut Model, x: &Tensor) -> Tensor {
    let mut t = Tape::new();
    let pass = model.forward(&mut t, x, ForwardOptions::eval()).unwrap();
    t.value(pass.logits).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Per activation the gauged loss is λ(z² − 1)/2 with z = (a − μ)/σ.
    #[test]
    fn gauged_loss_is_centered_square(
        mode in mode(),
        mu in -5.0..5.0f64,
        sigma in 0.05..10.0f64,
        lambda in 0.001..2.0f64,
        z in prop::collection::vec(-6.0..6.0f64, 1..20),
    ) {
        let s = layer(1, mode, lambda, &[mu], &[sigma]);
        let x = Tensor::new(vec![z.len(), 1], z.iter().map(|z| mu + z * sigma).collect()).unwrap();
        for (got, z) in gauged_losses(&x, &s).unwrap().iter().zip(&z) {
            let want = lambda * (z * z - 1.0) / 2.0;
            prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }

    /// Draws from the layer's own distribution score zero in expectation.
    #[test]
    fn gauged_loss_has_zero_mean_under_own_distribution(
        mode in mode(),
        mu in -5.0..5.0f64,
        sigma in 0.1..10.0f64,
        lambda in 0.01..1.0f64,
        seed in any::<u64>(),
    ) {
        let s = layer(1, mode, lambda, &[mu], &[sigma]);
        let mut r = rng(seed);
        let n = 20_000;
        let x: Vec<f64> = (0..n).map(|_| { let z: f64 = StandardNormal.sample(&mut r); mu + sigma * z }).collect();
        let losses = gauged_losses(&Tensor::new(vec![n, 1], x).unwrap(), &s).unwrap();
        let mean = losses.iter().sum::<f64>() / n as f64;
        // the standard error is λ/√(2n) ≈ 0.005λ
        prop_assert!(mean.abs() <= 0.05 * lambda, "mean {mean}");
    }

    /// Only z² and log|σ| enter, so flipping σ's sign changes neither the
    /// likelihood nor the metric.
    #[test]
    fn negative_direct_sigma_is_equivalent(
        mu in -2.0..2.0f64,
        sigma in 0.1..3.0f64,
        x in prop::collection::vec(-4.0..4.0f64, 2..16),
    ) {
        let n = x.len();
        let input = Tensor::new(vec![n, 1], x).unwrap();
        let eval = |sig: f64| {
            let s = layer(1, SigmaMode::Direct, 0.1, &[mu], &[sig]);
            let mut t = Tape::new();
            let a = t.constant(input.clone());
            let vars = BatchlessVars::register(&mut t, &s);
            let out = batchless_forward(&mut t, a, vars, &s, NllWeighting::default()).unwrap();
            (t.value(out.nll).item(), gauged_metric(&input, &s).unwrap())
        };
        let (pos, neg) = (eval(sigma), eval(-sigma));
        prop_assert!((pos.0 - neg.0).abs() <= 1e-12 * (1.0 + pos.0.abs()));
        prop_assert!((pos.1 - neg.1).abs() <= 1e-12 * (1.0 + pos.1.abs()));
    }

    /// The likelihood gradient vanishes at the sample mean and ML standard
    /// deviation, whatever the parameterization.
    #[test]
    fn ml_statistics_are_stationary(
        mode in mode(),
        seed in any::<u64>(),
        n in 2usize..64,
        units in 1usize..5,
    ) {
        let mut r = rng(seed);
        let x = uniform(&mut r, &[n, units], -3.0, 5.0);
        let (mean, std) = column_stats(&x);
        prop_assume!(std.iter().all(|&s| s > 1e-3));
        let s = layer(units, mode, 0.1, &mean, &std);
        let mut t = Tape::new();
        let a = t.constant(x);
        let vars = BatchlessVars::register(&mut t, &s);
        let out = batchless_forward(&mut t, a, vars, &s, NllWeighting::default()).unwrap();
        let g = t.backward(out.nll).unwrap();
        for v in [vars.mu, vars.sigma_param] {
            let worst = g.get(v).unwrap().data().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(worst <= 1e-10, "gradient {worst}");
        }
    }

    /// Stop-gradients: the likelihood never reaches the layer input, the
    /// output never reaches μ or σ.
    #[test]
    fn stop_gradients_are_exact(
        mode in mode(),
        seed in any::<u64>(),
        n in 1usize..6,
        units in 1usize..5,
        spatial in prop::option::of((1usize..4, 1usize..4)),
    ) {
        let mut r = rng(seed);
        let (shape, sharing) = match spatial {
            Some((h, w)) => (vec![n, units, h, w], Sharing::PerChannel),
            None => (vec![n, units], Sharing::PerFeature),
        };
        let mut s = NormLayerState::new(units, mode, 0.3, sharing);
        let mu = uniform(&mut r, &[units], -1.0, 1.0);
        let sigma = uniform(&mut r, &[units], 0.3, 2.0);
        s.set_statistics(mu.data(), sigma.data());
        let x = uniform(&mut r, &shape, -3.0, 3.0);
        let zero = |t: Option<&Tensor>| t.is_none_or(|t| t.data().iter().all(|&v| v == 0.0));

        let mut t = Tape::new();
        let a = t.param(x.clone());
        let vars = BatchlessVars::register(&mut t, &s);
        let out = batchless_forward(&mut t, a, vars, &s, NllWeighting::default()).unwrap();
        let g = t.backward(out.nll).unwrap();
        prop_assert!(zero(g.get(a)));

        let mut t = Tape::new();
        let a = t.param(x);
        let vars = BatchlessVars::register(&mut t, &s);
        let out = batchless_forward(&mut t, a, vars, &s, NllWeighting::default()).unwrap();
        let loss = common::weighted(&mut t, out.output, seed);
        let g = t.backward(loss).unwrap();
        prop_assert!(zero(g.get(vars.mu)));
        prop_assert!(zero(g.get(vars.sigma_param)));
        prop_assert!(!zero(g.get(a)));
    }

    /// r clipped to 1 and d to 0 is plain batch norm; no clipping at all
    /// normalizes by the moving statistics.
    #[test]
    fn renorm_limits(seed in any::<u64>(), n in 2usize..10, units in 1usize..5) {
        let mut r = rng(seed);
        let mut s = BatchNormState::new(units, Sharing::PerFeature, None);
        s.moving_mu = uniform(&mut r, &[units], -1.0, 1.0);
        s.moving_var = uniform(&mut r, &[units], 0.2, 3.0);
        s.gamma = uniform(&mut r, &[units], 0.5, 1.5);
        s.beta = uniform(&mut r, &[units], -1.0, 1.0);
        let x = uniform(&mut r, &[n, units], -3.0, 3.0);
        let run = |clip: Option<RenormClip>| {
            let mut st = s.clone();
            let mut t = Tape::new();
            let a = t.constant(x.clone());
            let g = t.param(st.gamma.clone());
            let b = t.param(st.beta.clone());
            let y = match clip {
                None => batchnorm_forward(&mut t, a, g, b, &mut st, Phase::Train),
                Some(c) => batchrenorm_forward(&mut t, a, g, b, &mut st, Phase::Train, c),
            };
            t.value(y.unwrap()).clone()
        };
        prop_assert_eq!(run(None), run(Some(RenormClip { r_max: 1.0, d_max: 0.0 })));
        let free = run(Some(RenormClip { r_max: f64::INFINITY, d_max: f64::INFINITY }));
        for (i, &y) in free.data().iter().enumerate() {
            let u = i % units;
            let want = (x.data()[i] - s.moving_mu.data()[u]) / (s.moving_var.data()[u] + s.epsilon).sqrt()
                * s.gamma.data()[u] + s.beta.data()[u];
            prop_assert!((y - want).abs() <= 1e-12, "{y} vs {want}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Inserting batchless layers initialized with β = μ, γ = σ leaves the
    /// function unchanged.
    #[test]
    fn plain_migration_is_identity(
        seed in any::<u64>(),
        mode in mode(),
        points in prop::collection::btree_set(0usize..=10, 1..4),
    ) {
        let model = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, seed)).unwrap();
        let (train, _) = generate_spirals(50, 1, seed, &SpiralParams::default()).unwrap();
        let sample = vec![train.range(0, train.len()).0];
        let points: Vec<usize> = points.into_iter().collect();
        let mut migrated = migrate_from_plain(&model, sample, &points, mode, 0.1).unwrap();
        prop_assert_eq!(migrated.batchless_layers().len(), points.len());
        let x = uniform(&mut rng(seed ^ 1), &[20, 2], -2.0, 2.0);
        let mut original = model;
        let diff = logits(&mut migrated, &x).max_abs_diff(&logits(&mut original, &x));
        prop_assert!(diff <= 1e-9, "diff {diff}");
    }

    /// Without batch statistics, gradients accumulated one instance at a
    /// time equal the whole-batch gradients bit for bit. Larger slices
    /// regroup the sums and only agree to rounding.
    #[test]
    fn slice_accumulation_is_bitwise(
        seed in any::<u64>(),
        norm in prop_oneof![Just(NormKind::None), Just(NormKind::Bin), Just(NormKind::BinLog), Just(NormKind::BinInv)],
        batch in 2usize..24,
    ) {
        let (train, _) = generate_spirals(30, 1, seed, &SpiralParams::default()).unwrap();
        let rows: Vec<usize> = (0..batch).map(|i| (i * 7 + seed as usize) % train.len()).collect();
        let (x, y) = train.batch(&rows);
        let model = build_spiral_mlp(&ArchConfig::spiral(norm, seed)).unwrap();
        let grads = |micro| {
            let mut m = model.clone();
            batch_gradients(&mut m, &x, &y, Phase::Train, seed, LambdaMode::LossMultiplier, micro).unwrap().grads
        };
        let (whole, sliced) = (grads(None), grads(Some(1)));
        for (a, b) in whole.iter().zip(&sliced) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

/// Distance from `p` to the nearest of `samples` points along arm `class`.
fn curve_distance(p: [f64; 2], class: usize, params: &SpiralParams, samples: usize) -> f64 {
    (0..=samples)
        .map(|i| {
            let q = spiral_point(class, i as f64 / samples as f64, params);
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .fold(f64::INFINITY, f64::min)
}

/// Near the center the arms are still apart relative to the noise, so
/// nearly every point lies closest to its own arm. Ties count as own since
/// all arms meet at the origin.
#[test]
fn spiral_arms_separate_at_small_t() {
    let params = SpiralParams::default();
    for seed in 0..3 {
        let (train, _) = generate_spirals(2000, 1, seed, &params).unwrap();
        let (mut own, mut total) = (0, 0);
        for i in 0..train.len() {
            if train.t[i] > 0.2 {
                continue;
            }
            let row = &train.inputs.data()[2 * i..2 * i + 2];
            let p = [row[0], row[1]];
            let k = train.labels[i];
            let d: Vec<f64> = (0..3).map(|c| curve_distance(p, c, &params, 600)).collect();
            total += 1;
            if (0..3).all(|c| c == k || d[k] <= d[c]) {
                own += 1;
            }
        }
        let share = own as f64 / total as f64;
        assert!(share >= 0.99, "seed {seed}: {share} of {total}");
    }
}
