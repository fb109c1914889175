use crate::error::{Error, Result};
use crate::network::{Layer, Model, NormKind};
use crate::norm::{NormLayerState, Sharing, SigmaMode, SIGMA_FLOOR};
use crate::stats::UnitStats;
use crate::tensor::Tensor;

fn kind_for(mode: SigmaMode) -> NormKind {
    match mode {
        SigmaMode::Direct => NormKind::Bin,
        SigmaMode::Log => NormKind::BinLog,
        SigmaMode::Inverse => NormKind::BinInv,
    }
}

/// Replaces every batch-norm layer by a batchless layer with
/// `μ ← mean`, `σ ← √(var + ε)`, `γ ← γ`, `β ← β`, taking population
/// statistics when finalized and moving averages otherwise. The migrated
/// model's eval-phase function is unchanged.
pub fn migrate_from_batchnorm(model: &Model, mode: SigmaMode, lambda: f64) -> Result<Model> {
    if model.batchnorm_layers().is_empty() {
        return Err(Error::Contract(
            "model has no batch-norm layers to migrate".into(),
        ));
    }
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Layer::BatchNorm(bn) = layer {
            let (mean, var) = bn.inference_stats();
            let sigma: Vec<f64> = var.data().iter().map(|v| (v + bn.epsilon).sqrt()).collect();
            let mut state = NormLayerState::new(bn.units(), mode, lambda, bn.sharing);
            state.set_statistics(mean.data(), &sigma);
            state.gamma = bn.gamma.clone();
            state.beta = bn.beta.clone();
            *layer = Layer::Batchless(state);
        }
    }
    out.norm = kind_for(mode);
    Ok(out)
}

/// Inserts a batchless layer in front of each layer index in `points`
/// (`layers.len()` appends at the output). Each new layer gets μ, σ from
/// one statistics pass over `sample` and `β ← μ`, `γ ← σ`, so the model
/// still computes the same function.
pub fn migrate_from_plain<I>(
    model: &Model,
    sample: I,
    points: &[usize],
    mode: SigmaMode,
    lambda: f64,
) -> Result<Model>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut points = points.to_vec();
    points.sort_unstable();
    points.dedup();
    if points.is_empty() {
        return Err(Error::Config("no insertion points".into()));
    }
    if let Some(&p) = points.iter().find(|&&p| p > model.layers.len()) {
        return Err(Error::Config(format!(
            "insertion point {p} beyond {} layers",
            model.layers.len()
        )));
    }
    let mut shapes = vec![model.input_shape().to_vec()];
    shapes.extend(model.layer_shapes());
    let sharing: Vec<Sharing> = points
        .iter()
        .map(|&p| {
            if shapes[p].len() == 1 {
                Sharing::PerFeature
            } else {
                Sharing::PerChannel
            }
        })
        .collect();

    let mut source = model.clone();
    let mut stats: Vec<UnitStats> = points
        .iter()
        .map(|&p| UnitStats::new(shapes[p][0]))
        .collect();
    for batch in sample {
        let captured = source.capture_inputs(&batch, &points)?;
        for ((s, x), &sh) in stats.iter_mut().zip(&captured).zip(&sharing) {
            s.push_batch(x, sh)?;
        }
    }
    if stats[0].count() == 0 {
        return Err(Error::Contract("migration sample is empty".into()));
    }

    let mut inserted = Vec::with_capacity(points.len());
    for ((s, &p), &sh) in stats.iter().zip(&points).zip(&sharing) {
        let mean = s.mean().to_vec();
        let std = s.std();
        if let Some((unit, &v)) = std.iter().enumerate().find(|(_, &v)| !(v >= SIGMA_FLOOR)) {
            return Err(Error::DegenerateSample {
                layer: format!("insertion point {p}"),
                unit,
                std: v,
            });
        }
        let mut state = NormLayerState::new(mean.len(), mode, lambda, sh);
        state.set_statistics(&mean, &std);
        state.beta = Tensor::vector(mean);
        state.gamma = Tensor::vector(std);
        inserted.push(Layer::Batchless(state));
    }

    let mut out = model.clone();
    for (p, layer) in points.iter().zip(inserted).rev() {
        out.layers.insert(*p, layer);
    }
    out.norm = kind_for(mode);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_spiral_mlp, ArchConfig, ForwardOptions, Phase};
    use crate::norm::gauged_metric;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_inputs(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![n, 2],
            (0..2 * n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn batchnorm_migration_preserves_eval_function() {
        let mut bn = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bn, 3)).unwrap();
        // move the moving averages and γ, β off their defaults
        for step in 0..20 {
            let mut tape = Tape::new();
            let x = random_inputs(16, step);
            bn.forward(
                &mut tape,
                &x,
                ForwardOptions {
                    phase: Phase::Train,
                    ..ForwardOptions::train(step)
                },
            )
            .unwrap();
        }
        for layer in &mut bn.layers {
            if let Layer::BatchNorm(s) = layer {
                s.gamma = s.gamma.map(|g| g * 1.7);
                s.beta = s.beta.map(|b| b - 0.3);
            }
        }
        let mut migrated = migrate_from_batchnorm(&bn, SigmaMode::Log, 0.1).unwrap();
        assert_eq!(migrated.layers.len(), bn.layers.len());
        assert_eq!(
            migrated.parameter_count(),
            bn.parameter_count() + 2 * (50 + 40 + 40)
        );
        let x = random_inputs(64, 99);
        let a = bn.predict_proba(&x).unwrap();
        let b = migrated.predict_proba(&x).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }

    #[test]
    fn default_batchnorm_migrates_to_unit_gaussian() {
        let bn = build_spiral_mlp(&ArchConfig::spiral(NormKind::Bn, 3)).unwrap();
        let m = migrate_from_batchnorm(&bn, SigmaMode::Direct, 0.1).unwrap();
        let Layer::Batchless(s) = &m.layers[1] else {
            panic!()
        };
        assert!(s.mu.data().iter().all(|&v| v == 0.0));
        assert!(s.sigma().unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-5));
        assert!(s.gamma.data().iter().all(|&v| v == 1.0));
        assert!(s.beta.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_migration_is_identity() {
        let mut plain = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 8)).unwrap();
        let sample = random_inputs(500, 1);
        let mut migrated = migrate_from_plain(
            &plain,
            vec![sample.clone()],
            &[1, 4, 7],
            SigmaMode::Inverse,
            0.1,
        )
        .unwrap();
        assert_eq!(migrated.layers.len(), plain.layers.len() + 3);
        let held_out = random_inputs(200, 2);
        let mut t1 = Tape::new();
        let p1 = plain
            .forward(&mut t1, &held_out, ForwardOptions::eval())
            .unwrap();
        let mut t2 = Tape::new();
        let p2 = migrated
            .forward(&mut t2, &held_out, ForwardOptions::eval())
            .unwrap();
        assert!(t1.value(p1.logits).max_abs_diff(t2.value(p2.logits)) <= 1e-9);

        // gauged metric at each inserted layer on the sample
        let mut tape = Tape::new();
        let pass = migrated
            .forward(&mut tape, &sample, ForwardOptions::eval())
            .unwrap();
        assert_eq!(pass.gauged.len(), 3);
        assert!(pass.gauged.iter().all(|&g| g < 0.05), "{:?}", pass.gauged);
    }

    #[test]
    fn plain_migration_stats() {
        // identity model on one feature: stats are those of the sample
        let specs = [crate::network::LayerSpec::Isrlu { alpha: 4.0 }];
        let m = Model::build(&[1], &specs, NormKind::None, 0, Default::default()).unwrap();
        let x = Tensor::new(vec![2, 1], vec![2.0, 8.0]).unwrap();
        let out = migrate_from_plain(&m, vec![x.clone()], &[0], SigmaMode::Log, 0.1).unwrap();
        let Layer::Batchless(s) = &out.layers[0] else {
            panic!()
        };
        assert!((s.mu.data()[0] - 5.0).abs() < 1e-15);
        assert!((s.sigma().unwrap()[0] - 3.0).abs() < 1e-14);
        assert_eq!(s.beta.data(), &[5.0]);
        assert_eq!(s.gamma.data(), &[3.0]);
        assert!(gauged_metric(&x, s).unwrap() < 0.05);
    }

    #[test]
    fn errors() {
        let plain = build_spiral_mlp(&ArchConfig::spiral(NormKind::None, 8)).unwrap();
        assert!(matches!(
            migrate_from_batchnorm(&plain, SigmaMode::Log, 0.1),
            Err(Error::Contract(_))
        ));
        let constant = Tensor::full(&[5, 2], 1.0);
        assert!(matches!(
            migrate_from_plain(&plain, vec![constant], &[0], SigmaMode::Log, 0.1),
            Err(Error::DegenerateSample { .. })
        ));
        assert!(migrate_from_plain(&plain, Vec::new(), &[0], SigmaMode::Log, 0.1).is_err());
    }
}
