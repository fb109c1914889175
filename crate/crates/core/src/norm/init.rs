use crate::error::{Error, Result};
use crate::network::{Layer, Model};
use crate::norm::SIGMA_FLOOR;
use crate::stats::UnitStats;
use crate::tensor::Tensor;

/// Statistics one batchless layer was initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInitReport {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Passes over the sample spent on this layer; always 1.
    pub passes: usize,
}

/// Streams `batches()` through layers `0..layer` in eval phase and returns
/// the per-unit statistics of what reaches `layer`.
fn layer_input_stats<I>(
    model: &mut Model,
    layer: usize,
    units: usize,
    sharing: crate::norm::Sharing,
    batches: &mut impl FnMut() -> I,
) -> Result<UnitStats>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut stats = UnitStats::new(units);
    for batch in batches() {
        let captured = model.capture_inputs(&batch, &[layer])?;
        stats.push_batch(&captured[0], sharing)?;
    }
    if stats.count() == 0 {
        return Err(Error::Contract(
            "statistics pass over an empty dataset".into(),
        ));
    }
    Ok(stats)
}

/// Sets μ and σ of every batchless layer, in order, to the mean and
/// maximum-likelihood standard deviation of that layer's inputs on the
/// sample, with all earlier layers already initialized. γ and β are left
/// alone. `sample` is called once per batchless layer.
pub fn init_from_sample<I>(
    model: &mut Model,
    mut sample: impl FnMut() -> I,
) -> Result<Vec<LayerInitReport>>
where
    I: IntoIterator<Item = Tensor>,
{
    let mut reports = Vec::new();
    for k in model.batchless_layers() {
        let Layer::Batchless(state) = &model.layers[k] else {
            unreachable!()
        };
        let (units, sharing) = (state.units(), state.sharing);
        let stats = layer_input_stats(model, k, units, sharing, &mut sample)?;
        let mean = stats.mean().to_vec();
        let std = stats.std();
        if let Some((unit, &s)) = std.iter().enumerate().find(|(_, &s)| !(s >= SIGMA_FLOOR)) {
            return Err(Error::DegenerateSample {
                layer: k.to_string(),
                unit,
                std: s,
            });
        }
        let Layer::Batchless(state) = &mut model.layers[k] else {
            unreachable!()
        };
        state.set_statistics(&mean, &std);
        reports.push(LayerInitReport {
            layer: k,
            mean,
            std,
            passes: 1,
        });
    }
    Ok(reports)
}

/// Replaces the moving averages used at evaluation by exact population
/// statistics over `data`, one batch-norm layer at a time so each layer sees
/// its predecessors already finalized. Variances are maximum-likelihood.
pub fn finalize_population_stats<I>(model: &mut Model, mut data: impl FnMut() -> I) -> Result<()>
where
    I: IntoIterator<Item = Tensor>,
{
    for k in model.batchnorm_layers() {
        let Layer::BatchNorm(state) = &mut model.layers[k] else {
            unreachable!()
        };
        state.population_mu = None;
        state.population_var = None;
        let (units, sharing) = (state.units(), state.sharing);
        let stats = layer_input_stats(model, k, units, sharing, &mut data)?;
        let Layer::BatchNorm(state) = &mut model.layers[k] else {
            unreachable!()
        };
        state.population_mu = Some(Tensor::vector(stats.mean().to_vec()));
        state.population_var = Some(Tensor::vector(stats.variance()));
    }
    Ok(())
}
