use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability floor inside the logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Natural-log `KL(p ‖ q)` with both arguments floored at [`PROB_FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.max(PROB_FLOOR) / qi.max(PROB_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Average over sites and snapshots of `KL(snapshot ‖ pointwise mean)`.
/// Each snapshot is `[sites, classes]`.
pub fn fluctuation(snapshots: &[Tensor]) -> Result<f64> {
    let first = snapshots
        .first()
        .ok_or_else(|| Error::Contract("fluctuation needs at least one snapshot".into()))?;
    if first.rank() != 2 || snapshots.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::dim(
            "fluctuation",
            "snapshots must share one [sites, classes] shape",
        ));
    }
    let (sites, classes) = (first.shape()[0], first.shape()[1]);
    let n = snapshots.len() as f64;
    let mut mean = vec![0.0; sites * classes];
    for s in snapshots {
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut total = 0.0;
    for s in snapshots {
        for site in 0..sites {
            let r = site * classes..(site + 1) * classes;
            total += kl_divergence(&s.data()[r.clone()], &mean[r]);
        }
    }
    Ok(total / (n * sites as f64))
}

/// Centers of a `k × k` grid of equal cells over `[(x0, x1), (y0, y1)]`,
/// as a `[k², 2]` input batch in row-major order (y outer).
pub fn grid_sites(bounds: [(f64, f64); 2], k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::Config("grid size must be positive".into()));
    }
    let mut data = Vec::with_capacity(2 * k * k);
    let [(x0, x1), (y0, y1)] = bounds;
    for j in 0..k {
        for i in 0..k {
            data.push(x0 + (x1 - x0) * (i as f64 + 0.5) / k as f64);
            data.push(y0 + (y1 - y0) * (j as f64 + 0.5) / k as f64);
        }
    }
    Tensor::new(vec![k * k, 2], data)
}
