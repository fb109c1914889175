//! Versioned JSON checkpoints of a [`Model`].
//!
//! Every layer is stored with its name, kind, hyperparameters and named
//! arrays. Values are written with 17 significant digits, so a save/load
//! round trip reproduces every parameter bit for bit. The field layout is
//! documented in `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::network::{Layer, Model, NormKind};
use crate::norm::{BatchNormState, NormLayerState, RenormClip, Sharing, SigmaMode};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "batchless-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayDoc<V> {
    name: String,
    shape: Vec<usize>,
    values: V,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "V: Deserialize<'de>"))]
struct LayerDoc<V> {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_mode: Option<SigmaMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sharing: Option<Sharing>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decay: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(default)]
    arrays: Vec<ArrayDoc<V>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "V: Deserialize<'de>"))]
struct CheckpointDoc<V> {
    format: String,
    version: u32,
    norm: NormKind,
    input_shape: Vec<usize>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    layers: Vec<LayerDoc<V>>,
}

/// A model together with the run metadata it was saved with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedCheckpoint(msg.into())
}

fn raw_values(layer: &str, name: &str, t: &Tensor) -> Result<Box<RawValue>> {
    let mut s = String::with_capacity(t.len() * 24 + 2);
    s.push('[');
    for (i, v) in t.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Contract(format!(
                "{layer}.{name}[{i}] is not finite ({v})"
            )));
        }
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("{v:.16e}"));
    }
    s.push(']');
    Ok(RawValue::from_string(s)?)
}

fn empty_layer<V>(name: String, kind: &str) -> LayerDoc<V> {
    LayerDoc {
        name,
        kind: kind.into(),
        sigma_mode: None,
        sharing: None,
        lambda: None,
        decay: None,
        epsilon: None,
        momentum: None,
        r_max: None,
        d_max: None,
        alpha: None,
        slope: None,
        rate: None,
        arrays: Vec::new(),
    }
}

/// Serializes `model` with `metadata` to checkpoint text.
pub fn checkpoint_to_string(model: &Model, metadata: &BTreeMap<String, String>) -> Result<String> {
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let name = format!("{i}");
        let mut doc = empty_layer(name.clone(), layer.kind_name());
        let mut arrays: Vec<(&str, &Tensor)> = Vec::new();
        match layer {
            Layer::Dense {
                weight,
                bias,
                decay,
            } => {
                doc.decay = Some(*decay);
                arrays = vec![("weight", weight), ("bias", bias)];
            }
            Layer::Conv { kernel, bias } => arrays = vec![("weight", kernel), ("bias", bias)],
            Layer::Batchless(s) => {
                doc.sigma_mode = Some(s.mode);
                doc.sharing = Some(s.sharing);
                doc.lambda = Some(s.lambda);
                arrays = vec![
                    ("mu", &s.mu),
                    ("sigma_param", &s.sigma_param),
                    ("gamma", &s.gamma),
                    ("beta", &s.beta),
                ];
            }
            Layer::BatchNorm(s) => {
                doc.sharing = Some(s.sharing);
                doc.epsilon = Some(s.epsilon);
                doc.momentum = Some(s.momentum);
                if let Some(c) = s.renorm {
                    doc.r_max = Some(c.r_max);
                    doc.d_max = Some(c.d_max);
                }
                arrays = vec![
                    ("gamma", &s.gamma),
                    ("beta", &s.beta),
                    ("moving_mean", &s.moving_mu),
                    ("moving_var", &s.moving_var),
                ];
                if let (Some(m), Some(v)) = (&s.population_mu, &s.population_var) {
                    arrays.push(("population_mean", m));
                    arrays.push(("population_var", v));
                }
            }
            Layer::Isrlu(a) => doc.alpha = Some(*a),
            Layer::LeakyRelu(a) => doc.slope = Some(*a),
            Layer::Dropout(r) => doc.rate = Some(*r),
            Layer::MaxPool | Layer::Flatten | Layer::SoftmaxOutput => {}
        }
        for (n, t) in arrays {
            doc.arrays.push(ArrayDoc {
                name: n.into(),
                shape: t.shape().to_vec(),
                values: raw_values(&name, n, t)?,
            });
        }
        layers.push(doc);
    }
    let doc = CheckpointDoc {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        norm: model.norm,
        input_shape: model.input_shape().to_vec(),
        metadata: metadata.clone(),
        layers,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

struct Arrays {
    layer: String,
    map: BTreeMap<String, Tensor>,
}

impl Arrays {
    fn new(layer: &LayerDoc<Vec<f64>>, docs: Vec<ArrayDoc<Vec<f64>>>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in docs {
            let t = Tensor::new(a.shape, a.values)
                .map_err(|e| malformed(format!("layer {} array {}: {e}", layer.name, a.name)))?;
            if map.insert(a.name.clone(), t).is_some() {
                return Err(malformed(format!(
                    "layer {} repeats array {}",
                    layer.name, a.name
                )));
            }
        }
        Ok(Self {
            layer: layer.name.clone(),
            map,
        })
    }

    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.map
            .remove(name)
            .ok_or_else(|| malformed(format!("layer {} is missing array {name}", self.layer)))
    }

    fn take_opt(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            Some(k) => Err(malformed(format!(
                "layer {} has unexpected array {k}",
                self.layer
            ))),
            None => Ok(()),
        }
    }
}

fn need<T>(layer: &str, field: &str, v: Option<T>) -> Result<T> {
    v.ok_or_else(|| malformed(format!("layer {layer} is missing field {field}")))
}

fn decode_layer(mut doc: LayerDoc<Vec<f64>>) -> Result<Layer> {
    let docs = std::mem::take(&mut doc.arrays);
    let mut arrays = Arrays::new(&doc, docs)?;
    let n = doc.name.as_str();
    let layer = match doc.kind.as_str() {
        "dense" => Layer::Dense {
            weight: arrays.take("weight")?,
            bias: arrays.take("bias")?,
            decay: need(n, "decay", doc.decay)?,
        },
        "conv" => Layer::Conv {
            kernel: arrays.take("weight")?,
            bias: arrays.take("bias")?,
        },
        "batchless" => Layer::Batchless(NormLayerState {
            mu: arrays.take("mu")?,
            sigma_param: arrays.take("sigma_param")?,
            gamma: arrays.take("gamma")?,
            beta: arrays.take("beta")?,
            mode: need(n, "sigma_mode", doc.sigma_mode)?,
            lambda: need(n, "lambda", doc.lambda)?,
            sharing: need(n, "sharing", doc.sharing)?,
        }),
        kind @ ("batchnorm" | "batchrenorm") => {
            let renorm = if kind == "batchrenorm" {
                Some(RenormClip {
                    r_max: need(n, "r_max", doc.r_max)?,
                    d_max: need(n, "d_max", doc.d_max)?,
                })
            } else {
                None
            };
            let population_mu = arrays.take_opt("population_mean");
            let population_var = arrays.take_opt("population_var");
            if population_mu.is_some() != population_var.is_some() {
                return Err(malformed(format!(
                    "layer {n} has only one population array"
                )));
            }
            Layer::BatchNorm(BatchNormState {
                moving_mu: arrays.take("moving_mean")?,
                moving_var: arrays.take("moving_var")?,
                gamma: arrays.take("gamma")?,
                beta: arrays.take("beta")?,
                epsilon: need(n, "epsilon", doc.epsilon)?,
                momentum: need(n, "momentum", doc.momentum)?,
                population_mu,
                population_var,
                sharing: need(n, "sharing", doc.sharing)?,
                renorm,
            })
        }
        "isrlu" => Layer::Isrlu(need(n, "alpha", doc.alpha)?),
        "leaky_relu" => Layer::LeakyRelu(need(n, "slope", doc.slope)?),
        "dropout" => Layer::Dropout(need(n, "rate", doc.rate)?),
        "maxpool" => Layer::MaxPool,
        "flatten" => Layer::Flatten,
        "softmax" => Layer::SoftmaxOutput,
        other => return Err(malformed(format!("layer {n} has unknown kind {other:?}"))),
    };
    arrays.finish()?;
    Ok(layer)
}

/// Parses checkpoint text. Structural problems (missing fields or arrays,
/// wrong version, inconsistent shapes) are reported as
/// [`Error::MalformedCheckpoint`].
pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let doc: CheckpointDoc<Vec<f64>> =
        serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(malformed(format!("unknown format {:?}", doc.format)));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(malformed(format!("unsupported version {}", doc.version)));
    }
    let layers = doc
        .layers
        .into_iter()
        .map(decode_layer)
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_layers(&doc.input_shape, layers, doc.norm)
        .map_err(|e| malformed(e.to_string()))?;
    Ok(Checkpoint {
        model,
        metadata: doc.metadata,
    })
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(model, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&std::fs::read_to_string(path)?)
}
