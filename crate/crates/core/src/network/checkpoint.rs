//! Network persistence: parameters and running statistics in an RTEN file,
//! architecture in a JSON sidecar next to it (`<stem>.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, BnMode, Layer, Network};
use crate::data::rten::{self, RtenRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub architecture: Architecture,
    /// Whether batch-norm running statistics come from training.
    pub trained: bool,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn sidecar_path(rten_path: &Path) -> PathBuf {
    rten_path.with_extension("json")
}

/// Named records for every parameter and running statistic of `net`.
pub fn to_records(net: &Network) -> Vec<RtenRecord> {
    let mut out = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Conv2d { weight, .. } => out.push(RtenRecord::from_tensor(format!("layer{i}.weight"), weight)),
            Layer::Dense { weight, bias } => {
                out.push(RtenRecord::from_tensor(format!("layer{i}.weight"), weight));
                out.push(RtenRecord::from_tensor(format!("layer{i}.bias"), bias));
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels;
                out.push(RtenRecord::from_tensor(format!("layer{i}.gamma"), &bn.gamma));
                out.push(RtenRecord::from_tensor(format!("layer{i}.beta"), &bn.beta));
                out.push(RtenRecord::f64(format!("layer{i}.running_mean"), vec![c], bn.mu_train.clone()));
                out.push(RtenRecord::f64(format!("layer{i}.running_var"), vec![c], bn.var_train.clone()));
            }
            Layer::Relu | Layer::MeanPool2 | Layer::Flatten => {}
        }
    }
    out
}

fn fetch(records: &[RtenRecord], name: &str, shape: &[usize]) -> Result<Tensor> {
    let r = rten::find(records, name).ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))?;
    let t = r.to_tensor()?;
    if t.shape() != shape {
        return Err(Error::Checkpoint(format!("record {name} has shape {:?}, expected {shape:?}", t.shape())));
    }
    Ok(t)
}

/// Rebuilds a network from its architecture and records. The result is in
/// Frozen mode when `trained`, otherwise in Train mode.
pub fn from_records(arch: Architecture, records: &[RtenRecord], trained: bool) -> Result<Network> {
    let mut net = Network::new(arch, 0)?;
    let expected = to_records(&net).len();
    if records.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} records, found {}", records.len())));
    }
    for (i, layer) in net.layers_mut().iter_mut().enumerate() {
        match layer {
            Layer::Conv2d { weight, .. } => *weight = fetch(records, &format!("layer{i}.weight"), weight.shape())?,
            Layer::Dense { weight, bias } => {
                *weight = fetch(records, &format!("layer{i}.weight"), weight.shape())?;
                *bias = fetch(records, &format!("layer{i}.bias"), bias.shape())?;
            }
            Layer::BatchNorm(bn) => {
                let c = [bn.channels];
                bn.gamma = fetch(records, &format!("layer{i}.gamma"), &c)?;
                bn.beta = fetch(records, &format!("layer{i}.beta"), &c)?;
                bn.mu_train = fetch(records, &format!("layer{i}.running_mean"), &c)?.into_data();
                bn.var_train = fetch(records, &format!("layer{i}.running_var"), &c)?.into_data();
                if bn.var_train.iter().any(|&v| v < 0.0) {
                    return Err(Error::Checkpoint(format!("layer{i}.running_var is negative")));
                }
            }
            Layer::Relu | Layer::MeanPool2 | Layer::Flatten => {}
        }
    }
    if trained {
        net.mark_trained();
        net.set_mode(BnMode::Frozen)?;
    }
    Ok(net)
}

/// Writes `path` (RTEN) and its JSON sidecar.
pub fn save(net: &Network, path: &Path, metadata: serde_json::Value) -> Result<()> {
    rten::write_rten(path, &to_records(net))?;
    let sidecar = Sidecar {
        architecture: net.architecture().clone(),
        trained: net.batch_norms().all(|bn| bn.has_running_stats()),
        metadata,
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(&side, text + "\n").map_err(|source| Error::Io { path: side, source })
}

pub fn load(path: &Path) -> Result<(Network, Sidecar)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|source| Error::Io { path: side.clone(), source })?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let records = rten::read_rten(path)?;
    let net = from_records(sidecar.architecture.clone(), &records, sidecar.trained)?;
    Ok((net, sidecar))
}
