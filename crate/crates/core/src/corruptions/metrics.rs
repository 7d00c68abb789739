use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{corrupt, CorruptionKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::trainer::{evaluate, EvalOptions};

/// Top-1 errors in `[0, 1]`: clean, and per corruption per severity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorTable {
    pub clean: f64,
    pub corruptions: BTreeMap<String, Vec<f64>>,
}

impl ErrorTable {
    pub fn validate(&self) -> Result<()> {
        let ok = |e: f64| (0.0..=1.0).contains(&e);
        if !ok(self.clean) || self.corruptions.values().flatten().any(|&e| !ok(e)) {
            return Err(Error::InvalidConfig("errors must lie in [0, 1]".into()));
        }
        if self.corruptions.values().any(|v| v.is_empty()) {
            return Err(Error::InvalidConfig("every corruption needs at least one severity".into()));
        }
        Ok(())
    }
}

fn check_coverage(model: &ErrorTable, reference: &ErrorTable) -> Result<()> {
    model.validate()?;
    reference.validate()?;
    if model.corruptions.is_empty() {
        return Err(Error::CoverageMismatch("no corruptions".into()));
    }
    for (name, errs) in &model.corruptions {
        match reference.corruptions.get(name) {
            Some(r) if r.len() == errs.len() => {}
            Some(r) => {
                return Err(Error::CoverageMismatch(format!("{name}: {} severities vs {} in reference", errs.len(), r.len())))
            }
            None => return Err(Error::CoverageMismatch(format!("{name} missing from reference"))),
        }
    }
    if let Some(extra) = reference.corruptions.keys().find(|k| !model.corruptions.contains_key(*k)) {
        return Err(Error::CoverageMismatch(format!("{extra} missing from model table")));
    }
    Ok(())
}

/// Mean corruption error in percent: `(100/K)·Σ_k Σ_i e_{k,i} / Σ_i r_{k,i}`.
pub fn mce(model: &ErrorTable, reference: &ErrorTable) -> Result<f64> {
    check_coverage(model, reference)?;
    let mut total = 0.0;
    for (name, errs) in &model.corruptions {
        let den: f64 = reference.corruptions[name].iter().sum();
        if den == 0.0 {
            return Err(Error::DegenerateReference(name.clone()));
        }
        total += errs.iter().sum::<f64>() / den;
    }
    Ok(100.0 * total / model.corruptions.len() as f64)
}

/// Relative mean corruption error in percent, with the clean error
/// subtracted at every severity:
/// `(100/K)·Σ_k Σ_i (e_{k,i} − e_clean) / Σ_i (r_{k,i} − r_clean)`.
pub fn rmce(model: &ErrorTable, reference: &ErrorTable) -> Result<f64> {
    check_coverage(model, reference)?;
    let mut total = 0.0;
    for (name, errs) in &model.corruptions {
        let den: f64 = reference.corruptions[name].iter().map(|r| r - reference.clean).sum();
        if den == 0.0 {
            return Err(Error::DegenerateReference(name.clone()));
        }
        total += errs.iter().map(|e| e - model.clean).sum::<f64>() / den;
    }
    Ok(100.0 * total / model.corruptions.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub errors: ErrorTable,
    pub mce: Option<f64>,
    pub rmce: Option<f64>,
    pub rho: Option<f64>,
    pub batch_size: usize,
}

impl CorruptionReport {
    pub fn new(errors: ErrorTable, reference: Option<&ErrorTable>, opts: &EvalOptions) -> Result<Self> {
        let (mce, rmce) = match reference {
            Some(r) => (Some(mce(&errors, r)?), Some(rmce(&errors, r)?)),
            None => (None, None),
        };
        Ok(Self { errors, mce, rmce, rho: opts.rho, batch_size: opts.batch_size })
    }
}

/// Top-1 error of `net` on `dataset` and on every severity of `kinds`.
pub fn evaluate_corruptions(
    net: &Network,
    dataset: &Dataset,
    kinds: &[CorruptionKind],
    opts: &EvalOptions,
    seed: u64,
) -> Result<ErrorTable> {
    let clean = 1.0 - evaluate(net, dataset, opts)?;
    let mut corruptions = BTreeMap::new();
    for &kind in kinds {
        let mut errs = Vec::with_capacity(5);
        for s in 1..=5u8 {
            let images = corrupt(&dataset.images, kind, s, seed)?;
            let shifted = Dataset { images, ..dataset.clone() };
            errs.push(1.0 - evaluate(net, &shifted, opts)?);
        }
        corruptions.insert(kind.name().to_string(), errs);
    }
    Ok(ErrorTable { clean, corruptions })
}
