//! Randomized-smoothing prediction and ℓ2 certification.

mod stats;

pub use stats::{binom_lower_bound, binom_test_half, binom_upper_tail, phi, phi_inv};

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::network::{Classifier, Network};
use crate::rng::{add_gaussian_noise, streams, GaussianStream};
use crate::tensor::{ops, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub mc_batch: usize,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sigma: 0.25, n0: 100, n: 10_000, alpha: 0.001, mc_batch: 500, seed: 0 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n0 == 0 || self.n == 0 || self.mc_batch == 0 {
            return Err(Error::InvalidConfig("n0, n and mc_batch must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidProbability(self.alpha));
        }
        Ok(())
    }
}

/// A predicted class, or a refusal to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Decision {
    Class(usize),
    Abstain,
}

impl Decision {
    pub fn class(self) -> Option<usize> {
        match self {
            Decision::Class(c) => Some(c),
            Decision::Abstain => None,
        }
    }
}

impl Serialize for Decision {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Decision::Class(c) => s.serialize_u64(*c as u64),
            Decision::Abstain => s.serialize_str("abstain"),
        }
    }
}

impl<'de> Deserialize<'de> for Decision {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Class(usize),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Class(c) => Ok(Decision::Class(c)),
            Repr::Word(w) if w == "abstain" => Ok(Decision::Abstain),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("unknown decision {w:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationResult {
    pub index: u64,
    pub label: Option<usize>,
    pub decision: Decision,
    pub p_a_lower: f64,
    /// Certified ℓ2 radius; 0 when abstaining.
    pub radius: f64,
    pub sigma: f64,
    pub n: u64,
    pub n0: u64,
    pub alpha: f64,
    /// Per-class tallies over the `n` estimation samples.
    pub counts: Vec<u64>,
}

/// Per-class counts of `net`'s predictions on `count` noisy copies of one
/// example. Sample `s` draws its noise from slot `s` of the
/// `(seed, stream, index)` substream, so tallies do not depend on batching.
pub fn sample_counts<C: Classifier + ?Sized>(
    net: &C,
    example: &Tensor,
    index: u64,
    stream: u64,
    count: u64,
    sigma: f64,
    mc_batch: usize,
    seed: u64,
) -> Result<Vec<u64>> {
    if example.batch_size() != 1 {
        return Err(Error::ShapeMismatch { op: "smoothing", detail: format!("expected one example, got {:?}", example.shape()) });
    }
    let d = example.len();
    let classes = net.num_classes();
    let starts: Vec<u64> = (0..count).step_by(mc_batch.max(1)).collect();
    let partial: Result<Vec<Vec<u64>>> = starts
        .par_iter()
        .map(|&start| {
            let b = (count - start).min(mc_batch as u64) as usize;
            let mut shape = example.shape().to_vec();
            shape[0] = b;
            let mut data = Vec::with_capacity(b * d);
            let mut noise = vec![0.0; d];
            for s in 0..b as u64 {
                let mut g = GaussianStream::at_sample(seed, &[stream, index], start + s, d);
                g.fill(&mut noise, sigma);
                data.extend(example.data().iter().zip(&noise).map(|(x, z)| x + z));
            }
            let logits = net.predict_logits(&Tensor::new(shape, data)?)?;
            let mut counts = vec![0u64; classes];
            ops::argmax_rows(&logits).into_iter().for_each(|c| counts[c] += 1);
            Ok(counts)
        })
        .collect();
    let mut total = vec![0u64; classes];
    for c in partial? {
        total.iter_mut().zip(c).for_each(|(t, v)| *t += v);
    }
    Ok(total)
}

/// Index of the largest count (lowest index on ties) and the runner-up.
fn top_two(counts: &[u64]) -> (usize, usize) {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    (order[0], order.get(1).copied().unwrap_or(order[0]))
}

/// Smoothed prediction from `n0` noisy samples: the top class if a
/// two-sided binomial test separates it from the runner-up at level
/// `alpha`, otherwise abstain.
pub fn smoothed_predict<C: Classifier + ?Sized>(net: &C, x: &Tensor, index: u64, cfg: &SmoothingConfig) -> Result<Decision> {
    cfg.validate()?;
    let counts = sample_counts(net, x, index, streams::SELECTION, cfg.n0, cfg.sigma, cfg.mc_batch, cfg.seed)?;
    let (a, b) = top_two(&counts);
    let (na, nb) = (counts[a], if a == b { 0 } else { counts[b] });
    if binom_test_half(na, na + nb)? > cfg.alpha {
        Ok(Decision::Abstain)
    } else {
        Ok(Decision::Class(a))
    }
}

/// Certifies one example `x` (`[1, ...]`): selects a class from `n0`
/// samples, lower-bounds its probability from `n` fresh samples and returns
/// `R = σ·Φ⁻¹(p_A)` when that bound exceeds 1/2.
pub fn certify<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    index: u64,
    label: Option<usize>,
    cfg: &SmoothingConfig,
) -> Result<CertificationResult> {
    cfg.validate()?;
    let selection = sample_counts(net, x, index, streams::SELECTION, cfg.n0, cfg.sigma, cfg.mc_batch, cfg.seed)?;
    let (c_hat, _) = top_two(&selection);
    let counts = sample_counts(net, x, index, streams::ESTIMATION, cfg.n, cfg.sigma, cfg.mc_batch, cfg.seed)?;
    let p_a_lower = binom_lower_bound(counts[c_hat], cfg.n, cfg.alpha)?;
    let (decision, radius) = decide(p_a_lower, c_hat, cfg.sigma)?;
    Ok(CertificationResult {
        index,
        label,
        decision,
        p_a_lower,
        radius,
        sigma: cfg.sigma,
        n: cfg.n,
        n0: cfg.n0,
        alpha: cfg.alpha,
        counts,
    })
}

/// Decision and radius for a probability lower bound on class `class`.
pub fn decide(p_a_lower: f64, class: usize, sigma: f64) -> Result<(Decision, f64)> {
    if p_a_lower <= 0.5 {
        return Ok((Decision::Abstain, 0.0));
    }
    Ok((Decision::Class(class), sigma * phi_inv(p_a_lower)?))
}

/// Certifies every example of `images` with one fixed classifier.
pub fn certify_batch<C: Classifier + ?Sized>(
    net: &C,
    images: &Tensor,
    labels: Option<&[usize]>,
    first_index: u64,
    cfg: &SmoothingConfig,
) -> Result<Vec<CertificationResult>> {
    (0..images.batch_size())
        .map(|i| {
            let x = images.select(&[i]);
            certify(net, &x, first_index + i as u64, labels.map(|l| l[i]), cfg)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptOptions {
    pub rho: f64,
    /// Leave the certified example out of the statistics it is certified with.
    #[serde(default)]
    pub exclude_self: bool,
}

/// Adapts a copy of `net` on `batch` plus Gaussian noise of scale `σ` with
/// momentum `rho`, then certifies every batch element with that fixed
/// classifier. With `exclude_self`, each example gets its own adaptation on
/// the remaining ones.
pub fn adapt_then_certify(
    net: &Network,
    batch: &Tensor,
    labels: Option<&[usize]>,
    first_index: u64,
    opts: &AdaptOptions,
    cfg: &SmoothingConfig,
) -> Result<Vec<CertificationResult>> {
    cfg.validate()?;
    let n = batch.batch_size();
    if batch.is_empty() || n == 0 {
        return Err(Error::EmptyBatch);
    }
    let min = if opts.exclude_self { 3 } else { 2 };
    if n < min {
        return Err(Error::BatchTooSmall(n));
    }
    let mut noisy = batch.clone();
    let d = batch.example_len();
    add_gaussian_noise(noisy.data_mut(), d, cfg.sigma, cfg.seed, &[streams::ADAPT_NOISE], first_index);
    if !opts.exclude_self {
        let mut adapted = net.clone();
        adapted.adapt(&noisy, opts.rho)?;
        return certify_batch(&adapted, batch, labels, first_index, cfg);
    }
    (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut adapted = net.clone();
            adapted.adapt(&noisy.select(&others), opts.rho)?;
            certify(&adapted, &batch.select(&[i]), first_index + i as u64, labels.map(|l| l[i]), cfg)
        })
        .collect()
}

/// Certified accuracy at each radius: the fraction of results whose decision
/// equals the label and whose radius is at least `r`.
pub fn certified_accuracy_curve(results: &[CertificationResult], labels: &[usize], radii: &[f64]) -> Vec<(f64, f64)> {
    assert_eq!(results.len(), labels.len(), "results and labels must align");
    let total = results.len().max(1) as f64;
    radii
        .iter()
        .map(|&r| {
            let hits = results
                .iter()
                .zip(labels)
                .filter(|(res, &y)| res.decision == Decision::Class(y) && res.radius >= r)
                .count();
            (r, hits as f64 / total)
        })
        .collect()
}

/// ℓ∞ radius certified by an ℓ2 radius in `d` dimensions.
pub fn linf_radius_from_l2(r2: f64, d: usize) -> f64 {
    r2 / (d as f64).sqrt()
}

/// ℓ2 radius whose ball contains the ℓ∞ ball of radius `r_inf` in `d` dimensions.
pub fn l2_radius_for_linf(r_inf: f64, d: usize) -> f64 {
    r_inf * (d as f64).sqrt()
}

pub fn write_jsonl(results: &[CertificationResult], mut out: impl Write) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|source| Error::Io { path: "<jsonl>".into(), source })?;
    }
    Ok(())
}

pub fn write_curve_csv(curve: &[(f64, f64)], mut out: impl Write) -> Result<()> {
    let io = |source| Error::Io { path: "<csv>".into(), source };
    writeln!(out, "radius,accuracy").map_err(io)?;
    for (r, a) in curve {
        writeln!(out, "{r},{a}").map_err(io)?;
    }
    Ok(())
}
