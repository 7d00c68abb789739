//! FGSM, PGD and expectation-over-transformation attacks under ℓ∞ / ℓ2
//! threat models.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Classifier, Network};
use crate::rng::{chacha, streams, uniform, GaussianStream};
use crate::tensor::{kernels, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// The perturbation set `{δ : ‖δ‖_p ≤ ε}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThreatModel {
    pub norm: Norm,
    pub epsilon: f64,
}

impl ThreatModel {
    /// `epsilon = 0` is accepted and describes the trivial set `{0}`.
    pub fn new(norm: Norm, epsilon: f64) -> Result<Self> {
        let tm = Self { norm, epsilon };
        tm.validate()?;
        Ok(tm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Step size used when none is given: ε/4 for ℓ∞, ε/8.5 for ℓ2.
    pub fn default_step_size(&self) -> f64 {
        match self.norm {
            Norm::Linf => self.epsilon / 4.0,
            Norm::L2 => self.epsilon / 8.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// `0` leaves the (random) start point as the result.
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub eot_models: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(tm: &ThreatModel, steps: usize, seed: u64) -> Self {
        Self { steps, step_size: tm.default_step_size(), random_start: true, eot_models: 1, seed }
    }

    /// Single full-size signed step from the clean point.
    pub fn fgsm(tm: &ThreatModel) -> Self {
        Self { steps: 1, step_size: tm.epsilon, random_start: false, eot_models: 1, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.eot_models == 0 {
            return Err(Error::InvalidConfig("eot_models must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn norm(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        Norm::L2 => kernels::dot(v, v).sqrt(),
    }
}

/// Steepest-ascent direction: elementwise sign for ℓ∞, `g/‖g‖₂` for ℓ2.
/// A zero gradient maps to zero.
pub fn q_p(g: &[f64], kind: Norm) -> Vec<f64> {
    match kind {
        Norm::Linf => g.iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect(),
        Norm::L2 => {
            let n = norm(g, Norm::L2);
            if n == 0.0 {
                vec![0.0; g.len()]
            } else {
                g.iter().map(|v| v / n).collect()
            }
        }
    }
}

/// Projects one example's perturbation onto the threat model in place.
/// Points already inside are left bit-identical.
pub fn project(delta: &mut [f64], tm: &ThreatModel) {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Linf => delta.iter_mut().for_each(|d| *d = d.clamp(-eps, eps)),
        Norm::L2 => {
            let n = norm(delta, Norm::L2);
            if n > eps {
                let s = eps / n;
                delta.iter_mut().for_each(|d| *d *= s);
                // Rounding can leave the product an ulp outside the ball.
                let mut m = norm(delta, Norm::L2);
                while m > eps {
                    delta.iter_mut().for_each(|d| *d *= 1.0 - f64::EPSILON);
                    m = norm(delta, Norm::L2);
                }
            }
        }
    }
}

/// Uniform sample from the threat model: the ℓ∞ box, or the ℓ2 ball.
pub fn sample_uniform(tm: &ThreatModel, dims: usize, seed: u64, parts: &[u64]) -> Vec<f64> {
    let eps = tm.epsilon;
    match tm.norm {
        Norm::Linf => {
            let mut rng = chacha(seed, parts);
            (0..dims).map(|_| eps * (2.0 * uniform(&mut rng) - 1.0)).collect()
        }
        Norm::L2 => {
            let mut g = GaussianStream::new(seed, parts);
            let mut dir = vec![0.0; dims];
            g.fill(&mut dir, 1.0);
            let n = norm(&dir, Norm::L2);
            let r = eps * libm::pow(uniform(g.rng_mut()), 1.0 / dims as f64);
            let mut out: Vec<f64> = dir.iter().map(|d| if n > 0.0 { r * d / n } else { 0.0 }).collect();
            project(&mut out, tm);
            out
        }
    }
}

/// Adversarial batch plus the mean loss before the first and after every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    pub losses: Vec<f64>,
}

impl AttackOutcome {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("losses hold at least the starting point")
    }
}

enum Objective {
    CrossEntropy,
    Ensemble,
}

/// Mean loss and `∂loss/∂x` of `models` at `x`.
fn loss_and_grad<C: Classifier + ?Sized>(
    models: &[&C],
    x: &Tensor,
    labels: &[usize],
    objective: &Objective,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    // A one-model ensemble objective is the cross-entropy; sharing the op
    // keeps eot_pgd with m = 1 bit-identical to pgd.
    let loss = match objective {
        Objective::Ensemble if models.len() == 1 => {
            let logits = models[0].logits(&mut g, xv)?;
            g.cross_entropy(logits, labels)?
        }
        Objective::CrossEntropy => {
            let logits = models[0].logits(&mut g, xv)?;
            g.cross_entropy(logits, labels)?
        }
        Objective::Ensemble => {
            let mut all = Vec::with_capacity(models.len());
            for m in models {
                all.push(m.logits(&mut g, xv)?);
            }
            g.ensemble_nll(&all, labels)?
        }
    };
    let value = g.value(loss).item();
    g.backward(loss)?;
    let grad = g.grad(xv).expect("input is a gradient leaf").to_vec();
    Ok((value, grad))
}

/// `x + δ` clamped to `[0, 1]`; `δ` is replaced by the realised perturbation.
fn apply(x: &[f64], delta: &mut [f64], out: &mut [f64]) {
    for ((o, d), &xi) in out.iter_mut().zip(delta.iter_mut()).zip(x) {
        *o = (xi + *d).clamp(0.0, 1.0);
        *d = *o - xi;
    }
}

fn run<C: Classifier + ?Sized>(
    models: &[&C],
    x: &Tensor,
    labels: &[usize],
    tm: &ThreatModel,
    cfg: &AttackConfig,
    objective: Objective,
) -> Result<AttackOutcome> {
    tm.validate()?;
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if x.batch_size() != labels.len() {
        return Err(Error::ShapeMismatch { op: "attack", detail: format!("{} labels for {:?}", labels.len(), x.shape()) });
    }
    let n = x.batch_size();
    let d = x.example_len();
    let mut delta = vec![0.0; x.len()];
    if cfg.random_start {
        for i in 0..n {
            let s = sample_uniform(tm, d, cfg.seed, &[streams::ATTACK_START, i as u64]);
            delta[i * d..(i + 1) * d].copy_from_slice(&s);
        }
    }
    let mut adv = x.clone();
    let check = |delta: &[f64]| {
        for chunk in delta.chunks(d) {
            let m = norm(chunk, tm.norm);
            assert!(m <= tm.epsilon * (1.0 + 1e-12), "perturbation norm {m} exceeds {}", tm.epsilon);
        }
    };
    let step_to = |delta: &mut [f64], adv: &mut Tensor| {
        for (dc, (xc, ac)) in delta.chunks_mut(d).zip(x.data().chunks(d).zip(adv.data_mut().chunks_mut(d))) {
            project(dc, tm);
            apply(xc, dc, ac);
            project(dc, tm);
        }
    };
    step_to(&mut delta, &mut adv);
    check(&delta);

    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let (loss, grad) = loss_and_grad(models, &adv, labels, &objective)
            .map_err(|e| Error::AttackDiverged { step, source: Box::new(e) })?;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::AttackDiverged { step, source: Box::new(Error::NonFinite { op: "attack loss" }) });
        }
        losses.push(loss);
        for (dc, gc) in delta.chunks_mut(d).zip(grad.chunks(d)) {
            let dir = q_p(gc, tm.norm);
            kernels::axpy(cfg.step_size, &dir, dc);
        }
        step_to(&mut delta, &mut adv);
        check(&delta);
    }
    let (loss, _) = loss_and_grad(models, &adv, labels, &objective)
        .map_err(|e| Error::AttackDiverged { step: cfg.steps, source: Box::new(e) })?;
    if !loss.is_finite() {
        return Err(Error::AttackDiverged { step: cfg.steps, source: Box::new(Error::NonFinite { op: "attack loss" }) });
    }
    losses.push(loss);
    Ok(AttackOutcome { adversarial: adv, losses })
}

/// Projected gradient ascent on the cross-entropy of `net`.
pub fn pgd<C: Classifier + ?Sized>(
    net: &C,
    x: &Tensor,
    labels: &[usize],
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    run(&[net], x, labels, tm, cfg, Objective::CrossEntropy)
}

pub fn fgsm<C: Classifier + ?Sized>(net: &C, x: &Tensor, labels: &[usize], tm: &ThreatModel) -> Result<AttackOutcome> {
    run(&[net], x, labels, tm, &AttackConfig::fgsm(tm), Objective::CrossEntropy)
}

/// PGD against an ensemble on `−log((1/m)·Σᵢ softmax(fᵢ(x+δ))_y)`.
pub fn eot_pgd<C: Classifier + ?Sized>(
    models: &[&C],
    x: &Tensor,
    labels: &[usize],
    tm: &ThreatModel,
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    run(models, x, labels, tm, cfg, Objective::Ensemble)
}

/// `m` copies of `base`, each adapted with momentum `rho` on `batch` shifted
/// by an independent uniform perturbation from `tm`.
pub fn make_eot_ensemble(
    base: &Network,
    batch: &Tensor,
    m: usize,
    tm: &ThreatModel,
    rho: f64,
    seed: u64,
) -> Result<Vec<Network>> {
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let d = batch.example_len();
    (0..m)
        .map(|j| {
            let mut shifted = batch.clone();
            for i in 0..batch.batch_size() {
                let mut delta = sample_uniform(tm, d, seed, &[streams::EOT_PERTURB, j as u64, i as u64]);
                let row = shifted.example_slice_mut(i);
                let clean = row.to_vec();
                apply(&clean, &mut delta, row);
            }
            let mut net = base.clone();
            net.adapt(&shifted, rho)?;
            Ok(net)
        })
        .collect()
}

/// Fraction of `labels` that `net` still predicts correctly on `adversarial`.
pub fn accuracy<C: Classifier + ?Sized>(net: &C, images: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = net.predict(images)?;
    Ok(pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}
