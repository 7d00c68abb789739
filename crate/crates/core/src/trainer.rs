//! Clean, Gaussian-augmented and adversarial training with SGD and early
//! stopping on robust validation accuracy; noisy / adaptive evaluation.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, ThreatModel};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::network::{BnMode, Classifier, Network};
use crate::rng::{add_gaussian_noise, derive_seed, streams};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Clean,
    GaussianAug { sigma: f64 },
    Adversarial { threat: ThreatModel, attack: AttackConfig },
}

/// Statistics used by batch norm while training-time adversarial examples
/// are crafted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackBn {
    /// Statistics of the batch being attacked; running statistics untouched.
    #[default]
    Batch,
    /// Running statistics accumulated so far.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`;
    /// empty means 50% and 75% of `epochs`.
    #[serde(default)]
    pub decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub regime: Regime,
    pub early_stop: bool,
    pub val_fraction: f64,
    #[serde(default)]
    pub attack_bn: AttackBn,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            decay_epochs: Vec::new(),
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            regime: Regime::Clean,
            early_stop: true,
            val_fraction: 0.1,
            attack_bn: AttackBn::Batch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.epochs == 0 || self.batch_size < 2 {
            return bad("epochs must be ≥ 1 and batch_size ≥ 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.lr_decay <= 0.0 {
            return bad("momentum must lie in [0, 1), weight_decay ≥ 0, lr_decay > 0".into());
        }
        match &self.regime {
            Regime::Clean => {}
            Regime::GaussianAug { sigma } => {
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad(format!("augmentation sigma must be ≥ 0, got {sigma}"));
                }
            }
            Regime::Adversarial { threat, attack } => {
                threat.validate()?;
                attack.validate()?;
            }
        }
        Ok(())
    }

    fn decay_points(&self) -> Vec<usize> {
        if self.decay_epochs.is_empty() {
            vec![self.epochs / 2, self.epochs * 3 / 4]
        } else {
            self.decay_epochs.clone()
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_points().iter().filter(|&&e| e > 0 && epoch >= e).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the (possibly perturbed) training inputs seen this epoch.
    pub train_accuracy: f64,
    pub val_clean_accuracy: f64,
    /// PGD accuracy for adversarial training, clean accuracy otherwise.
    pub val_robust_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub early_stop: bool,
    pub param_count: usize,
    pub train_size: usize,
    pub val_size: usize,
}

pub struct TrainOutcome {
    /// Checkpoint with the best robust validation accuracy (or the last one
    /// when early stopping is off). Frozen mode.
    pub best: Network,
    /// Checkpoint after the final epoch. Frozen mode.
    pub last: Network,
    pub report: TrainReport,
}

fn frozen(net: &Network) -> Result<Network> {
    let mut out = net.clone();
    out.set_mode(BnMode::Frozen)?;
    Ok(out)
}

fn craft(net: &Network, x: &Tensor, labels: &[usize], cfg: &TrainConfig, epoch: usize, batch: usize) -> Result<Tensor> {
    match &cfg.regime {
        Regime::Clean => Ok(x.clone()),
        Regime::GaussianAug { sigma } => {
            let mut noisy = x.clone();
            let d = x.example_len();
            add_gaussian_noise(noisy.data_mut(), d, *sigma, cfg.seed, &[streams::AUG_NOISE, epoch as u64, batch as u64], 0);
            Ok(noisy)
        }
        Regime::Adversarial { threat, attack } => {
            let acfg = AttackConfig { seed: derive_seed(attack.seed, &[epoch as u64, batch as u64]), ..*attack };
            let use_running = cfg.attack_bn == AttackBn::Running && net.batch_norms().all(|bn| bn.has_running_stats());
            let out = if use_running {
                attacks::pgd(&frozen(net)?, x, labels, threat, &acfg)?
            } else {
                attacks::pgd(net, x, labels, threat, &acfg)?
            };
            Ok(out.adversarial)
        }
    }
}

/// Robust validation accuracy used for checkpoint selection.
fn robust_accuracy(net: &Network, val: &Dataset, cfg: &TrainConfig, batch_size: usize) -> Result<(f64, f64)> {
    let mut clean = 0usize;
    let mut robust = 0usize;
    for (b, batch) in crate::data::sequential_batches(val, batch_size).enumerate() {
        let pred = net.predict(&batch.images)?;
        clean += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        if let Regime::Adversarial { threat, attack } = &cfg.regime {
            let acfg = AttackConfig { seed: derive_seed(attack.seed, &[u64::MAX, b as u64]), ..*attack };
            let adv = attacks::pgd(net, &batch.images, &batch.labels, threat, &acfg)?.adversarial;
            let pred = net.predict(&adv)?;
            robust += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
        }
    }
    let n = val.len().max(1) as f64;
    let clean = clean as f64 / n;
    let robust = match cfg.regime {
        Regime::Adversarial { .. } => robust as f64 / n,
        _ => clean,
    };
    Ok((clean, robust))
}

/// Trains `net` on a stratified split of `dataset`, holding out
/// `cfg.val_fraction` for validation. Training batches of a single example
/// are skipped since batch statistics need two.
pub fn train(mut net: Network, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    net.set_mode(BnMode::Train)?;
    let splits = dataset.split(cfg.val_fraction, 0.0, derive_seed(cfg.seed, &[streams::SPLIT]))?;
    let (train_set, val_set) = (splits.train, splits.val);
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::Dataset(format!("split left {} train / {} validation examples", train_set.len(), val_set.len())));
    }
    let param_count = net.param_count();
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Network)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        let shuffle_seed = derive_seed(cfg.seed, &[streams::SHUFFLE, epoch as u64]);
        for (b, batch) in batches(&train_set, cfg.batch_size, shuffle_seed).enumerate() {
            if batch.labels.len() < 2 {
                continue;
            }
            let inputs = craft(&net, &batch.images, &batch.labels, cfg, epoch, b)
                .map_err(|e| Error::Diverged { epoch, source: Box::new(e) })?;
            let mut g = Graph::new();
            let x = g.leaf(inputs, false);
            let (logits, params) = net.forward_train(&mut g, x).map_err(|e| Error::Diverged { epoch, source: Box::new(e) })?;
            let loss = g.cross_entropy(logits, &batch.labels).map_err(|e| Error::Diverged { epoch, source: Box::new(e) })?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, source: Box::new(Error::NonFinite { op: "training loss" }) });
            }
            let pred = crate::tensor::ops::argmax_rows(g.value(logits));
            correct += pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
            loss_sum += value * batch.labels.len() as f64;
            seen += batch.labels.len();
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = params.iter().map(|&p| g.grad(p).expect("parameter leaf").to_vec()).collect();
            for ((p, v), grad) in net.params_mut().into_iter().zip(velocity.iter_mut()).zip(grads) {
                for ((w, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                    *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *w;
                    *w -= lr * *vi;
                }
                if p.data().iter().any(|w| !w.is_finite()) {
                    return Err(Error::Diverged { epoch, source: Box::new(Error::NonFinite { op: "parameter update" }) });
                }
            }
        }
        let snapshot = frozen(&net)?;
        let (val_clean, val_robust) = robust_accuracy(&snapshot, &val_set, cfg, cfg.batch_size.max(64)).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, source: Box::new(e) },
            e => e,
        })?;
        records.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val_clean_accuracy: val_clean,
            val_robust_accuracy: val_robust,
        });
        if best.as_ref().is_none_or(|(acc, _, _)| val_robust > *acc) {
            best = Some((val_robust, epoch, snapshot));
        }
    }
    debug_assert_eq!(net.param_count(), param_count);
    let last = frozen(&net)?;
    let (selected_epoch, best) = match (cfg.early_stop, best) {
        (true, Some((_, epoch, net))) => (epoch, net),
        _ => (cfg.epochs - 1, last.clone()),
    };
    let report = TrainReport {
        epochs: records,
        selected_epoch,
        early_stop: cfg.early_stop,
        param_count,
        train_size: train_set.len(),
        val_size: val_set.len(),
    };
    Ok(TrainOutcome { best, last, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Standard deviation of Gaussian noise added to every test image.
    pub sigma: f64,
    /// When set, each test batch re-estimates batch-norm statistics with this
    /// momentum before it is classified.
    pub rho: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { sigma: 0.0, rho: None, batch_size: 128, seed: 0 }
    }
}

/// Top-1 accuracy of `net` on `dataset` under `opts`. Test images are
/// shuffled into batches; a trailing batch of one example is merged into its
/// predecessor so adaptation always sees at least two.
pub fn evaluate(net: &Network, dataset: &Dataset, opts: &EvalOptions) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let base = if net.mode() == BnMode::Frozen { net.clone() } else { frozen(net)? };
    let order = crate::data::permutation(dataset.len(), derive_seed(opts.seed, &[streams::SHUFFLE]));
    let mut chunks: Vec<&[usize]> = order.chunks(opts.batch_size.max(2)).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        chunks.pop();
        let tail = chunks.len() - 1;
        chunks[tail] = &order[tail * opts.batch_size.max(2)..];
    }
    let d = dataset.images.example_len();
    let mut correct = 0usize;
    for idx in chunks {
        let mut x = dataset.images.select(idx);
        if opts.sigma > 0.0 {
            for (row, &i) in idx.iter().enumerate() {
                add_gaussian_noise(x.example_slice_mut(row), d, opts.sigma, opts.seed, &[streams::EVAL_NOISE], i as u64);
            }
        }
        let pred = match opts.rho {
            Some(rho) if idx.len() >= 2 => {
                let mut adapted = base.clone();
                adapted.adapt(&x, rho)?;
                adapted.predict(&x)?
            }
            _ => base.predict(&x)?,
        };
        correct += idx.iter().zip(pred).filter(|(&i, p)| dataset.labels[i] == *p).count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}
