//! Experiment configuration: built-in defaults, deep-merged with an optional
//! JSON file, then with `key.path=value` overrides. Unknown keys are errors.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use smoothcert::attacks::{AttackConfig, Norm, ThreatModel};
use smoothcert::corruptions::CorruptionKind;
use smoothcert::network::BlendRule;
use smoothcert::smoothing::{AdaptOptions, SmoothingConfig};
use smoothcert::trainer::{AttackBn, Regime, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub noise: NoiseSection,
    pub smoothing: SmoothingSection,
    pub adapt: AdaptSection,
    pub corruption: CorruptionSection,
    pub grad_map: GradMapSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub test_fraction: f64,
    /// Directory holding `train.rten` / `test.rten`; `output_dir` when null.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    /// Checkpoint read by evaluation commands; `<output_dir>/model.rten` when null.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeKind {
    Clean,
    Gaussian,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub regime: RegimeKind,
    /// Augmentation noise for the gaussian regime.
    pub sigma: f64,
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    /// Default step size of the threat model when null.
    pub step_size: Option<f64>,
    pub early_stop: bool,
    pub val_fraction: f64,
    pub attack_bn: AttackBn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub random_start: bool,
    /// Ensemble size of the expectation-over-transformation attack.
    pub eot_m: usize,
    /// Examples attacked from the test split; all when null.
    pub max_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSection {
    pub sigma: f64,
    pub n0: u64,
    pub n: u64,
    pub alpha: f64,
    pub mc_batch: usize,
    pub radii: Vec<f64>,
    pub max_examples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    /// Momentum of test-time batch-norm adaptation; none when null.
    pub rho: Option<f64>,
    pub batch_size: usize,
    pub blend: BlendRule,
    pub exclude_self: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub kinds: Vec<CorruptionKind>,
    /// Error table (JSON) of the reference model for mCE / rmCE.
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradMapSection {
    pub examples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataSection { classes: 4, per_class: 100, size: 16, test_fraction: 0.25, dir: None },
            model: ModelSection { hidden: 32, checkpoint: None },
            train: TrainSection {
                epochs: train.epochs,
                batch_size: train.batch_size,
                lr: train.lr,
                decay_epochs: train.decay_epochs,
                lr_decay: train.lr_decay,
                momentum: train.momentum,
                weight_decay: train.weight_decay,
                regime: RegimeKind::Clean,
                sigma: 0.25,
                norm: Norm::L2,
                epsilon: 0.5,
                steps: 5,
                step_size: None,
                early_stop: train.early_stop,
                val_fraction: train.val_fraction,
                attack_bn: train.attack_bn,
            },
            attack: AttackSection {
                norm: Norm::L2,
                epsilon: 0.5,
                steps: 20,
                step_size: None,
                random_start: true,
                eot_m: 1,
                max_examples: None,
            },
            noise: NoiseSection { sigmas: vec![0.0, 0.1, 0.25, 0.5] },
            smoothing: SmoothingSection {
                sigma: 0.25,
                n0: 100,
                n: 1000,
                alpha: 0.001,
                mc_batch: 500,
                radii: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5],
                max_examples: Some(100),
            },
            adapt: AdaptSection { rho: None, batch_size: 128, blend: BlendRule::StdDev, exclude_self: false },
            corruption: CorruptionSection { kinds: CorruptionKind::ALL.to_vec(), reference: None },
            grad_map: GradMapSection { examples: 4 },
        }
    }
}

impl ExperimentConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.model.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.rten"))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        let regime = match t.regime {
            RegimeKind::Clean => Regime::Clean,
            RegimeKind::Gaussian => Regime::GaussianAug { sigma: t.sigma },
            RegimeKind::Adversarial => {
                let threat = ThreatModel::new(t.norm, t.epsilon)?;
                let step_size = t.step_size.unwrap_or_else(|| threat.default_step_size());
                let attack = AttackConfig { steps: t.steps, step_size, random_start: true, eot_models: 1, seed: self.seed };
                Regime::Adversarial { threat, attack }
            }
        };
        let cfg = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            decay_epochs: t.decay_epochs.clone(),
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            regime,
            early_stop: t.early_stop,
            val_fraction: t.val_fraction,
            attack_bn: t.attack_bn,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn threat(&self) -> Result<ThreatModel> {
        Ok(ThreatModel::new(self.attack.norm, self.attack.epsilon)?)
    }

    pub fn attack_config(&self) -> Result<AttackConfig> {
        let threat = self.threat()?;
        let a = &self.attack;
        let cfg = AttackConfig {
            steps: a.steps,
            step_size: a.step_size.unwrap_or_else(|| threat.default_step_size()),
            random_start: a.random_start,
            eot_models: a.eot_m,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn smoothing_config(&self) -> Result<SmoothingConfig> {
        let s = &self.smoothing;
        let cfg = SmoothingConfig { sigma: s.sigma, n0: s.n0, n: s.n, alpha: s.alpha, mc_batch: s.mc_batch, seed: self.seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adapt_options(&self) -> Option<AdaptOptions> {
        self.adapt.rho.map(|rho| AdaptOptions { rho, exclude_self: self.adapt.exclude_self })
    }

    /// Checks cross-field constraints that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        if let Some(rho) = self.adapt.rho {
            if !(0.0..=1.0).contains(&rho) {
                bail!("adapt.rho must lie in [0, 1], got {rho}");
            }
        }
        if self.adapt.batch_size < 2 {
            bail!("adapt.batch_size must be at least 2");
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            bail!("data.test_fraction must lie in (0, 1)");
        }
        if self.noise.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            bail!("noise.sigmas must be finite and non-negative");
        }
        if self.smoothing.radii.iter().any(|r| !r.is_finite()) {
            bail!("smoothing.radii must be finite");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact, key-sorted) JSON encoding,
    /// with the output and input locations blanked: the same experiment run
    /// in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut located = self.clone();
        located.output_dir = PathBuf::new();
        located.data.dir = None;
        located.model.checkpoint = None;
        let canonical = serde_json::to_vec(&serde_json::to_value(&located).expect("config serializes")).expect("value serializes");
        Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override value as JSON, falling back to a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the leaf at dotted `path`, creating intermediate objects; unknown
/// leaves survive here and are rejected when the document is deserialized.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed config path {path:?}");
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            bail!("config path {path:?} descends into a non-object at {part:?}");
        }
        cur = cur.as_object_mut().expect("checked").entry(*part).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = cur.as_object_mut().ok_or_else(|| anyhow!("config path {path:?} descends into a non-object"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(raw: &str) -> Result<(String, Value)> {
    let (k, v) = raw.split_once('=').ok_or_else(|| anyhow!("override {raw:?} is not of the form key=value"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Resolves defaults ← file ← overrides (applied in order).
pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(ExperimentConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if !patch.is_object() {
            bail!("config {} must be a JSON object", path.display());
        }
        merge(&mut doc, patch);
    }
    for (path, value) in overrides {
        set_path(&mut doc, path, value.clone())?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).context("configuration does not match the schema")?;
    cfg.validate()?;
    Ok(cfg)
}
