//! One function per subcommand. Each returns its report payload, CSV table
//! and a flat summary that `sweep` aggregates.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use smoothcert::attacks::{self, eot_pgd, fgsm, make_eot_ensemble, pgd, AttackConfig};
use smoothcert::corruptions::{evaluate_corruptions, CorruptionReport, ErrorTable};
use smoothcert::data::{gen_synthetic, Dataset, Manifest};
use smoothcert::network::{checkpoint, Architecture, BnMode, Classifier, Network};
use smoothcert::rng::{derive_seed, streams};
use smoothcert::smoothing::{adapt_then_certify, certified_accuracy_curve, certify_batch, write_jsonl, CertificationResult, Decision};
use smoothcert::trainer::{evaluate, train, EvalOptions};
use smoothcert::Tensor;

use crate::config::{self, ExperimentConfig};
use crate::output::{cell, write_json, write_pgm, Csv, ConfigError, Envelope};

pub struct Outcome {
    pub report: Value,
    pub csv: Csv,
    pub summary: BTreeMap<String, f64>,
}

fn outcome(report: impl Serialize, csv: Csv, summary: BTreeMap<String, f64>) -> Result<Outcome> {
    Ok(Outcome { report: serde_json::to_value(report)?, csv, summary })
}

fn load_split(cfg: &ExperimentConfig, name: &str) -> Result<Dataset> {
    let path = cfg.data_dir().join(format!("{name}.rten"));
    Dataset::load(&path).with_context(|| format!("loading {name} split {}", path.display()))
}

fn head(ds: &Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds.clone(),
    }
}

/// Loads the configured checkpoint in frozen mode with the configured blend rule.
pub fn load_model(cfg: &ExperimentConfig) -> Result<Network> {
    let path = cfg.checkpoint();
    let (mut net, sidecar) = checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if !sidecar.trained {
        bail!("checkpoint {} has no running statistics", path.display());
    }
    net.set_mode(BnMode::Frozen)?;
    net.set_blend_rule(cfg.adapt.blend);
    Ok(net)
}

/// Sequential index chunks of at least two examples (a trailing single joins
/// its predecessor), matching how adaptation batches are formed.
fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let size = size.max(2);
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

pub fn gen_data(cfg: &ExperimentConfig) -> Result<Outcome> {
    let d = &cfg.data;
    let ds = gen_synthetic(d.classes, d.per_class, d.size, cfg.seed)?;
    let outer = ds.split(0.0, d.test_fraction, derive_seed(cfg.seed, &[streams::DATA]))?;
    // Report the train / validation sizes the trainer will use.
    let inner = outer.train.split(cfg.train.val_fraction, 0.0, derive_seed(cfg.seed, &[streams::SPLIT]))?;
    let manifest = Manifest {
        seed: cfg.seed,
        k: d.classes,
        n: ds.len(),
        size: d.size,
        splits: smoothcert::data::SplitSizes { train: inner.train.len(), val: inner.val.len(), test: outer.test.len() },
    };
    let dir = cfg.data_dir();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    outer.train.save(&dir.join("train.rten"))?;
    outer.test.save(&dir.join("test.rten"))?;
    write_json(&dir.join("manifest.json"), &manifest)?;

    let mut csv = Csv::new(&["split", "class", "count"]);
    for (name, part) in [("train", &inner.train), ("val", &inner.val), ("test", &outer.test)] {
        for (c, n) in part.class_counts().iter().enumerate() {
            csv.row(&[name.into(), c.to_string(), n.to_string()]);
        }
    }
    let summary = BTreeMap::from([
        ("train".to_string(), manifest.splits.train as f64),
        ("val".to_string(), manifest.splits.val as f64),
        ("test".to_string(), manifest.splits.test as f64),
    ]);
    outcome(&manifest, csv, summary)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn last_checkpoint_path(best: &Path) -> PathBuf {
    let stem = best.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    best.with_file_name(format!("{stem}_last.rten"))
}

pub fn train_cmd(cfg: &ExperimentConfig) -> Result<Outcome> {
    let ds = load_split(cfg, "train")?;
    let tc = cfg.train_config().context(ConfigError)?;
    let arch = Architecture::reference(ds.image_shape(), ds.classes, cfg.model.hidden);
    let net = Network::new(arch, cfg.seed)?;
    let out = train(net, &ds, &tc)?;
    let best_path = cfg.checkpoint();
    if let Some(parent) = best_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let last_path = last_checkpoint_path(&best_path);
    let meta = |variant: &str, epoch: usize| json!({ "variant": variant, "epoch": epoch, "config_hash": cfg.hash() });
    checkpoint::save(&out.best, &best_path, meta("best", out.report.selected_epoch))?;
    checkpoint::save(&out.last, &last_path, meta("last", tc.epochs - 1))?;

    let mut csv = Csv::new(&["epoch", "lr", "loss", "train_accuracy", "val_clean_accuracy", "val_robust_accuracy"]);
    for r in &out.report.epochs {
        csv.row(&[
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.train_accuracy.to_string(),
            r.val_clean_accuracy.to_string(),
            r.val_robust_accuracy.to_string(),
        ]);
    }
    let sel = &out.report.epochs[out.report.selected_epoch];
    let last = out.report.epochs.last().expect("at least one epoch");
    let summary = BTreeMap::from([
        ("selected_epoch".to_string(), out.report.selected_epoch as f64),
        ("selected_val_robust_accuracy".to_string(), sel.val_robust_accuracy),
        ("last_val_robust_accuracy".to_string(), last.val_robust_accuracy),
        ("last_train_accuracy".to_string(), last.train_accuracy),
    ]);
    let report = json!({
        "train": out.report,
        "checkpoints": { "best": file_name(&best_path), "last": file_name(&last_path) },
    });
    outcome(report, csv, summary)
}

#[derive(Serialize)]
struct NoiseRow {
    sigma: f64,
    accuracy: f64,
    adapted_accuracy: Option<f64>,
}

pub fn eval_noise(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = load_model(cfg)?;
    let test = load_split(cfg, "test")?;
    let mut rows = Vec::new();
    for &sigma in &cfg.noise.sigmas {
        let opts = EvalOptions { sigma, rho: None, batch_size: cfg.adapt.batch_size, seed: cfg.seed };
        let accuracy = evaluate(&net, &test, &opts)?;
        let adapted_accuracy = match cfg.adapt.rho {
            Some(rho) => Some(evaluate(&net, &test, &EvalOptions { rho: Some(rho), ..opts })?),
            None => None,
        };
        rows.push(NoiseRow { sigma, accuracy, adapted_accuracy });
    }
    let mut csv = Csv::new(&["sigma", "accuracy", "adapted_accuracy"]);
    let mut summary = BTreeMap::new();
    for r in &rows {
        csv.row(&[r.sigma.to_string(), r.accuracy.to_string(), cell(r.adapted_accuracy)]);
        summary.insert(format!("accuracy@sigma={}", r.sigma), r.accuracy);
        if let Some(a) = r.adapted_accuracy {
            summary.insert(format!("adapted_accuracy@sigma={}", r.sigma), a);
        }
    }
    outcome(json!({ "rho": cfg.adapt.rho, "batch_size": cfg.adapt.batch_size, "rows": rows }), csv, summary)
}

#[derive(Default, Serialize)]
struct AttackTally {
    examples: usize,
    clean_correct: usize,
    fgsm_correct: usize,
    robust_correct: usize,
    adaptive_clean_correct: usize,
    adaptive_robust_correct: usize,
    loss_sum: f64,
}

fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, y)| p == y).count()
}

/// How the attack command crafts examples against the frozen network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMethod {
    Pgd,
    /// Expectation over transformation with `attack.eot_m` models.
    Eot,
}

pub fn attack_cmd(cfg: &ExperimentConfig, method: AttackMethod) -> Result<Outcome> {
    let net = load_model(cfg)?;
    let test = head(&load_split(cfg, "test")?, cfg.attack.max_examples);
    let threat = cfg.threat().context(ConfigError)?;
    let base = cfg.attack_config().context(ConfigError)?;
    let mut t = AttackTally::default();
    for (b, range) in chunks(test.len(), cfg.adapt.batch_size).into_iter().enumerate() {
        let idx: Vec<usize> = range.collect();
        let x = test.images.select(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| test.labels[i]).collect();
        let acfg = AttackConfig { seed: derive_seed(cfg.seed, &[streams::ATTACK_START, b as u64]), ..base };
        t.examples += y.len();
        t.clean_correct += correct(&net.predict(&x)?, &y);
        t.fgsm_correct += correct(&net.predict(&fgsm(&net, &x, &y, &threat)?.adversarial)?, &y);
        let adv = match method {
            AttackMethod::Pgd => pgd(&net, &x, &y, &threat, &acfg)?,
            AttackMethod::Eot => {
                let copies: Vec<&Network> = vec![&net; cfg.attack.eot_m];
                eot_pgd(&copies, &x, &y, &threat, &acfg)?
            }
        };
        t.loss_sum += adv.final_loss() * y.len() as f64;
        t.robust_correct += correct(&net.predict(&adv.adversarial)?, &y);

        if let Some(rho) = cfg.adapt.rho {
            // Adapted defence: statistics re-estimated on whatever batch it is shown;
            // the attacker differentiates through models adapted on perturbed batches.
            let mut clean_adapted = net.clone();
            clean_adapted.adapt(&x, rho)?;
            t.adaptive_clean_correct += correct(&clean_adapted.predict(&x)?, &y);
            let ensemble = make_eot_ensemble(&net, &x, cfg.attack.eot_m, &threat, rho, acfg.seed)?;
            let refs: Vec<&Network> = ensemble.iter().collect();
            let adv = eot_pgd(&refs, &x, &y, &threat, &acfg)?.adversarial;
            let mut defended = net.clone();
            defended.adapt(&adv, rho)?;
            t.adaptive_robust_correct += correct(&defended.predict(&adv)?, &y);
        }
    }
    let n = t.examples.max(1) as f64;
    let mut summary = BTreeMap::from([
        ("clean_accuracy".to_string(), t.clean_correct as f64 / n),
        ("fgsm_accuracy".to_string(), t.fgsm_correct as f64 / n),
        ("robust_accuracy".to_string(), t.robust_correct as f64 / n),
        ("mean_final_loss".to_string(), t.loss_sum / n),
    ]);
    if cfg.adapt.rho.is_some() {
        let clean = t.adaptive_clean_correct as f64 / n;
        let robust = t.adaptive_robust_correct as f64 / n;
        summary.insert("adaptive_clean_accuracy".into(), clean);
        summary.insert("adaptive_robust_accuracy".into(), robust);
        summary.insert("adaptive_robust_change".into(), robust - t.robust_correct as f64 / n);
    }
    let mut csv = Csv::new(&["metric", "value"]);
    for (k, v) in &summary {
        csv.row(&[k.clone(), v.to_string()]);
    }
    let method_name = match method {
        AttackMethod::Pgd => "pgd",
        AttackMethod::Eot => "eot",
    };
    let report = json!({
        "method": method_name,
        "threat": threat,
        "attack": base,
        "rho": cfg.adapt.rho,
        "tally": t,
        "metrics": summary,
    });
    outcome(report, csv, summary)
}

/// Certifies the test split; the per-example records go to `jsonl` when given.
pub fn certify_cmd(cfg: &ExperimentConfig, jsonl: Option<&Path>) -> Result<Outcome> {
    let net = load_model(cfg)?;
    let test = head(&load_split(cfg, "test")?, cfg.smoothing.max_examples);
    let scfg = cfg.smoothing_config().context(ConfigError)?;
    let results: Vec<CertificationResult> = match cfg.adapt_options() {
        Some(opts) => {
            let mut all = Vec::with_capacity(test.len());
            for range in chunks(test.len(), cfg.adapt.batch_size) {
                let idx: Vec<usize> = range.clone().collect();
                let y: Vec<usize> = idx.iter().map(|&i| test.labels[i]).collect();
                all.extend(adapt_then_certify(&net, &test.images.select(&idx), Some(&y), range.start as u64, &opts, &scfg)?);
            }
            all
        }
        None => certify_batch(&net, &test.images, Some(&test.labels), 0, &scfg)?,
    };
    if let Some(path) = jsonl {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_jsonl(&results, std::io::BufWriter::new(file))?;
    }
    let curve = certified_accuracy_curve(&results, &test.labels, &cfg.smoothing.radii);
    let n = results.len().max(1) as f64;
    let abstain = results.iter().filter(|r| r.decision == Decision::Abstain).count() as f64 / n;
    let accuracy = results.iter().zip(&test.labels).filter(|(r, &y)| r.decision == Decision::Class(y)).count() as f64 / n;
    let mut csv = Csv::new(&["radius", "accuracy"]);
    let mut summary = BTreeMap::from([("abstain_rate".to_string(), abstain), ("smoothed_accuracy".to_string(), accuracy)]);
    for (r, a) in &curve {
        csv.row(&[r.to_string(), a.to_string()]);
        summary.insert(format!("certified_accuracy@r={r}"), *a);
    }
    let report = json!({
        "smoothing": scfg,
        "rho": cfg.adapt.rho,
        "examples": results.len(),
        "abstain_rate": abstain,
        "smoothed_accuracy": accuracy,
        "curve": curve.iter().map(|(r, a)| json!({ "radius": r, "accuracy": a })).collect::<Vec<_>>(),
    });
    outcome(report, csv, summary)
}

pub fn corrupt_eval(cfg: &ExperimentConfig) -> Result<Outcome> {
    let net = load_model(cfg)?;
    let test = load_split(cfg, "test")?;
    let opts = EvalOptions { sigma: 0.0, rho: cfg.adapt.rho, batch_size: cfg.adapt.batch_size, seed: cfg.seed };
    let errors = evaluate_corruptions(&net, &test, &cfg.corruption.kinds, &opts, cfg.seed)?;
    let reference: Option<ErrorTable> = match &cfg.corruption.reference {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading reference table {}", path.display()))?;
            Some(serde_json::from_str(&text).with_context(|| format!("parsing reference table {}", path.display()))?)
        }
        None => None,
    };
    let report = CorruptionReport::new(errors, reference.as_ref(), &opts)?;
    let mut csv = Csv::new(&["corruption", "severity", "error"]);
    csv.row(&["clean".into(), "0".into(), report.errors.clean.to_string()]);
    let mut summary = BTreeMap::from([("clean_error".to_string(), report.errors.clean)]);
    for (name, errs) in &report.errors.corruptions {
        for (s, e) in errs.iter().enumerate() {
            csv.row(&[name.clone(), (s + 1).to_string(), e.to_string()]);
        }
        summary.insert(format!("{name}_mean_error"), errs.iter().sum::<f64>() / errs.len() as f64);
    }
    if let (Some(m), Some(r)) = (report.mce, report.rmce) {
        summary.insert("mce".into(), m);
        summary.insert("rmce".into(), r);
    }
    outcome(&report, csv, summary)
}

#[derive(Serialize)]
struct GradRow {
    index: usize,
    label: usize,
    raw_l2: f64,
    raw_linf: f64,
    image: String,
}

/// Channel mean of a `[C, H, W]` map.
fn luminance(map: &Tensor) -> Vec<f64> {
    let s = map.shape();
    let (c, plane) = (s[0], s[1] * s[2]);
    (0..plane).map(|p| (0..c).map(|ch| map.data()[ch * plane + p]).sum::<f64>() / c as f64).collect()
}

pub fn grad_map(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let net = load_model(cfg)?;
    let test = head(&load_split(cfg, "test")?, Some(cfg.grad_map.examples));
    let [c, h, w] = test.image_shape();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut rows = Vec::new();
    for i in 0..test.len() {
        let image = Tensor::new(vec![c, h, w], test.images.example_slice(i).to_vec())?;
        let map = net.loss_gradient_map(&image, test.labels[i])?;
        let name = format!("example_{i}.pgm");
        write_pgm(&dir.join(&name), &luminance(&map.display), h, w)?;
        write_pgm(&dir.join(format!("input_{i}.pgm")), &luminance(&image), h, w)?;
        rows.push(GradRow {
            index: i,
            label: test.labels[i],
            raw_l2: attacks::norm(map.raw.data(), attacks::Norm::L2),
            raw_linf: attacks::norm(map.raw.data(), attacks::Norm::Linf),
            image: name,
        });
    }
    let mut csv = Csv::new(&["index", "label", "raw_l2", "raw_linf", "image"]);
    for r in &rows {
        csv.row(&[r.index.to_string(), r.label.to_string(), r.raw_l2.to_string(), r.raw_linf.to_string(), r.image.clone()]);
    }
    let mean = rows.iter().map(|r| r.raw_l2).sum::<f64>() / rows.len().max(1) as f64;
    outcome(json!({ "rows": rows }), csv, BTreeMap::from([("mean_raw_l2".to_string(), mean)]))
}

/// Subcommands a sweep may repeat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepTarget {
    GenData,
    Train,
    EvalNoise,
    Attack(AttackMethod),
    Certify,
    CorruptEval,
    GradMap,
}

impl SweepTarget {
    pub fn name(self) -> &'static str {
        match self {
            SweepTarget::GenData => "gen-data",
            SweepTarget::Train => "train",
            SweepTarget::EvalNoise => "eval-noise",
            SweepTarget::Attack(_) => "attack",
            SweepTarget::Certify => "certify",
            SweepTarget::CorruptEval => "corrupt-eval",
            SweepTarget::GradMap => "grad-map",
        }
    }
}

/// Runs `target` once with outputs under `cfg.output_dir`, writing its
/// report, CSV and resolved config; returns the outcome.
pub fn run_target(target: SweepTarget, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = target.name();
    write_json(&out.join(format!("{name}.config.json")), cfg)?;
    let result = match target {
        SweepTarget::GenData => gen_data(cfg),
        SweepTarget::Train => train_cmd(cfg),
        SweepTarget::EvalNoise => eval_noise(cfg),
        SweepTarget::Attack(m) => attack_cmd(cfg, m),
        SweepTarget::Certify => certify_cmd(cfg, Some(&out.join("certify.jsonl"))),
        SweepTarget::CorruptEval => corrupt_eval(cfg),
        SweepTarget::GradMap => grad_map(cfg, &out.join("grad_map")),
    }?;
    finish(name, cfg, &result)?;
    Ok(result)
}

fn finish(name: &str, cfg: &ExperimentConfig, result: &Outcome) -> Result<()> {
    let out = &cfg.output_dir;
    let hash = cfg.hash();
    let env = Envelope { tool: "smoothcert", version: crate::output::version(), command: name, config_hash: &hash, results: &result.report };
    write_json(&out.join(format!("{name}.report.json")), &env)?;
    fs::write(out.join(format!("{name}.csv")), result.csv.as_str()).with_context(|| format!("writing {name}.csv"))
}

/// Repeats `target` with `param` set to each value. Sub-runs write under
/// `<output_dir>/sweep/<i>/` and keep reading the base run's data and model.
pub fn sweep(cfg: &ExperimentConfig, target: SweepTarget, param: &str, values: &[Value]) -> Result<Outcome> {
    if values.is_empty() {
        return Err(anyhow::anyhow!("sweep needs at least one value")).context(ConfigError);
    }
    let mut rows = Vec::new();
    let mut keys = std::collections::BTreeSet::new();
    for (i, value) in values.iter().enumerate() {
        let mut doc = serde_json::to_value(cfg)?;
        config::set_path(&mut doc, "output_dir", json!(cfg.output_dir.join("sweep").join(i.to_string())))?;
        if target != SweepTarget::GenData {
            config::set_path(&mut doc, "data.dir", json!(cfg.data_dir()))?;
        }
        if !matches!(target, SweepTarget::GenData | SweepTarget::Train) {
            config::set_path(&mut doc, "model.checkpoint", json!(cfg.checkpoint()))?;
        }
        config::set_path(&mut doc, param, value.clone()).context(ConfigError)?;
        let sub: ExperimentConfig = serde_json::from_value(doc).context("invalid sweep value").context(ConfigError)?;
        sub.validate().context(ConfigError)?;
        let result = run_target(target, &sub)?;
        keys.extend(result.summary.keys().cloned());
        rows.push((value.clone(), result.summary));
    }
    let mut header = vec![param.to_string()];
    header.extend(keys.iter().cloned());
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for (value, summary) in &rows {
        let mut cells = vec![match value {
            Value::String(s) => s.clone(),
            v => v.to_string(),
        }];
        cells.extend(keys.iter().map(|k| cell(summary.get(k).copied())));
        csv.row(&cells);
    }
    let report = json!({
        "command": target.name(),
        "param": param,
        "rows": rows.iter().map(|(v, s)| json!({ "value": v, "summary": s })).collect::<Vec<_>>(),
    });
    outcome(report, csv, BTreeMap::new())
}

/// Writes the sweep's own report next to the sub-runs.
pub fn run_sweep(cfg: &ExperimentConfig, target: SweepTarget, param: &str, values: &[Value]) -> Result<Outcome> {
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    write_json(&cfg.output_dir.join("sweep.config.json"), cfg)?;
    let result = sweep(cfg, target, param, values)?;
    finish("sweep", cfg, &result)?;
    Ok(result)
}
