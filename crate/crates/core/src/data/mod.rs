//! Synthetic shape datasets, batching and dataset persistence.

pub mod rten;

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{chacha, streams, uniform};
use crate::tensor::Tensor;
use rten::RtenRecord;

/// Number of distinct shape families available to [`gen_synthetic`].
pub const SHAPE_FAMILIES: usize = 8;
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, pixels in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if images.ndim() != 4 || images.batch_size() != labels.len() {
            return Err(Error::Dataset(format!("{} labels for images {:?}", labels.len(), images.shape())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {bad} outside {classes} classes")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Dataset("pixel outside [0, 1]".into()));
        }
        Ok(Self { images, labels, classes, seed })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            seed: self.seed,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        self.labels.iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Stratified split into disjoint train / validation / test parts. Each
    /// class contributes `round(frac·count)` examples to validation and test.
    pub fn split(&self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
        if !(0.0..1.0).contains(&val_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || val_fraction + test_fraction >= 1.0
        {
            return Err(Error::InvalidConfig(format!("split fractions {val_fraction}, {test_fraction}")));
        }
        let mut rng = chacha(seed, &[streams::SPLIT]);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for class in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            idx.shuffle(&mut rng);
            let n_val = (val_fraction * idx.len() as f64).round() as usize;
            let n_test = (test_fraction * idx.len() as f64).round() as usize;
            val.extend_from_slice(&idx[..n_val]);
            test.extend_from_slice(&idx[n_val..n_val + n_test]);
            train.extend_from_slice(&idx[n_val + n_test..]);
        }
        for part in [&mut train, &mut val, &mut test] {
            part.sort_unstable();
        }
        Ok(Splits { train: self.subset(&train), val: self.subset(&val), test: self.subset(&test) })
    }

    pub fn to_records(&self) -> Vec<RtenRecord> {
        vec![
            RtenRecord::from_tensor("images", &self.images),
            RtenRecord::u32("labels", vec![self.len()], self.labels.iter().map(|&l| l as u32).collect()),
            RtenRecord::u32("classes", vec![], vec![self.classes as u32]),
            RtenRecord::u32("seed", vec![2], vec![self.seed as u32, (self.seed >> 32) as u32]),
        ]
    }

    pub fn from_records(records: &[RtenRecord]) -> Result<Self> {
        let get = |name: &str| rten::find(records, name).ok_or_else(|| Error::Dataset(format!("missing record {name}")));
        let u32s = |name: &str| -> Result<Vec<u32>> {
            match &get(name)?.data {
                rten::RtenData::U32(v) => Ok(v.clone()),
                rten::RtenData::F64(_) => Err(Error::Dataset(format!("record {name} must be u32"))),
            }
        };
        let images = get("images")?.to_tensor()?;
        let labels = u32s("labels")?.into_iter().map(|l| l as usize).collect();
        let classes = *u32s("classes")?.first().ok_or_else(|| Error::Dataset("empty class count".into()))? as usize;
        let seed = match u32s("seed")?[..] {
            [lo, hi] => lo as u64 | (hi as u64) << 32,
            _ => return Err(Error::Dataset("seed record must hold two words".into())),
        };
        Dataset::new(images, labels, classes, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        rten::write_rten(path, &self.to_records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_records(&rten::read_rten(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub k: usize,
    pub n: usize,
    pub size: usize,
    pub splits: SplitSizes,
}

impl Splits {
    pub fn manifest(&self, seed: u64, n: usize, size: usize) -> Manifest {
        Manifest {
            seed,
            k: self.train.classes,
            n,
            size,
            splits: SplitSizes { train: self.train.len(), val: self.val.len(), test: self.test.len() },
        }
    }
}

/// Membership test for shape family `family` at local coordinates `(u, v)`,
/// measured in pixels from the shape centre.
fn inside(family: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    let in_box = u.abs() < 5.5 && v.abs() < 5.5;
    match family {
        0 => r < 4.5,
        1 => u.abs() < 5.5 && v.abs() < 3.0,
        2 => (u.abs() < 1.6 && v.abs() < 5.5) || (v.abs() < 1.6 && u.abs() < 5.5),
        3 => in_box && libm::cos(std::f64::consts::TAU * u / 4.0) > 0.0,
        4 => in_box && ((libm::floor(u / 2.75) + libm::floor(v / 2.75)) as i64).rem_euclid(2) == 0,
        5 => v > -4.0 && v < 4.5 && u.abs() < 0.65 * (v + 4.0),
        6 => r > 2.6 && r < 5.2,
        7 => in_box && libm::cos(std::f64::consts::TAU * (u + v) / 5.5) > 0.0,
        _ => unreachable!("family < SHAPE_FAMILIES"),
    }
}

/// Renders `per_class` jittered images of each of `k` shape families at
/// `size × size`, classes interleaved (`label = i mod k`).
pub fn gen_synthetic(k: usize, per_class: usize, size: usize, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    if k > SHAPE_FAMILIES {
        return Err(Error::InvalidConfig(format!("{k} classes requested, only {SHAPE_FAMILIES} shape families exist")));
    }
    if size < 8 {
        return Err(Error::InvalidConfig(format!("image size {size} below 8")));
    }
    let n = k * per_class;
    let plane = size * size;
    let mut data = vec![0.0; n * CHANNELS * plane];
    let mut labels = Vec::with_capacity(n);
    let scale_to_grid = size as f64 / 16.0;
    for i in 0..n {
        let label = i % k;
        labels.push(label);
        let mut rng = chacha(seed, &[streams::DATA, i as u64]);
        let mut u01 = || uniform(&mut rng);
        let cx = (size as f64 - 1.0) / 2.0 + (u01() - 0.5) * 4.0 * scale_to_grid;
        let cy = (size as f64 - 1.0) / 2.0 + (u01() - 0.5) * 4.0 * scale_to_grid;
        let scale = (0.85 + 0.3 * u01()) * scale_to_grid;
        let angle = (u01() - 0.5) * 0.5;
        let (sin, cos) = (libm::sin(angle), libm::cos(angle));
        let fg = 0.65 + 0.25 * u01();
        let bg = 0.1 + 0.15 * u01();
        let tint: [f64; CHANNELS] = [0.8 + 0.2 * u01(), 0.8 + 0.2 * u01(), 0.8 + 0.2 * u01()];
        let mut lum = vec![0.0; plane];
        for (p, l) in lum.iter_mut().enumerate() {
            let (py, px) = ((p / size) as f64, (p % size) as f64);
            let mut cover = 0.0;
            for (oy, ox) in [(-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25)] {
                let (dx, dy) = (px + ox - cx, py + oy - cy);
                let u = (cos * dx + sin * dy) / scale;
                let v = (-sin * dx + cos * dy) / scale;
                if inside(label, u, v) {
                    cover += 0.25;
                }
            }
            *l = bg + (fg - bg) * cover;
        }
        let image = &mut data[i * CHANNELS * plane..(i + 1) * CHANNELS * plane];
        for c in 0..CHANNELS {
            for p in 0..plane {
                let noise = 0.03 * (2.0 * u01() - 1.0);
                image[c * plane + p] = (tint[c] * lum[p] + noise).clamp(0.0, 1.0);
            }
        }
    }
    let images = Tensor::new(vec![n, CHANNELS, size, size], data)?;
    Dataset::new(images, labels, k, seed)
}

/// One mini-batch together with the dataset indices it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut chacha(seed, &[streams::SHUFFLE]));
    order
}

/// Mini-batches over a seeded permutation; the last batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64) -> impl Iterator<Item = Batch> + '_ {
    let order = permutation(dataset.len(), seed);
    let bs = batch_size.max(1);
    let chunks: Vec<Vec<usize>> = order.chunks(bs).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |indices| Batch {
        images: dataset.images.select(&indices),
        labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        indices,
    })
}

/// Mini-batches in dataset order.
pub fn sequential_batches(dataset: &Dataset, batch_size: usize) -> impl Iterator<Item = Batch> + '_ {
    let bs = batch_size.max(1);
    (0..dataset.len()).step_by(bs).map(move |start| {
        let indices: Vec<usize> = (start..(start + bs).min(dataset.len())).collect();
        Batch {
            images: dataset.images.select(&indices),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
            indices,
        }
    })
}
