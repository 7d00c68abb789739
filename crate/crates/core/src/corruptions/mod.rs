//! Analytic image corruptions at five severities, corruption-error metrics
//! and Fourier analysis of corruption residuals.

mod fourier;
mod metrics;

pub use fourier::{fourier_spectrum, radial_profile};
pub use metrics::{evaluate_corruptions, mce, rmce, CorruptionReport, ErrorTable};

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{chacha, streams, uniform, GaussianStream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    GaussianBlur,
    DefocusBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
    Saturate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 10] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
        CorruptionKind::Saturate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Saturate => "saturate",
        }
    }

    /// Distortion parameter per severity 1..=5, for 16×16 images.
    ///
    /// | kind | parameter |
    /// |---|---|
    /// | gaussian_noise | noise std-dev |
    /// | shot_noise | photon count λ (Poisson(λx)/λ) |
    /// | impulse_noise | salt-and-pepper fraction |
    /// | gaussian_blur | kernel std-dev in pixels |
    /// | defocus_blur | disc radius in pixels |
    /// | motion_blur | horizontal line length in pixels |
    /// | contrast | factor on deviations from the channel mean |
    /// | brightness | additive offset |
    /// | pixelate | block edge in pixels |
    /// | saturate | factor on deviations from the pixel's channel mean |
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::GaussianBlur => [0.4, 0.6, 0.8, 1.0, 1.25],
            CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Pixelate => [2.0, 2.0, 3.0, 3.0, 4.0],
            CorruptionKind::Saturate => [0.3, 0.1, 2.0, 5.0, 20.0],
        }
    }

    pub fn param(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidSeverity(severity));
        }
        Ok(self.severity_table()[severity as usize - 1])
    }

    fn id(self) -> u64 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u64
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| Error::UnknownCorruption(s.to_string()))
    }
}

/// Corrupts every image of `x` (`[N, C, H, W]`, pixels in `[0, 1]`) at the
/// given severity. Image `i` draws randomness from
/// `(seed, kind, severity, i)`.
pub fn corrupt(x: &Tensor, kind: CorruptionKind, severity: u8, seed: u64) -> Result<Tensor> {
    let param = kind.param(severity)?;
    corrupt_with_param(x, kind, param, severity as u64, seed)
}

/// [`corrupt`] with an explicit distortion parameter; `stream` keys the
/// randomness alongside `seed`.
pub fn corrupt_with_param(x: &Tensor, kind: CorruptionKind, param: f64, stream: u64, seed: u64) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::NotAnImage(x.shape().to_vec()));
    }
    let [c, h, w] = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = x.clone();
    for i in 0..x.batch_size() {
        let parts = [streams::CORRUPTION, kind.id(), stream, i as u64];
        let img = out.example_slice_mut(i);
        apply(img, c, h, w, kind, param, seed, &parts)?;
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn apply(img: &mut [f64], c: usize, h: usize, w: usize, kind: CorruptionKind, p: f64, seed: u64, parts: &[u64]) -> Result<()> {
    let plane = h * w;
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut g = GaussianStream::new(seed, parts);
            let mut noise = vec![0.0; img.len()];
            g.fill(&mut noise, p);
            img.iter_mut().zip(noise).for_each(|(v, z)| *v += z);
        }
        CorruptionKind::ShotNoise => {
            let mut rng = chacha(seed, parts);
            for v in img.iter_mut() {
                let lambda = *v * p;
                *v = if lambda > 0.0 {
                    let dist = Poisson::new(lambda).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                    dist.sample(&mut rng) / p
                } else {
                    0.0
                };
            }
        }
        CorruptionKind::ImpulseNoise => {
            let mut rng = chacha(seed, parts);
            for v in img.iter_mut() {
                if uniform(&mut rng) < p {
                    *v = if rng.next_u32() & 1 == 0 { 0.0 } else { 1.0 };
                }
            }
        }
        CorruptionKind::GaussianBlur => {
            let radius = (3.0 * p).ceil() as isize;
            let mut k: Vec<f64> = (-radius..=radius).map(|t| libm::exp(-((t * t) as f64) / (2.0 * p * p))).collect();
            let s: f64 = k.iter().sum();
            k.iter_mut().for_each(|v| *v /= s);
            for ch in img.chunks_mut(plane) {
                let horiz: Vec<(isize, isize, f64)> = k.iter().enumerate().map(|(j, &v)| (0, j as isize - radius, v)).collect();
                let vert: Vec<(isize, isize, f64)> = k.iter().enumerate().map(|(j, &v)| (j as isize - radius, 0, v)).collect();
                let tmp = convolve(ch, h, w, &horiz);
                ch.copy_from_slice(&convolve(&tmp, h, w, &vert));
            }
        }
        CorruptionKind::DefocusBlur => {
            let r = p.ceil() as isize;
            let mut taps = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dy * dy + dx * dx) as f64) <= p * p {
                        taps.push((dy, dx, 1.0));
                    }
                }
            }
            let n = taps.len() as f64;
            taps.iter_mut().for_each(|t| t.2 /= n);
            for ch in img.chunks_mut(plane) {
                ch.copy_from_slice(&convolve(ch, h, w, &taps));
            }
        }
        CorruptionKind::MotionBlur => {
            let len = p.round() as isize;
            let half = len / 2;
            let taps: Vec<(isize, isize, f64)> = (0..len).map(|t| (0, t - half, 1.0 / len as f64)).collect();
            for ch in img.chunks_mut(plane) {
                ch.copy_from_slice(&convolve(ch, h, w, &taps));
            }
        }
        CorruptionKind::Contrast => {
            for ch in img.chunks_mut(plane) {
                let mean = ch.iter().sum::<f64>() / plane as f64;
                ch.iter_mut().for_each(|v| *v = mean + p * (*v - mean));
            }
        }
        CorruptionKind::Brightness => img.iter_mut().for_each(|v| *v += p),
        CorruptionKind::Pixelate => {
            let b = p.round().max(1.0) as usize;
            for ch in img.chunks_mut(plane) {
                for by in (0..h).step_by(b) {
                    for bx in (0..w).step_by(b) {
                        let (ye, xe) = ((by + b).min(h), (bx + b).min(w));
                        let mut sum = 0.0;
                        for y in by..ye {
                            sum += ch[y * w + bx..y * w + xe].iter().sum::<f64>();
                        }
                        let mean = sum / ((ye - by) * (xe - bx)) as f64;
                        for y in by..ye {
                            ch[y * w + bx..y * w + xe].iter_mut().for_each(|v| *v = mean);
                        }
                    }
                }
            }
        }
        CorruptionKind::Saturate => {
            for px in 0..plane {
                let mean = (0..c).map(|ch| img[ch * plane + px]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    let v = &mut img[ch * plane + px];
                    *v = mean + p * (*v - mean);
                }
            }
        }
    }
    Ok(())
}

/// Correlates one `h × w` plane with `(dy, dx, weight)` taps, clamping
/// coordinates at the border.
fn convolve(src: &[f64], h: usize, w: usize, taps: &[(isize, isize, f64)]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for &(dy, dx, k) in taps {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                acc += k * src[sy * w + sx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}
