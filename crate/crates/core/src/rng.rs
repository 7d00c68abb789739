//! Seeded, counter-addressable random streams.
//!
//! Every stochastic component derives its generator from `(seed, stream id)`
//! through [`derive_seed`], so results never depend on how work is split into
//! batches or threads. Gaussian variates come from the Box-Muller transform
//! over a ChaCha8 keystream; [`GaussianStream::at_sample`] seeks straight to
//! the variates of one sample.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically combines a seed with a sequence of stream identifiers.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

/// Stream identifiers used across the crate.
pub mod streams {
    pub const SHUFFLE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const AUG_NOISE: u64 = 3;
    pub const ATTACK_START: u64 = 4;
    pub const EVAL_NOISE: u64 = 5;
    pub const SELECTION: u64 = 6;
    pub const ESTIMATION: u64 = 7;
    pub const ADAPT_NOISE: u64 = 8;
    pub const CORRUPTION: u64 = 9;
    pub const DATA: u64 = 10;
    pub const EOT_PERTURB: u64 = 11;
    pub const SPLIT: u64 = 12;
}

pub fn chacha(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, parts))
}

/// Uniform in `[0, 1)` with 53 random bits.
pub fn uniform(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box-Muller standard normal generator over a ChaCha8 keystream.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64, parts: &[u64]) -> Self {
        Self { rng: chacha(seed, parts), spare: None }
    }

    /// Positions the stream at the first variate of sample `sample`, where every
    /// sample consumes `dims` variates. Variates of a sample are therefore a pure
    /// function of `(seed, parts, sample)`.
    pub fn at_sample(seed: u64, parts: &[u64], sample: u64, dims: usize) -> Self {
        let mut s = Self::new(seed, parts);
        // Each Box-Muller pair consumes two u64 = four 32-bit words.
        let pairs = dims.div_ceil(2) as u128;
        s.rng.set_word_pos(sample as u128 * pairs * 4);
        s
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - uniform(&mut self.rng);
        let u2 = uniform(&mut self.rng);
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fills `out` with `N(0, sigma²)` variates, starting a fresh pair so the
    /// layout matches [`GaussianStream::at_sample`].
    pub fn fill(&mut self, out: &mut [f64], sigma: f64) {
        self.spare = None;
        for v in out.iter_mut() {
            *v = sigma * self.next_normal();
        }
        self.spare = None;
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Adds `N(0, sigma²)` noise to every example of a batch, example `i` drawing
/// from sample slot `offset + i` of the `(seed, parts)` stream.
pub fn add_gaussian_noise(data: &mut [f64], example_len: usize, sigma: f64, seed: u64, parts: &[u64], offset: u64) {
    let mut noise = vec![0.0; example_len];
    for (i, chunk) in data.chunks_mut(example_len).enumerate() {
        let mut g = GaussianStream::at_sample(seed, parts, offset + i as u64, example_len);
        g.fill(&mut noise, sigma);
        chunk.iter_mut().zip(&noise).for_each(|(x, z)| *x += z);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seek_matches_sequential_draws() {
        let dims = 5;
        let mut seq = GaussianStream::new(7, &[1, 2]);
        let mut all = [0.0; 3 * 6];
        // Sequential layout: each sample starts a fresh pair.
        for s in 0..3 {
            seq.fill(&mut all[s * 6..s * 6 + dims], 1.0);
            // an odd sample length discards the spare of its last pair
        }
        for s in 0..3u64 {
            let mut g = GaussianStream::at_sample(7, &[1, 2], s, dims);
            let mut v = vec![0.0; dims];
            g.fill(&mut v, 1.0);
            assert_eq!(&v[..], &all[s as usize * 6..s as usize * 6 + dims]);
        }
    }

    #[test]
    fn normal_moments() {
        let mut g = GaussianStream::new(3, &[]);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| g.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[2]), derive_seed(1, &[3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_eq!(derive_seed(9, &[4, 5]), derive_seed(9, &[4, 5]));
    }
}
