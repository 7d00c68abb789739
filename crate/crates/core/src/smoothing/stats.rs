//! Normal quantiles and exact binomial tail bounds.

// Coefficients are kept exactly as tabulated.
#![allow(clippy::excessive_precision)]

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

/// Standard normal CDF.
pub fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

// Wichura's AS241 (PPND16) rational approximations.
const A: [f64; 8] = [
    3.387_132_872_796_366_608,
    1.331_416_678_917_843_774_5e2,
    1.971_590_950_306_551_442_7e3,
    1.373_169_376_550_946_112_5e4,
    4.592_195_393_154_987_145_7e4,
    6.726_577_092_700_870_085_3e4,
    3.343_057_558_358_812_810_5e4,
    2.509_080_928_730_122_672_7e3,
];
const B: [f64; 8] = [
    1.0,
    4.231_333_070_160_091_125_2e1,
    6.871_870_074_920_579_083e2,
    5.394_196_021_424_751_107_7e3,
    2.121_379_430_158_659_586_7e4,
    3.930_789_580_009_271_061e4,
    2.872_908_573_572_194_267_4e4,
    5.226_495_278_852_854_561e3,
];
const C: [f64; 8] = [
    1.423_437_110_749_683_577_34,
    4.630_337_846_156_545_295_9,
    5.769_497_221_460_691_405_5,
    3.647_848_324_763_204_605_04,
    1.270_458_252_452_368_382_58,
    2.417_807_251_774_506_117_7e-1,
    2.272_384_498_926_918_458_33e-2,
    7.745_450_142_783_414_076_4e-4,
];
const D: [f64; 8] = [
    1.0,
    2.053_191_626_637_758_821_87,
    1.676_384_830_183_803_849_4,
    6.897_673_349_851_000_045_5e-1,
    1.481_039_764_274_800_745_9e-1,
    1.519_866_656_361_645_719_66e-2,
    5.475_938_084_995_344_946e-4,
    1.050_750_071_644_416_843_24e-9,
];
const E: [f64; 8] = [
    6.657_904_643_501_103_777_2,
    5.463_784_911_164_114_369_9,
    1.784_826_539_917_291_335_8,
    2.965_605_718_285_048_912_3e-1,
    2.653_218_952_657_612_309_3e-2,
    1.242_660_947_388_078_438_6e-3,
    2.711_555_568_743_487_578_15e-5,
    2.010_334_399_292_288_132_65e-7,
];
const F: [f64; 8] = [
    1.0,
    5.998_322_065_558_879_376_9e-1,
    1.369_298_809_227_358_053_1e-1,
    1.487_536_129_085_061_485_25e-2,
    7.868_691_311_456_132_591e-4,
    1.846_318_317_510_054_681_8e-5,
    1.421_511_758_316_445_888_7e-7,
    2.044_263_103_389_939_785_64e-15,
];

fn ppnd16_lower(p: f64) -> f64 {
    // p <= 0.5
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let r = libm::sqrt(-libm::log(p));
    if r <= 5.0 {
        let r = r - 1.6;
        -poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        -poly(&E, r) / poly(&F, r)
    }
}

/// Standard normal quantile `Φ⁻¹(p)`: a rational initial approximation
/// refined by one Halley step on `erfc`. Evaluated on the lower tail, so
/// `phi_inv(p) == -phi_inv(1 - p)` whenever `1 - p` is exact.
pub fn phi_inv(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

fn lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let x = ppnd16_lower(p);
    // Halley: relative residual of the CDF over the density.
    let e = phi(x) - p;
    let u = e * SQRT_2PI * libm::exp(0.5 * x * x);
    x - u / (1.0 + 0.5 * x * u)
}

fn check_counts(successes: u64, trials: u64) -> Result<()> {
    if successes > trials {
        return Err(Error::InvalidCounts { successes, trials });
    }
    Ok(())
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let (n, k) = (n as f64, k as f64);
    libm::lgamma(n + 1.0) - libm::lgamma(k + 1.0) - libm::lgamma(n - k + 1.0)
}

fn ln_pmf(n: u64, k: u64, p: f64) -> f64 {
    ln_choose(n, k) + k as f64 * libm::log(p) + (n - k) as f64 * libm::log1p(-p)
}

/// `ln Σ exp(terms)` of a geometric-like run starting at `ln_first` and
/// continued by `ratio(k)` until the terms stop mattering.
fn ln_series(ln_first: f64, mut ratio: impl FnMut(u64) -> Option<f64>) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut step = 0;
    while let Some(r) = ratio(step) {
        term *= r;
        if term < 1e-17 * sum {
            break;
        }
        sum += term;
        step += 1;
    }
    ln_first + libm::log(sum)
}

/// `ln P[X ≥ x]` for `X ~ Bin(n, p)`, summing away from the mode so every
/// partial sum is dominated by its first term.
fn ln_upper_tail(x: u64, n: u64, p: f64) -> f64 {
    if x == 0 || p >= 1.0 {
        return 0.0;
    }
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let odds = p / (1.0 - p);
    if x as f64 > n as f64 * p {
        ln_series(ln_pmf(n, x, p), |j| {
            let k = x + j;
            (k < n).then(|| (n - k) as f64 / (k + 1) as f64 * odds)
        })
    } else {
        // 1 − P[X ≤ x−1], lower sum walking down from x−1.
        let ln_lower = ln_series(ln_pmf(n, x - 1, p), |j| {
            let k = (x - 1).checked_sub(j)?;
            (k > 0).then(|| k as f64 / (n - k + 1) as f64 / odds)
        });
        libm::log1p(-libm::exp(ln_lower).min(1.0))
    }
}

/// `P[X ≥ x]` for `X ~ Bin(n, p)`.
pub fn binom_upper_tail(x: u64, n: u64, p: f64) -> Result<f64> {
    check_counts(x, n)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(libm::exp(ln_upper_tail(x, n, p)))
}

/// One-sided Clopper-Pearson lower confidence bound: the largest `p` with
/// `P[Bin(n, p) ≥ x] ≤ alpha`, located by bisection to a bracket of 1e-12
/// and reported from the conservative side.
pub fn binom_lower_bound(successes: u64, trials: u64, alpha: f64) -> Result<f64> {
    check_counts(successes, trials)?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidProbability(alpha));
    }
    if successes == 0 {
        return Ok(0.0);
    }
    let ln_alpha = libm::log(alpha);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if ln_upper_tail(successes, trials, mid) <= ln_alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Two-sided p-value of the exact binomial test of `H0: p = 1/2`.
pub fn binom_test_half(successes: u64, trials: u64) -> Result<f64> {
    check_counts(successes, trials)?;
    if trials == 0 {
        return Ok(1.0);
    }
    let k = successes.max(trials - successes);
    if 2 * k == trials {
        return Ok(1.0);
    }
    Ok((2.0 * binom_upper_tail(k, trials, 0.5)?).min(1.0))
}
