//! Statistical primitives: the Wilcoxon rank-sum test, the χ²₁ quantile,
//! sample quantiles, and path-addressed random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};

/// The generator type handed out by [`RngStream::rng`].
pub type StreamRng = ChaCha8Rng;

/// A reproducible random stream addressed by a root seed and a path such as
/// `[("dataset", 3), ("boot", 17)]`.
///
/// Streams are plain values. Deriving a child never touches the parent, so
/// work can be split across threads in any order and still produce the same
/// draws.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub path: Vec<(String, u64)>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, path: Vec::new() }
    }

    /// The stream one level below this one.
    pub fn child(&self, label: &str, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        RngStream { seed: self.seed, path }
    }

    fn key(&self) -> [u8; 32] {
        let mut state = self.seed;
        let mut acc = splitmix64(&mut state);
        for (label, index) in &self.path {
            for b in label.bytes() {
                state ^= acc.rotate_left(17) ^ u64::from(b);
                acc = splitmix64(&mut state);
            }
            // separator so ("ab",1) and ("a",..)("b",..) cannot collide
            state ^= acc.rotate_left(29) ^ 0xFF;
            acc = splitmix64(&mut state);
            state ^= acc.rotate_left(41) ^ *index;
            acc = splitmix64(&mut state);
        }
        let mut out = [0u8; 32];
        for chunk in out.chunks_mut(8) {
            state ^= acc;
            acc = splitmix64(&mut state);
            chunk.copy_from_slice(&acc.to_le_bytes());
        }
        out
    }

    /// A fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> StreamRng {
        ChaCha8Rng::from_seed(self.key())
    }
}

/// Two-sided Wilcoxon rank-sum (Mann–Whitney) p-value.
///
/// Exact when both samples have at most 10 values and the pooled sample has
/// no ties; otherwise the normal approximation with mid-ranks, tie-corrected
/// variance and a continuity correction.
pub fn wilcoxon_rank_sum(x: &[f64], y: &[f64]) -> f64 {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return 1.0;
    }
    let mut pooled: Vec<(f64, bool)> = x
        .iter()
        .map(|&v| (v, true))
        .chain(y.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = pooled.len();
    let mut w = 0.0;
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i) as f64;
        if j - i > 1 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        w += mid_rank * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }

    if n1 <= 10 && n2 <= 10 && !has_ties {
        return exact_rank_sum_p(n1, n2, w.round() as usize);
    }

    let (f1, f2, nf) = (n1 as f64, n2 as f64, n as f64);
    let mean = f1 * (nf + 1.0) / 2.0;
    let var = f1 * f2 / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let d = w - mean;
    let corrected = if d == 0.0 { 0.0 } else { d - 0.5 * d.signum() };
    let z = corrected / var.sqrt();
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Exact null distribution of the rank sum of `n1` items among `n1 + n2`.
fn exact_rank_sum_p(n1: usize, n2: usize, w: usize) -> f64 {
    let n = n1 + n2;
    let max_sum = n * (n + 1) / 2;
    // counts[k][s]: subsets of size k with rank sum s
    let mut counts = vec![vec![0u64; max_sum + 1]; n1 + 1];
    counts[0][0] = 1;
    for r in 1..=n {
        for k in (1..=n1.min(r)).rev() {
            for s in (r..=max_sum).rev() {
                counts[k][s] += counts[k - 1][s - r];
            }
        }
    }
    let total: u64 = counts[n1].iter().sum();
    let lower: u64 = counts[n1][..=w.min(max_sum)].iter().sum();
    let upper: u64 = counts[n1][w.min(max_sum)..].iter().sum();
    let p = 2.0 * lower.min(upper) as f64 / total as f64;
    p.min(1.0)
}

/// CDF of the χ² distribution with one degree of freedom.
pub fn chi2_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5, x / 2.0)
    }
}

/// Quantile of the χ² distribution by bisection on the regularized lower
/// incomplete gamma function. Only `df = 1` is supported.
pub fn chi2_quantile(prob: f64, df: u32) -> Result<f64> {
    if df != 1 {
        return Err(Error::InvalidArgument(format!("chi2_quantile supports df = 1 only, got {df}")));
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::InvalidArgument(format!("probability {prob} not in (0,1)")));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while chi2_cdf(hi) < prob {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sample quantile with linear interpolation between order statistics
/// (Hyndman–Fan type 7). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of an unsorted sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (denominator `n - 1`); zero for fewer than two values.
pub fn sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}
