//! Counter-based standard-normal streams.
//!
//! Value `i` of stream `(seed, stream)` is derived from the `i`-th 64-bit
//! output `x` of ChaCha20 keyed by `seed` with stream id `stream`. With
//! `k = x >> 11`, the value is `Phi^{-1}((k + 1/2) 2^{-53})` for `k < 2^52`
//! and `-Phi^{-1}((2^53 - 1 - k + 1/2) 2^{-53})` otherwise, so both tails are
//! evaluated from exactly representable arguments and the map is odd-symmetric
//! in `k`.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const HALF: u64 = 1 << 52;

fn to_normal(normal: &Normal, x: u64) -> f64 {
    let k = x >> 11;
    let lower = |k: u64| (k as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    if k < HALF {
        normal.inverse_cdf(lower(k))
    } else {
        -normal.inverse_cdf(lower((1u64 << 53) - 1 - k))
    }
}

fn standard_normal() -> Normal {
    Normal::standard()
}

/// The first `n` values of stream `(seed, stream)`.
pub fn draw_normal(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    let normal = standard_normal();
    (0..n).map(|_| to_normal(&normal, rng.next_u64())).collect()
}

/// Value `index` of stream `(seed, stream)`, without generating the prefix.
pub fn normal_at(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = stream_rng(seed, stream);
    // one u64 consumes two 32-bit words
    rng.set_word_pos(u128::from(index) * 2);
    to_normal(&standard_normal(), rng.next_u64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_random_access() {
        let a = draw_normal(7, 3, 1000);
        assert_eq!(a, draw_normal(7, 3, 1000));
        assert_eq!(a[..10], draw_normal(7, 3, 10)[..]);
        for i in [0usize, 1, 17, 999] {
            assert_eq!(a[i], normal_at(7, 3, i as u64));
        }
        assert_ne!(a, draw_normal(8, 3, 1000));
    }

    #[test]
    fn moments() {
        let n = 100_000;
        let v = draw_normal(42, 0, n);
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn streams_uncorrelated() {
        let n = 100_000;
        let a = draw_normal(42, 0, n);
        let b = draw_normal(42, 1, n);
        let c = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(c.abs() < 0.02, "{c}");
    }

    #[test]
    fn extreme_uniforms_are_finite() {
        let normal = standard_normal();
        let lo = to_normal(&normal, 0);
        let hi = to_normal(&normal, u64::MAX);
        assert!(lo.is_finite() && lo < -8.0);
        assert_eq!(hi, -lo);
        // k = 2^52 - 1 and 2^52 straddle the median
        let a = to_normal(&normal, (HALF - 1) << 11);
        let b = to_normal(&normal, HALF << 11);
        assert!(a < 0.0 && b > 0.0 && a == -b);
    }
}
