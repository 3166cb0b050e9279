use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

/// The repository-wide generator: ChaCha with 8 rounds, a counter-based stream.
pub type SeededRng = ChaCha8Rng;

/// Derives a per-tensor seed so initial values depend only on the run seed
/// and the parameter name, not on registration order.
pub fn seed_for_name(seed: u64, name: &str) -> u64 {
    // FNV-1a, then a splitmix finalizer over the combination.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// He/MSRA initialization: zero-mean normal with variance `2 / fan_in`.
pub fn msra_init<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
    assert!(fan_in >= 1, "fan_in must be positive");
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = SeededRng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a: Tensor<f32> = msra_init(&[4, 3, 3, 3], 27, 11);
        let b: Tensor<f32> = msra_init(&[4, 3, 3, 3], 27, 11);
        let c: Tensor<f32> = msra_init(&[4, 3, 3, 3], 27, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sample_variance_matches_fan_in() {
        let t: Tensor<f64> = msra_init(&[100_000], 8, 3);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.25).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn fan_in_two_gives_unit_std() {
        let t: Tensor<f64> = msra_init(&[50_000], 2, 5);
        let n = t.len() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 0.02);
    }

    #[test]
    fn name_seeds_differ() {
        assert_ne!(seed_for_name(0, "a"), seed_for_name(0, "b"));
        assert_ne!(seed_for_name(0, "a"), seed_for_name(1, "a"));
        assert_eq!(seed_for_name(9, "enc"), seed_for_name(9, "enc"));
    }
}
