//! Seeded PRNG for fixture weights: splitmix64 state updates feeding a
//! Box–Muller transform.
//!
//! The u64 stream is fully pinned (splitmix64, Sebastiano Vigna's constants),
//! so independent implementations agree bit-for-bit on the state sequence.
//! One normal sample consumes exactly two u64 outputs: `a` drives the radius
//! through `u1 = ((a >> 11) + 1) / 2^53` (half-open into (0, 1]), `b` drives
//! the angle through `u2 = (b >> 11) / 2^53`, and the sample is
//! `sqrt(-2 ln u1) · cos(2π u2) · stddev`, computed in f64 and rounded to f32.

use crate::tensor::Tensor;

/// Deterministic 64-bit generator; identical seeds yield identical streams
/// on all platforms.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// splitmix64: one additive state update plus output mixing.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// One N(0, stddev²) sample; consumes exactly two u64 outputs.
    pub fn normal(&mut self, stddev: f32) -> f32 {
        const TWO_POW_53: f64 = 9_007_199_254_740_992.0;
        let a = self.next_u64();
        let b = self.next_u64();
        let u1 = ((a >> 11) as f64 + 1.0) / TWO_POW_53;
        let u2 = (b >> 11) as f64 / TWO_POW_53;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        ((r * theta.cos()) * f64::from(stddev)) as f32
    }

    /// Tensor of independent N(0, stddev²) samples, drawn in row-major order.
    pub fn normal_tensor(&mut self, shape: Vec<usize>, stddev: f32) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.normal(stddev));
        }
        Tensor::new(shape, data).expect("shape/data constructed consistently")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix64_reference_vectors() {
        let mut r = SeededRng::new(0);
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(r.next_u64(), 0x06C4_5D18_8009_454F);

        let mut r = SeededRng::new(42);
        assert_eq!(r.next_u64(), 0xBDD7_3226_2FEB_6E95);
        assert_eq!(r.next_u64(), 0x28EF_E333_B266_F103);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = SeededRng::new(1234567).normal_tensor(vec![7, 5], 0.5);
        let b = SeededRng::new(1234567).normal_tensor(vec![7, 5], 0.5);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert!(a.all_finite());
    }

    #[test]
    fn normal_sample_statistics() {
        let mut r = SeededRng::new(99);
        let n = 100_000;
        let mut sum = 0f64;
        let mut sum_sq = 0f64;
        for _ in 0..n {
            let v = f64::from(r.normal(1.0));
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sum_sq / n as f64 - mean * mean).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((std - 1.0).abs() < 0.02, "stddev {std}");
    }
}
