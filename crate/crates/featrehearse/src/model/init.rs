//! Parameter initialization.

use crate::real::Real;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)). Sampling happens in f64
/// so f32 and f64 instantiations of the same seed see the same values.
pub fn fan_in_uniform<F: Real>(fan_in: usize, rng: &mut ChaCha8Rng) -> F {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    F::from_f64(rng.gen_range(-limit..limit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn within_bounds() {
        let mut rng = stream_rng(0, "t", 0);
        for _ in 0..100 {
            let v: f64 = fan_in_uniform(25, &mut rng);
            assert!(v.abs() < 0.2);
        }
    }

    #[test]
    fn f32_and_f64_share_the_stream() {
        let mut r1 = stream_rng(4, "t", 0);
        let mut r2 = stream_rng(4, "t", 0);
        for _ in 0..10 {
            let a: f32 = fan_in_uniform(9, &mut r1);
            let b: f64 = fan_in_uniform(9, &mut r2);
            assert_eq!(a, b as f32);
        }
    }
}
