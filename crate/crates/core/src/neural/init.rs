use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;

use super::matrix::Matrix;

/// Half-width `√(6 / (fan_in + fan_out))` of the Xavier/Glorot uniform range.
pub fn xavier_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `fan_out × fan_in` matrix with i.i.d. entries uniform on `[-ℓ, ℓ]`.
pub fn xavier_uniform<S: Scalar, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Matrix<S> {
    assert!(fan_in >= 1 && fan_out >= 1, "xavier_uniform needs positive fan-in and fan-out");
    let limit = xavier_limit(fan_in, fan_out);
    let data = (0..fan_in * fan_out)
        .map(|_| S::of(rng.gen_range(-limit..=limit)))
        .collect();
    Matrix::from_vec(fan_out, fan_in, data).expect("size computed above")
}

/// Seeded convenience wrapper; identical seeds give identical matrices.
pub fn xavier_init<S: Scalar>(fan_in: usize, fan_out: usize, seed: u64) -> Matrix<S> {
    xavier_uniform(fan_in, fan_out, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn limit_for_128_by_64() {
        assert!((xavier_limit(128, 64) - 0.176_776_695_296_636_9).abs() < 1e-15);
    }

    #[test]
    fn entries_stay_inside_limit() {
        let m: Matrix<f64> = xavier_init(128, 64, 3);
        let l = xavier_limit(128, 64);
        assert_eq!(m.shape(), (64, 128));
        assert!(m.as_slice().iter().all(|x| x.abs() <= l));
    }

    #[test]
    fn deterministic_per_seed() {
        let a: Matrix<f64> = xavier_init(5, 7, 42);
        let b: Matrix<f64> = xavier_init(5, 7, 42);
        let c: Matrix<f64> = xavier_init(5, 7, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
