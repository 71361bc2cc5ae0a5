//! Reproducible random streams. Every consumer derives its own ChaCha
//! substream from `(master seed, purpose, index)`, so results do not depend
//! on how work is scheduled across threads.

use ndarray::{Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::stats::norm_quantile;

/// What a substream is used for; keeps streams of different consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Replicate = 1,
    Coefficients = 2,
    Multiplier = 3,
    Split = 4,
    Bootstrap = 5,
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) ^ index);
    rng
}

/// A 64-bit seed for a nested consumer that runs its own substreams.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    substream(seed, purpose, index).next_u64()
}

/// Uniform on the open interval (0, 1).
pub fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// Standard normal by inverse-CDF transform.
pub fn std_normal(rng: &mut impl RngCore) -> f64 {
    norm_quantile(open_uniform(rng))
}

pub fn normal_vec(rng: &mut impl RngCore, len: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || std_normal(rng))
}

/// Rows i.i.d. `N(0, chol chol')` given the lower Cholesky factor.
pub fn correlated_normals(rng: &mut impl RngCore, rows: usize, chol: &Array2<f64>) -> Array2<f64> {
    let k = chol.nrows();
    let z = Array2::from_shape_simple_fn((rows, k), || std_normal(rng));
    z.dot(&chol.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_test, norm_cdf};

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| substream(7, Purpose::Replicate, 3).next_u64()).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        let b = substream(7, Purpose::Replicate, 4).next_u64();
        let c = substream(7, Purpose::Multiplier, 3).next_u64();
        let d = substream(8, Purpose::Replicate, 3).next_u64();
        assert!(a[0] != b && a[0] != c && a[0] != d);
    }

    #[test]
    fn normals_pass_ks() {
        let mut rng = substream(1, Purpose::Replicate, 0);
        let z = normal_vec(&mut rng, 5000);
        assert!(ks_test(z.as_slice().unwrap(), norm_cdf).p_value > 0.01);
    }
}
