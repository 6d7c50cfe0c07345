//! Seeded parameter initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// The random stream used everywhere randomness is needed.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Normal samples with standard deviation `std`, redrawn outside `±2·std`.
pub fn trunc_normal(shape: impl Into<Vec<usize>>, std: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if std == 0.0 {
            return 0.0;
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    })
}
