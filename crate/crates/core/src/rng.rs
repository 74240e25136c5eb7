//! Seeded randomness. Every stochastic routine takes an explicit generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::volume::Volume3D;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-seed for stream `stream` of `seed` (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal(rng: &mut impl rand::Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Volume of i.i.d. standard normal values with the given dims.
pub fn normal_volume(dims: [usize; 4], rng: &mut impl rand::Rng) -> Volume3D {
    let mut v = Volume3D::zeros(dims);
    v.data_mut().iter_mut().for_each(|x| *x = normal(rng));
    v
}
