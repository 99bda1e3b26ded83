//! Deterministic random streams.
//!
//! Every random draw in the pipeline descends from one master seed. Child
//! seeds are derived by hashing `(parent, label, index)`, so concurrent
//! workers get independent streams whose contents do not depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::field::ImageField;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for the stream named `label`, instance `index`.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    // FNV-1a over the label keeps the mapping stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(splitmix64(parent ^ h).wrapping_add(index))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(parent: u64, label: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(parent, label, index))
}

pub fn standard_normal(rng: &mut impl rand::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Field of i.i.d. standard normal draws.
pub fn normal_field(channels: usize, height: usize, width: usize, rng: &mut impl rand::Rng) -> ImageField {
    ImageField::from_fn(channels, height, width, |_, _, _| standard_normal(rng))
}

pub fn normal_like(template: &ImageField, rng: &mut impl rand::Rng) -> ImageField {
    let (c, h, w) = template.shape();
    normal_field(c, h, w, rng)
}
