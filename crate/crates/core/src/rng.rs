//! Seeded randomness.
//!
//! Library code never draws from libtorch's global generator; every random
//! tensor is built from a ChaCha stream so that results depend only on the
//! seed, not on which thread or test touched the global state first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tch::{Kind, Tensor};

pub type SeedRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent seed from a base seed and a stream tag.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    // splitmix64 over (seed, fnv(tag), index)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn randn(rng: &mut SeedRng, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_slice(&v).reshape(shape).to_kind(kind)
}

pub fn uniform(rng: &mut SeedRng, shape: &[i64], lo: f64, hi: f64, kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_slice(&v).reshape(shape).to_kind(kind)
}

pub fn labels(rng: &mut SeedRng, n: usize, nc: i64) -> Vec<i64> {
    (0..n).map(|_| rng.gen_range(0..nc)).collect()
}

/// Inverted-dropout mask with keep probability `1 - p`, already rescaled.
pub fn dropout_mask(rng: &mut SeedRng, shape: &[i64], p: f64, kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let scale = 1.0 / (1.0 - p);
    let v: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect();
    Tensor::from_slice(&v).reshape(shape).to_kind(kind)
}
