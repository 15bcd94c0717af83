//! Deterministic randomness: one root seed fans out into named substreams,
//! each keyed by (name, step, sample). Every draw site re-derives its stream
//! from scratch, so training can resume at any step with bit-identical draws
//! and components can be perturbed independently.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// Substream names used across the pipeline. Kept in one place so no two
/// draw sites can collide by accident.
pub mod stream {
    pub const DATA: &str = "data";
    pub const BATCH: &str = "batch";
    pub const INIT: &str = "init";
    pub const TIMESTEP: &str = "timestep";
    pub const DROPOUT: &str = "dropout";
    pub const FACE_REGION: &str = "face_region";
    pub const NOISE: &str = "noise";
    pub const SAMPLER: &str = "sampler";
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive the seed for substream (root, name, a, b).
pub fn substream_seed(root: u64, name: &str, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(root ^ fnv1a(name)) ^ a) ^ b)
}

/// A fresh generator for substream (root, name, a, b).
pub fn substream(root: u64, name: &str, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name, a, b))
}

/// Standard-normal tensor drawn from an explicit generator.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data length agree by construction")
}

/// Uniform draw in [0,1).
pub fn uniform01(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

/// Uniform integer in [1, t_max] (timestep convention).
pub fn uniform_timestep(rng: &mut ChaCha8Rng, t_max: usize) -> usize {
    rng.random_range(1..=t_max)
}
