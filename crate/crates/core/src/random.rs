//! Seeded randomness.
//!
//! Every stochastic operation in the crate takes an explicit generator so
//! runs are reproducible. ChaCha is used because its output stream is stable
//! across platforms and crate versions.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Result;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a master seed. Used for per-worker and
/// per-purpose streams so adding draws in one place does not shift another.
pub fn substream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard normal tensor of the given shape.
pub fn gaussian_tensor<R: Rng + ?Sized, S: Into<Shape>>(
    shape: S,
    dtype: DType,
    device: &Device,
    rng: &mut R,
) -> Result<Tensor> {
    let shape = shape.into();
    let data = gaussian_vec(shape.elem_count(), rng);
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
