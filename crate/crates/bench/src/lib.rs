//! Seeded inputs shared by the benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vda_core::{Image, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1)`.
pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape matches data")
}

/// Smooth gradient plus noise, so blur and compression have work to do.
pub fn image(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-0.1..0.1)).collect();
    Image::from_fn(size, size, |y, x| {
        (0.5 + 0.3 * ((x + y) as f64 / size as f64 - 0.5) + noise[y * size + x]).clamp(0.0, 1.0)
    })
}

pub fn images(seed: u64, n: usize, size: usize) -> Vec<Image> {
    let mut r = rng(seed);
    (0..n).map(|_| image(&mut r, size)).collect()
}
