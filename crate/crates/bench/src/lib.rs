//! Shared inputs for the criterion benches.

use ndarray::Array4;
use negtune_core::ImageBatch;

/// Deterministic textured batch of `n` RGB images.
pub fn textured_batch(n: usize, side: usize, phase: f64) -> ImageBatch {
    let data = Array4::from_shape_fn((n, 3, side, side), |(b, c, y, x)| {
        let t = (x as f64 * 0.071 + phase + b as f64).sin() * (y as f64 * 0.053 + c as f64).cos();
        0.5 + 0.4 * t
    });
    ImageBatch::new(data).expect("values lie in [0, 1]")
}
