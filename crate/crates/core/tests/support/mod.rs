//! Helpers shared by integration tests and the acceptance run.
#![allow(dead_code)]

pub mod direct_ms_ssim;
pub mod grad_check;

use makeup_core::ImageBuffer;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const PAIR_SIZES: [(usize, usize); 10] =
    [(176, 180), (64, 64), (100, 90), (48, 200), (33, 40), (180, 176), (96, 96), (120, 70), (22, 30), (190, 185)];

/// A smooth pattern and a noisy copy of it.
pub fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (ImageBuffer, ImageBuffer) {
    let fx = rng.random_range(0.05..0.5);
    let fy = rng.random_range(0.05..0.5);
    let noise = rng.random_range(0.0..0.3f32);
    let a = ImageBuffer::from_fn(w, h, |x, y| {
        let v = 0.5 + 0.35 * ((x as f64 * fx).sin() * (y as f64 * fy).cos()) as f32;
        [v, v * 0.8, 1.0 - v]
    });
    let b = ImageBuffer::from_fn(w, h, |x, y| {
        let p = a.get(x, y);
        let n = noise * (rng.random::<f32>() - 0.5);
        [p[0] + n, p[1] - n * 0.5, p[2] + n * 0.2]
    });
    (a, b)
}
