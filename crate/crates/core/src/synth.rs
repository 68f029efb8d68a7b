//! Seeded piecewise-smooth synthetic images: a low-frequency field plus a
//! few constant-offset rectangles, clamped to [0, 1]. Stands in for natural
//! image patches wherever a corpus is not supplied.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

fn fill(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let base: f64 = rng.gen_range(0.25..0.75);
    let gx: f64 = rng.gen_range(-0.4..0.4);
    let gy: f64 = rng.gen_range(-0.4..0.4);
    let amp: f64 = rng.gen_range(0.0..0.25);
    let fx: f64 = rng.gen_range(0.5..2.5);
    let fy: f64 = rng.gen_range(0.5..2.5);
    let px: f64 = rng.gen_range(0.0..1.0);
    let py: f64 = rng.gen_range(0.0..1.0);

    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let v = y as f64 / h.max(1) as f64;
        for x in 0..w {
            let u = x as f64 / w.max(1) as f64;
            out[y * w + x] = base
                + gx * u
                + gy * v
                + amp
                    * (std::f64::consts::TAU * (fx * u + px)).cos()
                    * (std::f64::consts::TAU * (fy * v + py)).cos();
        }
    }

    let rects = rng.gen_range(1..=3);
    for _ in 0..rects {
        let x0 = rng.gen_range(0..w);
        let x1 = rng.gen_range(x0..w);
        let y0 = rng.gen_range(0..h);
        let y1 = rng.gen_range(y0..h);
        let delta: f64 = rng.gen_range(-0.35..0.35);
        for y in y0..=y1 {
            for x in x0..=x1 {
                out[y * w + x] += delta;
            }
        }
    }

    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// `count` independent square blocks, each flattened row-major to `block²`.
pub fn synthetic_blocks(count: usize, block: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..count).map(|_| fill(&mut rng, block, block)).collect()
}

/// One H x W image in [0, 1].
pub fn synthetic_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_vec(&[h, w], fill(&mut rng, h, w)).expect("shape matches fill")
}

/// Same image quantized to 8-bit.
pub fn synthetic_image_u8(h: usize, w: usize, seed: u64) -> Vec<u8> {
    synthetic_image(h, w, seed)
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}
