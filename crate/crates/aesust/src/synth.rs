//! Deterministic synthetic corpus for desk-scale runs: smooth
//! "photographs" for content, high-frequency patterned "paintings" for style.

use std::f32::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SIZE: u32 = 96;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Low-frequency gradients plus one soft blob.
pub fn content_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    let tilt: [f32; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
    let (fx, fy, ph): (f32, f32, f32) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.0..6.3));
    let (bx, by, br): (f32, f32, f32) = (rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.1..0.25));
    let blob: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    let s = size as f32;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = (x as f32 / s, y as f32 / s);
        let wave = 0.15 * (fx * u * TAU + ph).sin() * (fy * v * TAU).cos();
        let d2 = ((u - bx).powi(2) + (v - by).powi(2)) / (br * br);
        let w = (-d2).exp();
        Rgb([0, 1, 2].map(|c| {
            let bg = base[c] + tilt[c] * (u - v) + wave;
            to_u8(bg * (1.0 - w) + blob[c] * w)
        }))
    })
}

/// Two-color stripes or checks at a random angle, with per-pixel grain.
pub fn style_image(seed: u64, size: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let b: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let period: f32 = rng.gen_range(4.0..12.0);
    let angle: f32 = rng.gen_range(0.0..PI);
    let checks = rng.gen_bool(0.5);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut grain = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    RgbImage::from_fn(size, size, |x, y| {
        let (x, y) = (x as f32, y as f32);
        let p = ((x * ca + y * sa) / period * TAU).sin();
        let q = ((y * ca - x * sa) / period * TAU).sin();
        let t = if checks { p * q } else { p };
        let m = 0.5 + 0.5 * t.signum() * t.abs().sqrt();
        let n: f32 = grain.gen_range(-0.06..0.06);
        Rgb([0, 1, 2].map(|c| to_u8(a[c] * m + b[c] * (1.0 - m) + n)))
    })
}

/// Writes `content/NN.png` and `style/NN.png` under `root`; returns the two
/// directories.
pub fn write_corpus(root: &Path, n_content: usize, n_style: usize, size: u32, seed: u64) -> std::io::Result<(PathBuf, PathBuf)> {
    let content = root.join("content");
    let style = root.join("style");
    std::fs::create_dir_all(&content)?;
    std::fs::create_dir_all(&style)?;
    let save = |img: RgbImage, path: PathBuf| img.save(&path).map_err(std::io::Error::other);
    for i in 0..n_content {
        save(content_image(seed.wrapping_add(i as u64), size), content.join(format!("{i:02}.png")))?;
    }
    for i in 0..n_style {
        save(style_image(seed.wrapping_add(1000 + i as u64), size), style.join(format!("{i:02}.png")))?;
    }
    Ok((content, style))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(content_image(3, 32), content_image(3, 32));
        assert_ne!(content_image(3, 32), content_image(4, 32));
        assert_eq!(style_image(3, 32), style_image(3, 32));
    }
}
