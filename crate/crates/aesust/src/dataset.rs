//! Image folders as training corpora.

use std::path::{Path, PathBuf};

use aesust_core::train::{Batch, TrainConfig};
use aesust_core::Tensor;
use image::imageops::FilterType;
use image::RgbImage;
use rand::Rng;

use crate::imageio;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} contains no files")]
    Empty(PathBuf),
    #[error("none of the {count} files in {dir} could be decoded")]
    NothingDecodable { dir: PathBuf, count: usize },
}

/// Size after scaling the smaller edge to `target`, keeping the aspect ratio.
pub fn resized_dims(width: u32, height: u32, target: u32) -> (u32, u32) {
    let scale = |long: u32, short: u32| ((long as u64 * target as u64 + short as u64 / 2) / short as u64) as u32;
    if width <= height {
        (target, scale(height, width))
    } else {
        (scale(width, height), target)
    }
}

/// Decoded images, already resized so the smaller edge is
/// `max(resize_smaller_edge, crop)`.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub names: Vec<String>,
    images: Vec<RgbImage>,
}

impl Corpus {
    pub fn load(dir: &Path, resize_smaller_edge: u32, crop: u32) -> Result<Self, DataError> {
        let io = |source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        };
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(DataError::Empty(dir.to_path_buf()));
        }
        let target = resize_smaller_edge.max(crop);
        let mut names = Vec::new();
        let mut images = Vec::new();
        for path in &paths {
            let bytes = match std::fs::read(path) {
                Ok(b) => b,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            match imageio::decode_rgb(&bytes) {
                Ok(img) => {
                    let (w, h) = resized_dims(img.width(), img.height(), target);
                    let img = if (w, h) == img.dimensions() {
                        img
                    } else {
                        image::imageops::resize(&img, w, h, FilterType::Triangle)
                    };
                    names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
                    images.push(img);
                }
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(DataError::NothingDecodable {
                dir: dir.to_path_buf(),
                count: paths.len(),
            });
        }
        Ok(Corpus { names, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dims(&self, i: usize) -> (u32, u32) {
        self.images[i].dimensions()
    }

    /// `n` random crops of side `crop`, images drawn with replacement.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize, crop: u32) -> Tensor<f32> {
        let c = crop as usize;
        let plane = c * c;
        let mut data = vec![0f32; n * 3 * plane];
        for b in 0..n {
            let img = &self.images[rng.gen_range(0..self.images.len())];
            let (w, h) = img.dimensions();
            let left = rng.gen_range(0..=w - crop);
            let top = rng.gen_range(0..=h - crop);
            for y in 0..c {
                for x in 0..c {
                    let px = img.get_pixel(left + x as u32, top + y as u32);
                    for ch in 0..3 {
                        data[(b * 3 + ch) * plane + y * c + x] = px[ch] as f32 / 255.0;
                    }
                }
            }
        }
        Tensor::from_vec(&[n, 3, c, c], data).expect("sized")
    }
}

pub fn prepare_batch<R: Rng>(content: &Corpus, style: &Corpus, cfg: &TrainConfig, rng: &mut R) -> Batch<f32> {
    Batch {
        content: content.sample(rng, cfg.batch_size, cfg.crop),
        style: style.sample(rng, cfg.batch_size, cfg.crop),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smaller_edge_arithmetic() {
        assert_eq!(resized_dims(600, 900, 512), (512, 768));
        assert_eq!(resized_dims(900, 600, 512), (768, 512));
        assert_eq!(resized_dims(512, 512, 512), (512, 512));
    }
}
