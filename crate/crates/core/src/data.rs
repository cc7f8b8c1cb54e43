//! Concept image loading, preprocessing and seeded batch sampling.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, RgbImage};
use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenRole;
use crate::backend::TokenId;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ImageSet {
    pub images: Vec<RgbImage>,
    pub source_paths: Vec<PathBuf>,
    /// Files that were present but not decodable as images.
    pub skipped: Vec<PathBuf>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Loads every decodable raster file in `dir`, in file-name order.
pub fn load_concept_images(dir: &Path) -> Result<ImageSet> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut set = ImageSet { images: Vec::new(), source_paths: Vec::new(), skipped: Vec::new() };
    for path in paths {
        match image::open(&path) {
            Ok(img) => {
                set.images.push(img.to_rgb8());
                set.source_paths.push(path);
            }
            Err(err) => {
                warn!("skipping {}: {err}", path.display());
                set.skipped.push(path);
            }
        }
    }
    if set.is_empty() {
        return Err(Error::EmptyImageSet(dir.to_path_buf()));
    }
    Ok(set)
}

/// Center-crops to a square, resizes bilinearly and scales to [-1, 1].
/// Output is `[3, resolution, resolution]`.
pub fn preprocess(image: &RgbImage, resolution: usize) -> Tensor {
    let (w, h) = image.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(image, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let res = resolution as u32;
    let resized = if side == res {
        cropped
    } else {
        image::imageops::resize(&cropped, res, res, FilterType::Triangle)
    };
    let plane = resolution * resolution;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in resized.enumerate_pixels() {
        let idx = y as usize * resolution + x as usize;
        for c in 0..3 {
            data[c * plane + idx] = px.0[c] as f64 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, resolution, resolution], data).expect("shape matches")
}

/// Horizontal mirror of a `[3, H, W]` tensor.
pub fn hflip(pixels: &Tensor) -> Tensor {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let src = pixels.data();
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[c * h * w + y * w + x] = src[c * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(pixels.shape().to_vec(), out).expect("shape matches")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingBatch {
    /// `[batch, 3, H, W]` in [-1, 1].
    pub pixel_tensor: Tensor,
    pub prompt_token_ids: Vec<TokenId>,
    pub token_positions: Vec<(TokenRole, usize)>,
    /// Index into the image set of each batch item.
    pub image_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub resolution: usize,
    pub hflip: bool,
}

/// Seeded stream of exactly `total_steps` batches, sampled uniformly with replacement.
pub struct BatchStream {
    pixels: Vec<Tensor>,
    prompt_token_ids: Vec<TokenId>,
    token_positions: Vec<(TokenRole, usize)>,
    config: BatchConfig,
    rng: ChaCha8Rng,
    emitted: usize,
}

pub fn make_batches(
    imageset: &ImageSet,
    prompt_token_ids: &[TokenId],
    token_positions: &[(TokenRole, usize)],
    config: BatchConfig,
    seed: u64,
) -> Result<BatchStream> {
    if imageset.is_empty() {
        return Err(Error::EmptyImageSet(PathBuf::new()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let pixels = imageset.images.iter().map(|img| preprocess(img, config.resolution)).collect();
    Ok(BatchStream {
        pixels,
        prompt_token_ids: prompt_token_ids.to_vec(),
        token_positions: token_positions.to_vec(),
        config,
        rng: rng_for(seed, "data"),
        emitted: 0,
    })
}

impl Iterator for BatchStream {
    type Item = TrainingBatch;

    fn next(&mut self) -> Option<TrainingBatch> {
        if self.emitted >= self.config.total_steps {
            return None;
        }
        self.emitted += 1;
        let n = self.pixels.len();
        let mut items = Vec::with_capacity(self.config.batch_size);
        let mut image_indices = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let idx = self.rng.random_range(0..n);
            let flip = self.config.hflip && self.rng.random_bool(0.5);
            items.push(if flip { hflip(&self.pixels[idx]) } else { self.pixels[idx].clone() });
            image_indices.push(idx);
        }
        Some(TrainingBatch {
            pixel_tensor: Tensor::stack(&items).expect("uniform image shapes"),
            prompt_token_ids: self.prompt_token_ids.clone(),
            token_positions: self.token_positions.clone(),
            image_indices,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.config.total_steps - self.emitted;
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchStream {}

/// `count` images of one synthetic "object": a disc whose palette and size are
/// fixed by `seed`, jittered per image, on a vertical gradient.
pub fn synthetic_images(count: usize, size: u32, seed: u64) -> Vec<RgbImage> {
    let mut rng = rng_for(seed, "synthetic-concept");
    let base: [f64; 3] = [rng.random_range(40.0..220.0), rng.random_range(40.0..220.0), rng.random_range(40.0..220.0)];
    let backdrop: [f64; 3] = [rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)];
    let base_radius = rng.random_range(0.15..0.3);
    (0..count)
        .map(|_| {
            let cx = size as f64 * rng.random_range(0.35..0.65);
            let cy = size as f64 * rng.random_range(0.35..0.65);
            let radius = size as f64 * base_radius * rng.random_range(0.85..1.15);
            let tint: Vec<f64> = base.iter().map(|b| (b + rng.random_range(-20.0..20.0)).clamp(0.0, 255.0)).collect();
            RgbImage::from_fn(size, size, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if (dx * dx + dy * dy).sqrt() < radius {
                    image::Rgb([tint[0] as u8, tint[1] as u8, tint[2] as u8])
                } else {
                    let g = 40.0 + 160.0 * y as f64 / size as f64;
                    image::Rgb([(g * backdrop[0]) as u8, (g * backdrop[1]) as u8, (g * backdrop[2]) as u8])
                }
            })
        })
        .collect()
}

/// Writes [`synthetic_images`] as `concept_NN.png` files.
pub fn write_synthetic_concept(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for (i, img) in synthetic_images(count, size, seed).into_iter().enumerate() {
        let path = dir.join(format!("concept_{i:02}.png"));
        DynamicImage::ImageRgb8(img).save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        paths.push(path);
    }
    Ok(paths)
}
