use std::path::Path;

use image::imageops::FilterType;
use rayon::prelude::*;

use super::{DataError, Manifest};
use crate::nn::Tensor;

pub const DEFAULT_INPUT_SIZE: (usize, usize) = (64, 64);

/// Decodes an image into a (3,H,W) tensor with values in [0,1], resizing
/// bilinearly to `size = (H, W)` when the stored dimensions differ.
pub fn load_image_tensor(path: &Path, size: (usize, usize)) -> Result<Tensor, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (h, w) = size;
    let img = if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle)
    };
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("consistent shape"))
}

/// Loads every record of `m` in manifest order.
pub fn load_tensors(m: &Manifest, size: (usize, usize)) -> Result<Vec<Tensor>, DataError> {
    m.records()
        .par_iter()
        .map(|r| load_image_tensor(&r.path, size))
        .collect()
}
