//! Procedural three-class corpus for desk-scale runs.
//!
//! Every image shares a smooth random background. Classes differ only in a
//! fine-scale signature: REAL images carry faint sensor-like noise, GAN
//! images checkerboards of period 2 and 4 (the upsampling grid), DM images
//! white noise plus noise held constant over 2x2 blocks.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, DataError};

/// One generator (or real source) directory of a toy corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySource {
    pub label: ClassLabel,
    pub tag: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyCorpusSpec {
    pub sources: Vec<ToySource>,
    pub size: u32,
    pub seed: u64,
}

impl ToyCorpusSpec {
    /// Two tags per class with `per_tag` images each.
    pub fn standard(per_tag: usize, size: u32, seed: u64) -> Self {
        let tags = [
            (ClassLabel::Real, "celeba"),
            (ClassLabel::Real, "ffhq"),
            (ClassLabel::Gan, "stylegan2"),
            (ClassLabel::Gan, "progan"),
            (ClassLabel::Dm, "ddpm"),
            (ClassLabel::Dm, "ldm"),
        ];
        Self {
            sources: tags
                .iter()
                .map(|&(label, tag)| ToySource {
                    label,
                    tag: tag.into(),
                    count: per_tag,
                })
                .collect(),
            size,
            seed,
        }
    }
}

fn tag_seed(tag: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Renders one toy image of `label`, fully determined by `seed`.
pub fn toy_image(label: ClassLabel, size: u32, seed: u64) -> RgbImage {
    toy_image_with_variant(label, size, seed, 0)
}

fn toy_image_with_variant(label: ClassLabel, size: u32, seed: u64, variant: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label.index() as u64) << 56);
    let n = size as f64;
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fx = rng.gen_range(0.5..2.5);
            let fy = rng.gen_range(0.5..2.5);
            let amp = rng.gen_range(6.0..16.0);
            let phase = [
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ];
            (fx, fy, amp, phase)
        })
        .collect();
    let tint: [f64; 3] = [
        rng.gen_range(100.0..150.0),
        rng.gen_range(100.0..150.0),
        rng.gen_range(100.0..150.0),
    ];
    let v = (variant % 3) as f64;
    let (noise_sd, checker, blotch_sd) = match label {
        ClassLabel::Real => (2.0, 0.0, 0.0),
        ClassLabel::Gan => (2.0, 14.0 + 2.0 * v, 0.0),
        ClassLabel::Dm => (8.0, 0.0, 14.0 + 2.0 * v),
    };
    let noise = Normal::new(0.0, noise_sd).expect("finite sd");
    // Noise constant over 2x2 blocks, so it survives one downsampling.
    let cells = size.div_ceil(2) as usize;
    let blotch_dist = Normal::new(0.0, blotch_sd.max(1e-9)).expect("finite sd");
    let blotches: Vec<f64> = (0..cells * cells)
        .map(|_| {
            if blotch_sd > 0.0 {
                blotch_dist.sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    RgbImage::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64 / n, y as f64 / n);
        // Upsampling grid: a fine checkerboard plus a 2x2-block one.
        let fine = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
        let coarse = if (x / 2 + y / 2) % 2 == 0 { 1.0 } else { -1.0 };
        let blotch = blotches[(y / 2) as usize * cells + (x / 2) as usize];
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let smooth: f64 = waves
                .iter()
                .map(|(fx, fy, amp, ph)| {
                    amp * (std::f64::consts::TAU * (fx * xf + fy * yf) + ph[c]).sin()
                })
                .sum();
            let v = tint[c]
                + smooth
                + checker * (0.5 * fine + coarse)
                + blotch
                + noise.sample(&mut rng);
            *p = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(px)
    })
}

/// Writes `root/<label>/<tag>/<index>.png` for every source of `spec`.
pub fn write_toy_corpus(root: &Path, spec: &ToyCorpusSpec) -> Result<usize, DataError> {
    let mut written = 0;
    for src in &spec.sources {
        let dir = root.join(src.label.as_str()).join(&src.tag);
        fs::create_dir_all(&dir)?;
        let variant = tag_seed(&src.tag);
        for i in 0..src.count {
            let seed = spec
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(variant)
                .wrapping_add(i as u64);
            let img = toy_image_with_variant(src.label, spec.size, seed, variant);
            img.save(dir.join(format!("{i:05}.png")))
                .map_err(|e| DataError::Io(std::io::Error::other(e)))?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_images() {
        assert_eq!(
            toy_image(ClassLabel::Gan, 16, 3),
            toy_image(ClassLabel::Gan, 16, 3)
        );
        assert_ne!(
            toy_image(ClassLabel::Gan, 16, 3),
            toy_image(ClassLabel::Dm, 16, 3)
        );
    }

    #[test]
    fn writes_layout() {
        let dir = tempfile::tempdir().unwrap();
        let n = write_toy_corpus(dir.path(), &ToyCorpusSpec::standard(2, 8, 0)).unwrap();
        assert_eq!(n, 12);
        assert!(dir.path().join("gan/progan/00001.png").exists());
    }
}
