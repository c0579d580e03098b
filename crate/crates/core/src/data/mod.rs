//! Samples, datasets, augmentation and checkpoints.

pub mod checkpoint;
pub mod netpbm;
pub mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::bilinear_resize;
use crate::tensor::{no_grad, Float, Shape, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use synthetic::gen_synthetic;

/// Manifest file name inside a dataset directory.
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// `(3, h, w)` planar, in `[0, 1]`.
    pub image: Vec<f32>,
    /// `(1, h, w)`, exactly 0 or 1.
    pub mask: Vec<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Reads `dir/manifest.txt`: one `image<TAB>mask` pair per line, paths
    /// relative to `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut samples = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (img, mask) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: manifest.display().to_string(),
                offset: text.lines().take(line_no).map(|l| l.len() + 1).sum(),
                detail: format!("line {} is not `image<TAB>mask`", line_no + 1),
            })?;
            let rgb = netpbm::read_rgb(&dir.join(img))?;
            let (mw, mh, m) = netpbm::read_mask(&dir.join(mask))?;
            if (mw, mh) != (rgb.width, rgb.height) {
                return Err(Error::dim(
                    "dataset",
                    format!("{img} is {}x{} but {mask} is {mw}x{mh}", rgb.width, rgb.height),
                ));
            }
            let id = Path::new(img)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("{line_no}"));
            samples.push(Sample {
                id,
                height: rgb.height,
                width: rgb.width,
                image: rgb.data,
                mask: m,
            });
        }
        if samples.is_empty() {
            return Err(Error::Config(format!("{} lists no samples", manifest.display())));
        }
        Ok(Dataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Moves the last `count` samples into a second dataset.
    pub fn split_off(&mut self, count: usize) -> Dataset {
        let at = self.samples.len().saturating_sub(count);
        Dataset {
            samples: self.samples.split_off(at),
        }
    }
}

/// Deterministic permutation of `0..n`.
pub fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Bilinear resize of planar `(c, h, w)` data.
pub fn resize_planar(data: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let t = Tensor::new(Shape::new(1, c, h, w), data.to_vec());
    no_grad(|| bilinear_resize(&t, oh, ow))
        .expect("non-empty resize")
        .to_vec()
}

/// Nearest-neighbour resize (half-pixel centres) followed by re-binarization.
pub fn resize_mask(mask: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let pick = |d: usize, len_in: usize, len_out: usize| {
        (((d as f64 + 0.5) * len_in as f64 / len_out as f64) as usize).min(len_in - 1)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, h, oh);
        for x in 0..ow {
            let sx = pick(x, w, ow);
            out.push(if mask[sy * w + sx] >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Side length of the crop as a fraction of the image side.
    pub crop_scale: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            crop_scale: (0.85, 1.0),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn crop(data: &[f32], c: usize, h: usize, w: usize, y0: usize, x0: usize, ch: usize, cw: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(c * ch * cw);
    for ci in 0..c {
        for y in y0..y0 + ch {
            let row = (ci * h + y) * w;
            out.extend_from_slice(&data[row + x0..row + x0 + cw]);
        }
    }
    out
}

fn flip(data: &mut [f32], w: usize) {
    data.chunks_mut(w).for_each(<[f32]>::reverse);
}

/// Random horizontal flip and random crop resized back to the sample size.
/// The image is resized bilinearly, the mask by nearest neighbour.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let (h, w) = (sample.height, sample.width);
    let mut out = sample.clone();
    if rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0)) {
        flip(&mut out.image, w);
        flip(&mut out.mask, w);
    }
    let (lo, hi) = cfg.crop_scale;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { hi };
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    if (ch, cw) != (h, w) {
        let y0 = rng.random_range(0..=h - ch);
        let x0 = rng.random_range(0..=w - cw);
        let img = crop(&out.image, 3, h, w, y0, x0, ch, cw);
        let mask = crop(&out.mask, 1, h, w, y0, x0, ch, cw);
        out.image = resize_planar(&img, 3, ch, cw, h, w);
        out.mask = resize_mask(&mask, ch, cw, h, w);
    }
    out
}

/// Stacks samples into `(n, 3, h, w)` images and `(n, 1, h, w)` masks.
pub fn batch<T: Float>(samples: &[&Sample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(Error::dim(
                "batch",
                format!("{} is {}x{}, batch is {h}x{w}", s.id, s.height, s.width),
            ));
        }
        images.extend(s.image.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::zero)));
        masks.extend(s.mask.iter().map(|&v| T::from_f32(v).unwrap_or_else(T::zero)));
    }
    let n = samples.len();
    Ok((
        Tensor::new(Shape::new(n, 3, h, w), images),
        Tensor::new(Shape::new(n, 1, h, w), masks),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample() -> Sample {
        synthetic::generate_sample(32, 1, 0)
    }

    #[test]
    fn double_flip_is_identity() {
        let s = sample();
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            crop_scale: (1.0, 1.0),
        };
        let mut r = rng::stream(0, rng::AUGMENT);
        let once = augment(&s, &cfg, &mut r);
        assert_ne!(once.image, s.image);
        let twice = augment(&once, &cfg, &mut r);
        assert_eq!(twice, s);
    }

    #[test]
    fn unit_crop_is_identity() {
        let s = sample();
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            crop_scale: (1.0, 1.0),
        };
        let out = augment(&s, &cfg, &mut rng::stream(0, rng::AUGMENT));
        for (a, b) in out.image.iter().zip(&s.image) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn masks_stay_binary() {
        let s = sample();
        let mut r = rng::stream(5, rng::AUGMENT);
        for _ in 0..20 {
            let out = augment(&s, &AugmentConfig::default(), &mut r);
            assert!(out.mask.iter().all(|&m| m == 0.0 || m == 1.0));
            assert_eq!(out.image.len(), s.image.len());
        }
    }

    #[test]
    fn shuffle_is_deterministic() {
        let a = shuffled(50, &mut rng::stream(3, rng::SHUFFLE));
        let b = shuffled(50, &mut rng::stream(3, rng::SHUFFLE));
        assert_eq!(a, b);
    }
}
