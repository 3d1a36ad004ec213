use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RawImage;
use crate::error::{EscError, Result};
use crate::rng;
use crate::tensor::{bilinear_resize, Tensor};

/// Crop/resize pipeline. At full scale this is resize 256, crop 224; at
/// other input sizes the 256:224 ratio is kept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub input_size: usize,
    pub resize_size: usize,
    /// Normalized pixel value that maps to zero (the background level).
    pub background: f32,
}

impl PreprocessConfig {
    pub fn for_input(input_size: usize, background: f32) -> Self {
        Self {
            input_size,
            resize_size: (input_size as f64 * 256.0 / 224.0).round() as usize,
            background,
        }
    }

    /// Central square crop, conversion to `(v - background) / 0.5` and
    /// bilinear resize to `resize_size`.
    pub fn square_and_resize(&self, image: &RawImage) -> Result<Tensor<f32>> {
        let (h, w, c) = (image.height, image.width, image.channels);
        if h == 0 || w == 0 || c == 0 {
            return Err(EscError::Degenerate(format!("image of size {h}x{w}x{c}")));
        }
        let side = h.min(w);
        let (oy, ox) = ((h - side) / 2, (w - side) / 2);
        let mut data = Vec::with_capacity(c * side * side);
        for ch in 0..c {
            for y in oy..oy + side {
                for x in ox..ox + side {
                    let v = image.data[(y * w + x) * c + ch] as f32 / 255.0;
                    data.push((v - self.background) / 0.5);
                }
            }
        }
        let sq = Tensor::new(vec![c, side, side], data)?;
        bilinear_resize(&sq, self.resize_size, self.resize_size)
    }

    /// Deterministic eval transform: square, resize, centre crop.
    pub fn eval(&self, image: &RawImage) -> Result<Tensor<f32>> {
        let r = self.square_and_resize(image)?;
        let off = (self.resize_size - self.input_size) / 2;
        Ok(crop(&r, off, off, self.input_size, false))
    }

    /// Training transform: square, resize, random horizontal flip, random crop.
    pub fn train(&self, image: &RawImage, rng: &mut impl Rng) -> Result<Tensor<f32>> {
        let r = self.square_and_resize(image)?;
        Ok(self.augment(&r, rng))
    }

    /// Flip + random crop of an already resized `[C, R, R]` tensor.
    pub fn augment(&self, resized: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
        let flip = rng.random_bool(0.5);
        let span = self.resize_size - self.input_size;
        let oy = rng.random_range(0..=span);
        let ox = rng.random_range(0..=span);
        crop(resized, oy, ox, self.input_size, flip)
    }
}

/// `[C, size, size]` window at `(oy, ox)`, optionally mirrored left-right.
pub fn crop(image: &Tensor<f32>, oy: usize, ox: usize, size: usize, flip: bool) -> Tensor<f32> {
    let s = image.shape();
    let (c, w) = (s[0], s[2]);
    let h = s[1];
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in oy..oy + size {
            let row = &image.data()[(ch * h + y) * w..(ch * h + y + 1) * w];
            if flip {
                out.extend(row[ox..ox + size].iter().rev());
            } else {
                out.extend_from_slice(&row[ox..ox + size]);
            }
        }
    }
    Tensor::new(vec![c, size, size], out).expect("crop shape")
}

/// Mirrors a `[C, H, W]` tensor left-right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape()[2];
    let data = image.data().chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
    Tensor::new(image.shape().to_vec(), data).expect("same size")
}

pub fn preprocess_eval(image: &RawImage, config: &PreprocessConfig) -> Result<Tensor<f32>> {
    config.eval(image)
}

pub fn preprocess_train(image: &RawImage, config: &PreprocessConfig, seed: u64) -> Result<Tensor<f32>> {
    config.train(image, &mut rng::substream(seed, "augment"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> RawImage {
        RawImage {
            height: h,
            width: w,
            channels: 1,
            data: (0..h * w).map(|i| ((i % w) * 255 / w.max(1)) as u8).collect(),
        }
    }

    #[test]
    fn resize_keeps_ratio() {
        assert_eq!(PreprocessConfig::for_input(224, 0.5).resize_size, 256);
        assert_eq!(PreprocessConfig::for_input(64, 0.5).resize_size, 73);
    }

    #[test]
    fn wide_image_is_centre_cropped_to_square() {
        let cfg = PreprocessConfig {
            input_size: 200,
            resize_size: 200,
            background: 0.0,
        };
        let img = gradient(200, 300);
        let sq = cfg.square_and_resize(&img).unwrap();
        assert_eq!(sq.shape(), &[1, 200, 200]);
        let expect = img.data[50] as f32 / 255.0 / 0.5;
        assert_eq!(sq.data()[0], expect);
    }

    #[test]
    fn eval_is_deterministic_and_train_is_seeded() {
        let cfg = PreprocessConfig::for_input(64, 0.5);
        let img = gradient(80, 64);
        assert_eq!(cfg.eval(&img).unwrap(), cfg.eval(&img).unwrap());
        assert_eq!(preprocess_train(&img, &cfg, 3).unwrap(), preprocess_train(&img, &cfg, 3).unwrap());
        assert_eq!(cfg.eval(&img).unwrap().shape(), &[1, 64, 64]);
    }

    #[test]
    fn flip_is_an_involution() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32).collect()).unwrap();
        let f = flip_horizontal(&t);
        assert_eq!(&f.data()[..4], &[3.0, 2.0, 1.0, 0.0]);
        assert_eq!(flip_horizontal(&f), t);
    }

    #[test]
    fn empty_image_is_rejected() {
        let cfg = PreprocessConfig::for_input(64, 0.5);
        let img = RawImage {
            height: 0,
            width: 4,
            channels: 1,
            data: vec![],
        };
        assert!(cfg.eval(&img).is_err());
    }
}
