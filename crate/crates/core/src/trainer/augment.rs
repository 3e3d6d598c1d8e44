//! Random resized crop → horizontal flip → colour jitter → gaussian blur →
//! random grayscale, applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Image;
use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Fraction of the image area kept by the crop, `[lo, hi] ⊂ (0, 1]`.
    pub crop_scale: (f64, f64),
    /// Aspect-ratio range of the crop box.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Probability that jitter is applied at all.
    pub jitter_prob: f64,
    pub blur_sigma: (f64, f64),
    pub blur_prob: f64,
    pub gray_prob: f64,
}

impl Default for AugmentationConfig {
    /// Desk-scale version of the usual SimCLR recipe.
    fn default() -> Self {
        Self {
            crop_scale: (0.6, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            jitter_prob: 0.8,
            blur_sigma: (0.1, 1.0),
            blur_prob: 0.5,
            gray_prob: 0.2,
        }
    }
}

impl AugmentationConfig {
    /// Every stage disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            jitter_prob: 0.0,
            blur_sigma: (0.0, 0.0),
            blur_prob: 0.0,
            gray_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(TrainError::Validation(format!("crop scale range [{lo}, {hi}] is empty or outside (0, 1]")));
        }
        let (rlo, rhi) = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(TrainError::Validation(format!("crop ratio range [{rlo}, {rhi}] is invalid")));
        }
        for (name, p) in [
            ("flip", self.flip_prob),
            ("jitter", self.jitter_prob),
            ("blur", self.blur_prob),
            ("grayscale", self.gray_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TrainError::Validation(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        for (name, s) in [("brightness", self.brightness), ("contrast", self.contrast), ("saturation", self.saturation)]
        {
            if !(0.0..=1.0).contains(&s) {
                return Err(TrainError::Validation(format!("{name} strength {s} outside [0, 1]")));
            }
        }
        let (blo, bhi) = self.blur_sigma;
        if !(blo >= 0.0 && blo <= bhi) {
            return Err(TrainError::Validation(format!("blur sigma range [{blo}, {bhi}] is invalid")));
        }
        Ok(())
    }
}

/// Per-pixel luminance weights for RGB; other channel counts use the mean.
pub fn luminance(px: &[f64]) -> f64 {
    if px.len() == 3 {
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    } else {
        px.iter().sum::<f64>() / px.len() as f64
    }
}

#[inline]
fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn resized_crop<R: Rng>(im: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Option<Image> {
    let (h, w) = (im.height as f64, im.width as f64);
    let area = h * w;
    let mut boxed = None;
    for _ in 0..10 {
        let target = area * uniform(rng, cfg.crop_scale.0, cfg.crop_scale.1);
        let ratio = uniform(rng, cfg.crop_ratio.0.ln(), cfg.crop_ratio.1.ln()).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= w && ch <= h {
            let x0 = uniform(rng, 0.0, w - cw);
            let y0 = uniform(rng, 0.0, h - ch);
            boxed = Some((x0, y0, cw, ch));
            break;
        }
    }
    let (x0, y0, cw, ch) = boxed.unwrap_or((0.0, 0.0, w, h));
    if (x0, y0, cw, ch) == (0.0, 0.0, w, h) {
        return None;
    }
    let mut out = Image::zeros(im.height, im.width, im.channels);
    let (sx, sy) = (cw / w, ch / h);
    for y in 0..im.height {
        let fy = (y0 + (y as f64 + 0.5) * sy - 0.5).clamp(0.0, h - 1.0);
        let (y_lo, ty) = (fy.floor() as usize, fy - fy.floor());
        let y_hi = (y_lo + 1).min(im.height - 1);
        for x in 0..im.width {
            let fx = (x0 + (x as f64 + 0.5) * sx - 0.5).clamp(0.0, w - 1.0);
            let (x_lo, tx) = (fx.floor() as usize, fx - fx.floor());
            let x_hi = (x_lo + 1).min(im.width - 1);
            for c in 0..im.channels {
                let top = im.at(y_lo, x_lo, c) * (1.0 - tx) + im.at(y_lo, x_hi, c) * tx;
                let bottom = im.at(y_hi, x_lo, c) * (1.0 - tx) + im.at(y_hi, x_hi, c) * tx;
                *out.at_mut(y, x, c) = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    Some(out)
}

pub fn hflip(im: &Image) -> Image {
    let mut out = im.clone();
    for y in 0..im.height {
        for x in 0..im.width {
            for c in 0..im.channels {
                *out.at_mut(y, x, c) = im.at(y, im.width - 1 - x, c);
            }
        }
    }
    out
}

fn gray_mean(im: &Image) -> f64 {
    let pixels = im.height * im.width;
    im.data.chunks_exact(im.channels).map(luminance).sum::<f64>() / pixels as f64
}

fn color_jitter<R: Rng>(im: &mut Image, cfg: &AugmentationConfig, rng: &mut R) {
    if cfg.brightness > 0.0 {
        let f = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
        im.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
    }
    if cfg.contrast > 0.0 {
        let f = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
        let mean = gray_mean(im);
        im.data.iter_mut().for_each(|v| *v = (mean + (*v - mean) * f).clamp(0.0, 1.0));
    }
    if cfg.saturation > 0.0 && im.channels > 1 {
        let f = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
        for px in im.data.chunks_exact_mut(im.channels) {
            let l = luminance(px);
            px.iter_mut().for_each(|v| *v = (l + (*v - l) * f).clamp(0.0, 1.0));
        }
    }
}

fn gaussian_blur(im: &Image, sigma: f64) -> Image {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Image::zeros(im.height, im.width, im.channels);
    for y in 0..im.height {
        for x in 0..im.width {
            for c in 0..im.channels {
                *tmp.at_mut(y, x, c) = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * im.at(y, clamp(x as isize + k as isize - radius, im.width), c))
                    .sum();
            }
        }
    }
    let mut out = Image::zeros(im.height, im.width, im.channels);
    for y in 0..im.height {
        for x in 0..im.width {
            for c in 0..im.channels {
                *out.at_mut(y, x, c) = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp.at(clamp(y as isize + k as isize - radius, im.height), x, c))
                    .sum();
            }
        }
    }
    out
}

pub fn grayscale(im: &Image) -> Image {
    let mut out = im.clone();
    for px in out.data.chunks_exact_mut(im.channels) {
        let l = luminance(px);
        px.fill(l);
    }
    out
}

/// Applies the augmentation chain, drawing every random decision from `rng`.
pub fn augment<R: Rng>(image: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Result<Image, TrainError> {
    cfg.validate()?;
    if image.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(TrainError::Validation("image values must lie in [0, 1]".into()));
    }
    let mut im = resized_crop(image, cfg, rng).unwrap_or_else(|| image.clone());
    if rng.random_bool(cfg.flip_prob) {
        im = hflip(&im);
    }
    if rng.random_bool(cfg.jitter_prob) {
        color_jitter(&mut im, cfg, rng);
    }
    if rng.random_bool(cfg.blur_prob) {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        if sigma > 0.0 {
            im = gaussian_blur(&im, sigma);
        }
    }
    if rng.random_bool(cfg.gray_prob) {
        im = grayscale(&im);
    }
    im.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::trainer::data::{Dataset, SyntheticDatasetSpec};
    use proptest::prelude::*;

    fn sample() -> Image {
        Dataset::synthetic(&SyntheticDatasetSpec::default().with_samples(3, 1)).unwrap().images[1].clone()
    }

    #[test]
    fn identity_config_is_identity() {
        let im = sample();
        let mut r = rng::stream(1, &[]);
        assert_eq!(augment(&im, &AugmentationConfig::identity(), &mut r).unwrap(), im);
    }

    #[test]
    fn double_flip_is_identity() {
        let im = sample();
        let cfg = AugmentationConfig { flip_prob: 1.0, ..AugmentationConfig::identity() };
        let mut r = rng::stream(2, &[]);
        let once = augment(&im, &cfg, &mut r).unwrap();
        assert_ne!(once, im);
        assert_eq!(augment(&once, &cfg, &mut r).unwrap(), im);
    }

    #[test]
    fn grayscale_matches_scalar_luminance() {
        let im = sample();
        let cfg = AugmentationConfig { gray_prob: 1.0, ..AugmentationConfig::identity() };
        let out = augment(&im, &cfg, &mut rng::stream(3, &[])).unwrap();
        for y in 0..im.height {
            for x in 0..im.width {
                let (r, g, b) = (im.at(y, x, 0), im.at(y, x, 1), im.at(y, x, 2));
                let l = 0.299 * r + 0.587 * g + 0.114 * b;
                for c in 0..3 {
                    assert!((out.at(y, x, c) - l).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let im = sample();
        let mut r = rng::stream(4, &[]);
        let empty = AugmentationConfig { crop_scale: (0.9, 0.5), ..AugmentationConfig::default() };
        assert!(augment(&im, &empty, &mut r).is_err());
        let zero = AugmentationConfig { crop_scale: (0.0, 0.5), ..AugmentationConfig::default() };
        assert!(augment(&im, &zero, &mut r).is_err());
        let prob = AugmentationConfig { flip_prob: 1.5, ..AugmentationConfig::default() };
        assert!(augment(&im, &prob, &mut r).is_err());
        let mut bad = im.clone();
        bad.data[0] = 1.5;
        assert!(augment(&bad, &AugmentationConfig::default(), &mut r).is_err());
    }

    #[test]
    fn deterministic_per_stream() {
        let im = sample();
        let cfg = AugmentationConfig::default();
        let a = augment(&im, &cfg, &mut rng::stream(9, &[1])).unwrap();
        let b = augment(&im, &cfg, &mut rng::stream(9, &[1])).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn output_in_range_and_same_shape(seed: u64) {
            let im = sample();
            let out = augment(&im, &AugmentationConfig::default(), &mut rng::stream(seed, &[])).unwrap();
            prop_assert_eq!(out.shape(), im.shape());
            prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
