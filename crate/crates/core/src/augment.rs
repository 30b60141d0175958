//! Photometric and flip augmentation applied to samples during training.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::sample::{Image, Sample};

/// Augmentation magnitudes. Brightness, contrast and saturation are maximum
/// deviations of a multiplicative factor from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub blur_sigma_range: [f32; 2],
    pub noise_std_range: [f32; 2],
    pub brightness_range: f32,
    pub contrast_range: f32,
    pub saturation_range: f32,
    pub pixel_dropout_prob: f32,
    pub flip_prob: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            blur_sigma_range: [0.0, 1.5],
            noise_std_range: [0.0, 0.05],
            brightness_range: 0.2,
            contrast_range: 0.2,
            saturation_range: 0.2,
            pixel_dropout_prob: 0.05,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("augment.{field}: {reason}")]
pub struct AugmentConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            blur_sigma_range: [0.0, 0.0],
            noise_std_range: [0.0, 0.0],
            brightness_range: 0.0,
            contrast_range: 0.0,
            saturation_range: 0.0,
            pixel_dropout_prob: 0.0,
            flip_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentConfigError> {
        let err = |field, reason: &str| Err(AugmentConfigError { field, reason: reason.to_string() });
        for (field, [lo, hi]) in [("blur_sigma_range", self.blur_sigma_range), ("noise_std_range", self.noise_std_range)] {
            if !(lo >= 0.0 && hi >= lo) {
                return err(field, "must be [lo, hi] with 0 <= lo <= hi");
            }
        }
        for (field, v) in
            [("brightness_range", self.brightness_range), ("contrast_range", self.contrast_range), ("saturation_range", self.saturation_range)]
        {
            if !(0.0..1.0).contains(&v) {
                return err(field, "must lie in [0, 1)");
            }
        }
        for (field, p) in [("pixel_dropout_prob", self.pixel_dropout_prob), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return err(field, "must be a probability in [0, 1]");
            }
        }
        Ok(())
    }
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f32; 2]) -> f32 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn factor<R: Rng + ?Sized>(rng: &mut R, dev: f32) -> Option<f32> {
    (dev > 0.0).then(|| rng.random_range(1.0 - dev..=1.0 + dev))
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(im: &mut Image, sigma: f32) {
    if sigma < 1e-3 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    let (h, w) = (im.height as isize, im.width as isize);
    let mut tmp = vec![0.0f32; (h * w) as usize];
    for c in 0..3 {
        let plane = im.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = (-r..=r).map(|d| k[(d + r) as usize] * plane[(y * w + (x + d).clamp(0, w - 1)) as usize]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[((y + d).clamp(0, h - 1) * w + x) as usize]).sum();
            }
        }
    }
}

/// Mirrors the image and every annotation about the vertical centre line.
pub fn flip_horizontal(sample: &mut Sample) {
    let (h, w) = (sample.image.height, sample.image.width);
    for c in 0..3 {
        let plane = sample.image.plane_mut(c);
        for y in 0..h {
            plane[y * w..(y + 1) * w].reverse();
        }
    }
    for inst in &mut sample.instances {
        inst.polygons = inst.polygons.iter().map(|p| p.mirrored_horizontal(w as f64)).collect();
        let [x, y, bw, bh] = inst.bbox;
        inst.bbox = [w as f64 - x - bw, y, bw, bh];
    }
}

/// Applies blur, noise, brightness, contrast, saturation, dropout and flip in
/// that order. Annotations only change under the flip.
pub fn augment_sample<R: Rng + ?Sized>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R) -> Sample {
    let mut out = sample.clone();
    let im = &mut out.image;
    let n = im.height * im.width;

    gaussian_blur(im, sample_range(rng, cfg.blur_sigma_range));

    let std = sample_range(rng, cfg.noise_std_range);
    if std > 0.0 {
        let normal = Normal::new(0.0f32, std).expect("finite std");
        im.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    if let Some(f) = factor(rng, cfg.brightness_range) {
        im.data.iter_mut().for_each(|v| *v *= f);
    }
    if let Some(f) = factor(rng, cfg.contrast_range) {
        let mean = (0..n).map(|i| luma(im, i)).sum::<f32>() / n.max(1) as f32;
        im.data.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
    }
    if let Some(f) = factor(rng, cfg.saturation_range) {
        for i in 0..n {
            let g = luma(im, i);
            for c in 0..3 {
                let v = &mut im.data[c * n + i];
                *v = g + (*v - g) * f;
            }
        }
    }
    if cfg.pixel_dropout_prob > 0.0 {
        let p = rng.random_range(0.0..=cfg.pixel_dropout_prob);
        for i in 0..n {
            if rng.random::<f32>() < p {
                (0..3).for_each(|c| im.data[c * n + i] = 0.0);
            }
        }
    }
    im.clamp();
    if cfg.flip_prob > 0.0 && rng.random::<f32>() < cfg.flip_prob {
        flip_horizontal(&mut out);
    }
    out
}

fn luma(im: &Image, i: usize) -> f32 {
    let n = im.height * im.width;
    0.299 * im.data[i] + 0.587 * im.data[n + i] + 0.114 * im.data[2 * n + i]
}
