//! Training-time augmentation. Photometric ops touch only the image; flips
//! are applied to image and labels together.

use rand::Rng;

use crate::data::image::{Image, CHANNELS};
use crate::labels::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub p_equalize: f64,
    pub p_blur: f64,
    pub blur_sigma: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_equalize: 0.25,
            p_blur: 0.25,
            blur_sigma: 0.8,
            p_hflip: 0.5,
            p_vflip: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every op disabled.
    pub fn none() -> Self {
        AugmentConfig {
            p_equalize: 0.0,
            p_blur: 0.0,
            blur_sigma: 1.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
        }
    }
}

/// Per-channel 256-bin CDF remap.
pub fn histogram_equalize(image: &Image) -> Image {
    let mut out = image.clone();
    let n = image.height() * image.width();
    for c in 0..CHANNELS {
        let bins: Vec<usize> = image.channel(c).iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as usize).collect();
        let mut hist = [0usize; 256];
        bins.iter().for_each(|&b| hist[b] += 1);
        let mut cdf = [0usize; 256];
        let mut acc = 0;
        for (i, &h) in hist.iter().enumerate() {
            acc += h;
            cdf[i] = acc;
        }
        let cdf_min = cdf[bins.iter().copied().min().unwrap_or(0)];
        if n == cdf_min {
            continue; // a single intensity: nothing to spread
        }
        for (dst, &b) in out.channel_mut(c).iter_mut().zip(&bins) {
            *dst = ((cdf[b] - cdf_min) as f64 / (n - cdf_min) as f64) as f32;
        }
    }
    out
}

/// 3×3 Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let k1: Vec<f64> = [-1.0f64, 0.0, 1.0].iter().map(|d| (-(d * d) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k1.iter().sum();
    let k1: Vec<f64> = k1.iter().map(|v| v / total).collect();
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..CHANNELS {
        let src = image.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, ky) in k1.iter().enumerate() {
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in k1.iter().enumerate() {
                        let xx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += ky * kx * src[yy * w + xx] as f64;
                    }
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

pub fn augment(image: &Image, labels: &LabelMap, config: &AugmentConfig, rng: &mut impl Rng) -> (Image, LabelMap) {
    let mut image = image.clone();
    let mut labels = labels.clone();
    if rng.random_bool(config.p_equalize) {
        image = histogram_equalize(&image);
    }
    if rng.random_bool(config.p_blur) {
        image = gaussian_blur(&image, config.blur_sigma);
    }
    if rng.random_bool(config.p_hflip) {
        image = image.flip_horizontal();
        labels = labels.flip_horizontal();
    }
    if rng.random_bool(config.p_vflip) {
        image = image.flip_vertical();
        labels = labels.flip_vertical();
    }
    (image, labels)
}
