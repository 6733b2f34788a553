use slc_tensor::{Real, Tensor};

use crate::error::{CoreError, Result};

/// Planar RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// `3 × height × width`, channel-major.
    data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(CoreError::Contract(format!(
                "image {height}×{width} needs {} values, got {}",
                CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Image { height, width, data }
    }

    /// From interleaved 8-bit RGB.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != CHANNELS * height * width {
            return Err(CoreError::Contract(format!("expected {} RGB bytes, got {}", CHANNELS * height * width, rgb.len())));
        }
        let mut data = vec![0.0; rgb.len()];
        let hw = height * width;
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..CHANNELS {
                data[c * hw + p] = px[c] as f32 / 255.0;
            }
        }
        Image::new(height, width, data)
    }

    /// Interleaved 8-bit RGB, rounding and clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * hw);
        for p in 0..hw {
            for c in 0..CHANNELS {
                out.push((self.data[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let hw = self.height * self.width;
        &mut self.data[c * hw..(c + 1) * hw]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn max_abs_diff(&self, other: &Image) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(&[1, CHANNELS, self.height, self.width], self.data.iter().map(|&v| T::lit(v as f64)).collect())
            .expect("image shape is valid")
    }

    /// Stack images of equal size into `(N, 3, H, W)`.
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| CoreError::Contract("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for im in images {
            if (im.height, im.width) != (h, w) {
                return Err(CoreError::Contract("batched images differ in size".into()));
            }
            data.extend(im.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), CHANNELS, h, w], data)?)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in top..top + height {
                let start = (c * self.height + y) * self.width + left;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Image { height, width, data }
    }

    /// Place into a larger canvas at the top-left, filling the rest with `fill`.
    pub fn pad_to(&self, height: usize, width: usize, fill: f32) -> Image {
        let mut data = vec![fill; CHANNELS * height * width];
        for c in 0..CHANNELS {
            for y in 0..self.height.min(height) {
                let w = self.width.min(width);
                let src = (c * self.height + y) * self.width;
                let dst = (c * height + y) * width;
                data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Image { height, width, data }
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..CHANNELS {
            for y in (0..self.height).rev() {
                let start = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[start..start + self.width]);
            }
        }
        Image { data, ..*self }
    }

    /// Mean over `factor×factor` cells; edge cells average what they cover.
    pub fn downsample_mean(&self, factor: usize) -> Image {
        let (h, w) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut data = Vec::with_capacity(CHANNELS * h * w);
        for c in 0..CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    let (y1, x1) = (((y + 1) * factor).min(self.height), ((x + 1) * factor).min(self.width));
                    let mut acc = 0.0f64;
                    for yy in y * factor..y1 {
                        for xx in x * factor..x1 {
                            acc += self.get(c, yy, xx) as f64;
                        }
                    }
                    data.push((acc / ((y1 - y * factor) * (x1 - x * factor)) as f64) as f32);
                }
            }
        }
        Image { height: h, width: w, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let im = Image::from_rgb8(2, 3, &rgb).unwrap();
        assert_eq!(im.to_rgb8(), rgb);
    }

    #[test]
    fn flips_and_constant_downsample() {
        let im = Image::new(2, 2, (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(im.flip_horizontal().flip_horizontal(), im);
        assert_eq!(im.flip_vertical().channel(0), &[2.0, 3.0, 0.0, 1.0]);
        let c = Image::filled(5, 7, [0.25, 0.5, 0.75]).downsample_mean(2);
        assert_eq!((c.height(), c.width()), (3, 4));
        assert!(c.channel(2).iter().all(|&v| v == 0.75));
    }
}
