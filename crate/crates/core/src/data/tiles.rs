//! Overlapping tile grids, tiled inference and logit merging.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slc_tensor::{Conv2d, ConvSpec, Real, Tape, Tensor};

use crate::data::image::Image;
use crate::error::{CoreError, Result};
use crate::network::Slcnet;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileGrid {
    pub tile_size: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `(row, col)` of each tile's top-left pixel, row-major.
    pub origins: Vec<(usize, usize)>,
}

/// Origins along one axis: step by `stride`, clamp the last to `len − tile`.
pub fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        let clamped = o.min(len - tile);
        if out.last() != Some(&clamped) {
            out.push(clamped);
        }
        if o + tile >= len {
            break;
        }
        o += stride;
    }
    out
}

pub fn make_tile_grid(height: usize, width: usize, tile_size: usize, overlap: f64) -> Result<TileGrid> {
    if tile_size == 0 || tile_size > height || tile_size > width {
        return Err(CoreError::Contract(format!("tile {tile_size} does not fit a {height}×{width} source")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(CoreError::Config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    let stride = ((tile_size as f64 * (1.0 - overlap)).round() as usize).max(1);
    let rows = axis_origins(height, tile_size, stride);
    let cols = axis_origins(width, tile_size, stride);
    let origins = rows.iter().flat_map(|&r| cols.iter().map(move |&c| (r, c))).collect();
    Ok(TileGrid {
        tile_size,
        stride,
        height,
        width,
        origins,
    })
}

/// How overlapping tile logits are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Merge {
    #[default]
    Mean,
    /// Later tiles overwrite earlier ones.
    LastWrite,
}

impl std::str::FromStr for Merge {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Merge::Mean),
            "last_write" => Ok(Merge::LastWrite),
            other => Err(format!("unknown merge mode `{other}` (mean|last_write)")),
        }
    }
}

impl std::fmt::Display for Merge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Merge::Mean => "mean",
            Merge::LastWrite => "last_write",
        })
    }
}

/// Logits `(n, t, t)` (leading batch axis of 1 allowed) placed at `origin`.
#[derive(Clone, Debug)]
pub struct TileLogits<T: Real> {
    pub origin: (usize, usize),
    pub logits: Tensor<T>,
}

/// Combine tile logits into `(1, n, height, width)`. The mean is kept as a
/// running mean, so identical contributions reproduce their value exactly.
pub fn merge_predictions<T: Real>(tiles: &[TileLogits<T>], height: usize, width: usize, merge: Merge) -> Result<Tensor<T>> {
    let first = tiles.first().ok_or_else(|| CoreError::Contract("no tiles to merge".into()))?;
    let n = first.logits.shape()[first.logits.rank() - 3];
    let hw = height * width;
    let mut out = vec![T::zero(); n * hw];
    let mut count = vec![0u32; hw];
    for tile in tiles {
        let s = tile.logits.shape();
        let (tn, th, tw) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        let (r0, c0) = tile.origin;
        if tn != n || r0 + th > height || c0 + tw > width {
            return Err(CoreError::Contract(format!("tile {s:?} at {:?} does not fit {n}×{height}×{width}", tile.origin)));
        }
        let d = tile.logits.data();
        for y in 0..th {
            for x in 0..tw {
                let p = (r0 + y) * width + c0 + x;
                count[p] += 1;
                let k = T::lit(count[p] as f64);
                for c in 0..n {
                    let v = d[(c * th + y) * tw + x];
                    let slot = &mut out[c * hw + p];
                    *slot = match merge {
                        Merge::Mean => *slot + (v - *slot) / k,
                        Merge::LastWrite => v,
                    };
                }
            }
        }
    }
    if let Some(p) = count.iter().position(|&c| c == 0) {
        return Err(CoreError::Contract(format!("pixel ({}, {}) not covered by any tile", p / width, p % width)));
    }
    Ok(Tensor::new(&[1, n, height, width], out)?)
}

/// Anything that maps `(N, 3, H, W)` images to `(N, n, H, W)` logits.
pub trait Segmenter<T: Real> {
    fn n_classes(&self) -> usize;
    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Real> Segmenter<T> for Slcnet<T> {
    fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.predict_logits(images)
    }
}

/// A single 1×1 convolution: each output pixel depends only on the same
/// input pixel.
#[derive(Clone, Debug)]
pub struct PointwiseSegmenter<T: Real> {
    pub conv: Conv2d<T>,
}

impl<T: Real> PointwiseSegmenter<T> {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointwiseSegmenter {
            conv: Conv2d::new(3, n_classes, 1, ConvSpec::default(), true, &mut rng),
        }
    }
}

impl<T: Real> Segmenter<T> for PointwiseSegmenter<T> {
    fn n_classes(&self) -> usize {
        self.conv.out_channels()
    }

    fn logits(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let y = self.conv.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Tile `image`, run `model` on every tile and merge the logits into
/// `(1, n, H, W)`. A source smaller than the tile is zero-padded up to one
/// tile and the logits cropped back.
pub fn predict_tiled<T: Real>(model: &mut dyn Segmenter<T>, image: &Image, tile: usize, overlap: f64, merge: Merge) -> Result<Tensor<T>> {
    let (h, w) = (image.height(), image.width());
    let (ph, pw) = (h.max(tile), w.max(tile));
    let padded;
    let source = if (ph, pw) == (h, w) {
        image
    } else {
        padded = image.pad_to(ph, pw, 0.0);
        &padded
    };
    let grid = make_tile_grid(ph, pw, tile, overlap)?;
    let mut tiles = Vec::with_capacity(grid.origins.len());
    for &(r, c) in &grid.origins {
        let crop = source.crop(r, c, tile, tile);
        let logits = model.logits(&crop.to_tensor())?;
        tiles.push(TileLogits { origin: (r, c), logits });
    }
    let merged = merge_predictions(&tiles, ph, pw, merge)?;
    if (ph, pw) == (h, w) {
        return Ok(merged);
    }
    let n = model.n_classes();
    let d = merged.data();
    let mut out = Vec::with_capacity(n * h * w);
    for c in 0..n {
        for y in 0..h {
            let start = (c * ph + y) * pw;
            out.extend_from_slice(&d[start..start + w]);
        }
    }
    Ok(Tensor::new(&[1, n, h, w], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_overlap_grid_on_512() {
        let g = make_tile_grid(512, 512, 256, 0.25).unwrap();
        assert_eq!(g.stride, 192);
        assert_eq!(axis_origins(512, 256, 192), vec![0, 192, 256]);
        assert_eq!(g.origins.len(), 9);
    }

    #[test]
    fn whole_source_is_one_tile() {
        let g = make_tile_grid(64, 64, 64, 0.25).unwrap();
        assert_eq!(g.origins, vec![(0, 0)]);
        assert!(make_tile_grid(32, 64, 48, 0.25).is_err());
    }

    #[test]
    fn half_overlap_mean_of_constants() {
        let a = TileLogits {
            origin: (0, 0),
            logits: Tensor::full(&[1, 2, 4], 1.0f64),
        };
        let b = TileLogits {
            origin: (0, 2),
            logits: Tensor::full(&[1, 2, 4], 4.0),
        };
        let m = merge_predictions(&[a.clone(), b.clone()], 2, 6, Merge::Mean).unwrap();
        assert_eq!(&m.data()[..6], &[1.0, 1.0, 2.5, 2.5, 4.0, 4.0]);
        let m = merge_predictions(&[a.clone(), b], 2, 6, Merge::LastWrite).unwrap();
        assert_eq!(&m.data()[..6], &[1.0, 1.0, 4.0, 4.0, 4.0, 4.0]);
        assert!(merge_predictions(&[a], 2, 6, Merge::Mean).is_err());
    }
}
