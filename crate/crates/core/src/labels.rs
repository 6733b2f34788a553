//! Class-id rasters.

use crate::error::{CoreError, Result};

pub const DEFAULT_IGNORE: u8 = 255;

/// 2-D raster of class ids with a reserved ignore id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    ids: Vec<u8>,
    ignore_id: u8,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, ids: Vec<u8>, ignore_id: u8) -> Result<Self> {
        if height == 0 || width == 0 || ids.len() != height * width {
            return Err(CoreError::Contract(format!(
                "label map {height}×{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            ids,
            ignore_id,
        })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        LabelMap {
            height,
            width,
            ids: vec![id; height * width],
            ignore_id: DEFAULT_IGNORE,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ignore_id(&self) -> u8 {
        self.ignore_id
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn ids_mut(&mut self) -> &mut [u8] {
        &mut self.ids
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn is_ignored(&self, id: u8) -> bool {
        id == self.ignore_id
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.ids[y * self.width..(y + 1) * self.width]
    }

    pub fn column(&self, x: usize) -> Vec<u8> {
        (0..self.height).map(|y| self.get(y, x)).collect()
    }

    /// Class id per pixel, `None` for ignored pixels.
    pub fn targets(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.ids.iter().map(|&id| (id != self.ignore_id).then_some(id as usize))
    }

    /// Reject ids outside `[0, n_classes)` other than the ignore id.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id != self.ignore_id && id as usize >= n_classes) {
            Some(bad) => Err(CoreError::Contract(format!(
                "label id {bad} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour downsampling to `ceil(H/f)×ceil(W/f)`, taking the
    /// top-left pixel of each cell.
    pub fn downsample_nearest(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height.div_ceil(factor), self.width.div_ceil(factor));
        let mut ids = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                ids.push(self.get(y * factor, x * factor));
            }
        }
        LabelMap {
            height: h,
            width: w,
            ids,
            ignore_id: self.ignore_id,
        }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.ids.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> LabelMap {
        let mut ids = Vec::with_capacity(self.ids.len());
        for y in (0..self.height).rev() {
            ids.extend_from_slice(self.row(y));
        }
        LabelMap { ids, ..self.clone() }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> LabelMap {
        let mut ids = Vec::with_capacity(height * width);
        for y in top..top + height {
            ids.extend_from_slice(&self.row(y)[left..left + width]);
        }
        LabelMap {
            height,
            width,
            ids,
            ignore_id: self.ignore_id,
        }
    }
}
