//! Class colours for overlays, stored as `id r g b` lines in `palette.txt`.

use std::fmt::Write as _;
use std::path::Path;

use slc_core::data::image::Image;
use slc_core::data::synth::default_colors;
use slc_core::LabelMap;

use crate::error::{CliError, Result};

pub const FILE_NAME: &str = "palette.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette(pub Vec<[u8; 3]>);

impl Palette {
    pub fn default_for(n_classes: usize) -> Self {
        Palette(
            default_colors(n_classes)
                .into_iter()
                .map(|c| c.map(|v| (v * 255.0).round() as u8))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Ids must be listed as `0..n` without gaps, in any order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, [u8; 3])> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || CliError::Config(format!("palette line {}: expected `id r g b`", i + 1));
            let v: Vec<&str> = line.split_whitespace().collect();
            if v.len() != 4 {
                return Err(bad());
            }
            let id = v[0].parse().map_err(|_| bad())?;
            let mut rgb = [0u8; 3];
            for (dst, s) in rgb.iter_mut().zip(&v[1..]) {
                *dst = s.parse().map_err(|_| bad())?;
            }
            entries.push((id, rgb));
        }
        entries.sort_by_key(|e| e.0);
        if entries.iter().enumerate().any(|(i, e)| e.0 != i) {
            return Err(CliError::Config("palette ids must be 0..n without gaps or repeats".into()));
        }
        Ok(Palette(entries.into_iter().map(|e| e.1).collect()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, c) in self.0.iter().enumerate() {
            let _ = writeln!(out, "{i} {} {} {}", c[0], c[1], c[2]);
        }
        out
    }

    /// Class colours blended half-and-half with the image; ignored pixels
    /// keep the image colour.
    pub fn overlay(&self, image: &Image, labels: &LabelMap) -> Vec<u8> {
        let base = image.to_rgb8();
        let mut out = Vec::with_capacity(base.len());
        for (p, &id) in labels.ids().iter().enumerate() {
            for c in 0..3 {
                let b = base[3 * p + c] as u16;
                out.push(match self.0.get(id as usize) {
                    Some(col) if !labels.is_ignored(id) => ((b + col[c] as u16 + 1) / 2) as u8,
                    _ => b as u8,
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_gaps() {
        let p = Palette::default_for(5);
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        assert!(Palette::parse("0 1 2 3\n2 1 2 3\n").is_err());
        assert!(Palette::parse("0 1 2 300\n").is_err());
    }
}
