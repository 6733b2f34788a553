//! On-disk dataset layout: `images/<stem>.png`, `labels/<stem>.png` and a
//! `manifest.txt` listing one stem per line.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;
use crate::data::raster::{load_image, load_labels, save_image, save_labels};
use crate::error::{CoreError, Result};
use crate::labels::LabelMap;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: Image,
    pub labels: LabelMap,
}

pub fn image_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("images").join(format!("{stem}.png"))
}

pub fn label_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join("labels").join(format!("{stem}.png"))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

/// Write samples and the manifest; returns the stems in order.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[(String, Image, LabelMap)]) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("labels"))?;
    for (stem, image, labels) in samples {
        save_image(image_path(dir, stem), image)?;
        save_labels(label_path(dir, stem), labels)?;
    }
    let stems: Vec<String> = samples.iter().map(|(s, _, _)| s.clone()).collect();
    write_manifest(dir, &stems)?;
    Ok(stems)
}

pub fn write_manifest(dir: &Path, stems: &[String]) -> Result<()> {
    let path = dir.join(MANIFEST);
    let mut text = stems.join("\n");
    text.push('\n');
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))
}

/// Stems from `manifest.txt`, or the sorted `.png` stems under `images/`
/// when there is no manifest.
pub fn read_stems(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    let manifest = dir.join(MANIFEST);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| CoreError::io(&manifest, e))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect());
    }
    list_stems(&dir.join("images"))
}

/// Sorted stems of the `.png` files directly inside `dir`.
pub fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CoreError::io(dir, e))? {
        let path = entry.map_err(|e| CoreError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_sample(dir: &Path, stem: &str) -> Result<Sample> {
    let image = load_image(image_path(dir, stem))?;
    let labels = load_labels(label_path(dir, stem))?;
    if (image.height(), image.width()) != (labels.height(), labels.width()) {
        return Err(CoreError::Contract(format!(
            "{stem}: image {}×{} but labels {}×{}",
            image.height(),
            image.width(),
            labels.height(),
            labels.width()
        )));
    }
    Ok(Sample {
        stem: stem.to_string(),
        image,
        labels,
    })
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    read_stems(dir)?.iter().map(|s| load_sample(dir, s)).collect()
}

/// Counts written by [`make_offline_tiles`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileCounts {
    pub train: usize,
    pub val: usize,
}

/// Cut every source pair into non-overlapping `tile×tile` crops (partial
/// edge crops are dropped) and split them into `out/train` and `out/val`,
/// sending a seeded random `holdout` fraction to validation.
pub fn make_offline_tiles(src: impl AsRef<Path>, out: impl AsRef<Path>, tile: usize, holdout: f64, seed: u64) -> Result<TileCounts> {
    if tile == 0 || !(0.0..=1.0).contains(&holdout) {
        return Err(CoreError::Config(format!("tile {tile} / holdout {holdout} out of range")));
    }
    let (src, out) = (src.as_ref(), out.as_ref());
    let mut crops = Vec::new();
    for sample in load_dataset(src)? {
        let (h, w) = (sample.image.height(), sample.image.width());
        for r in 0..h / tile {
            for c in 0..w / tile {
                let (y, x) = (r * tile, c * tile);
                crops.push((
                    format!("{}_r{r}_c{c}", sample.stem),
                    sample.image.crop(y, x, tile, tile),
                    sample.labels.crop(y, x, tile, tile),
                ));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    crops.shuffle(&mut rng);
    let n_val = (crops.len() as f64 * holdout).round() as usize;
    let train = crops.split_off(n_val);
    let val = crops;
    write_dataset(out.join("train"), &train)?;
    write_dataset(out.join("val"), &val)?;
    Ok(TileCounts {
        train: train.len(),
        val: val.len(),
    })
}
