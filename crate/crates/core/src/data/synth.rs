//! Seeded synthetic segmentation data.
//!
//! `Shapes` paints rectangles, ellipses and full-width stripes of each class
//! over a background class, each class with its own mean colour.
//! `Longrange` splits the image into stripes that share one grey texture
//! regardless of class; a small coloured cue patch somewhere in each stripe
//! is the only thing that tells its class, so most pixels can only be
//! classified by relating them to a distant cue on the same row or column.
//! Thin class-agnostic lines mark where one stripe ends and the next begins.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::dataset::write_dataset;
use crate::data::image::Image;
use crate::error::{CoreError, Result};
use crate::labels::{LabelMap, DEFAULT_IGNORE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthVariant {
    #[default]
    Shapes,
    Longrange,
}

impl std::str::FromStr for SynthVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shapes" => Ok(SynthVariant::Shapes),
            "longrange" => Ok(SynthVariant::Longrange),
            other => Err(format!("unknown synthetic variant `{other}` (shapes|longrange)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub variant: SynthVariant,
    pub image_size: usize,
    pub n_classes: usize,
    pub n_images: usize,
    pub noise_sigma: f64,
    /// Target area fraction per class (shapes variant); `None` splits evenly.
    pub class_fractions: Option<Vec<f64>>,
    /// Mean colour per class; `None` uses [`default_colors`].
    pub colors: Option<Vec<[f32; 3]>>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            variant: SynthVariant::Shapes,
            image_size: 64,
            n_classes: 3,
            n_images: 8,
            noise_sigma: 0.08,
            class_fractions: None,
            colors: None,
            seed: 0,
        }
    }
}

/// Well-separated colours, cycling after eight classes.
pub fn default_colors(n: usize) -> Vec<[f32; 3]> {
    const BASE: [[f32; 3]; 8] = [
        [0.2, 0.2, 0.2],
        [0.85, 0.3, 0.25],
        [0.25, 0.7, 0.3],
        [0.3, 0.35, 0.85],
        [0.9, 0.8, 0.25],
        [0.7, 0.3, 0.8],
        [0.3, 0.8, 0.85],
        [0.95, 0.6, 0.75],
    ];
    (0..n).map(|i| BASE[i % BASE.len()]).collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.n_classes < 2 || self.n_classes >= DEFAULT_IGNORE as usize {
            return Err(CoreError::Config(format!(
                "synthetic data needs image_size ≥ 8 and 2 ≤ n_classes < 255, got {} and {}",
                self.image_size, self.n_classes
            )));
        }
        if let Some(f) = &self.class_fractions {
            if f.len() != self.n_classes || f.iter().any(|&v| v < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(CoreError::Config("class_fractions must be n_classes nonnegative values summing to 1".into()));
            }
        }
        if self.colors.as_ref().is_some_and(|c| c.len() != self.n_classes) {
            return Err(CoreError::Config("colors must list one RGB triple per class".into()));
        }
        if self.variant == SynthVariant::Longrange && self.image_size < 16 {
            return Err(CoreError::Config("longrange images need image_size ≥ 16".into()));
        }
        Ok(())
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.class_fractions
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.n_classes as f64; self.n_classes])
    }

    fn palette(&self) -> Vec<[f32; 3]> {
        self.colors.clone().unwrap_or_else(|| default_colors(self.n_classes))
    }

    /// Sample `index`; independent of every other index.
    pub fn sample(&self, index: usize) -> Result<(Image, LabelMap)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Ok(match self.variant {
            SynthVariant::Shapes => shapes_sample(self, &mut rng),
            SynthVariant::Longrange => longrange_sample(self, &mut rng),
        })
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Stripe { y0: usize, y1: usize },
}

impl Shape {
    fn random(size: usize, rng: &mut ChaCha8Rng) -> Shape {
        let s = size as f64;
        match rng.random_range(0..3) {
            0 => {
                let (h, w) = (rng.random_range(size / 8..=size / 2), rng.random_range(size / 8..=size / 2));
                let (y0, x0) = (rng.random_range(0..=size - h), rng.random_range(0..=size - w));
                Shape::Rect { y0, x0, y1: y0 + h, x1: x0 + w }
            }
            1 => Shape::Ellipse {
                cy: rng.random_range(0.0..s),
                cx: rng.random_range(0.0..s),
                ry: rng.random_range(s / 10.0..s / 4.0),
                rx: rng.random_range(s / 10.0..s / 4.0),
            },
            _ => {
                let h = rng.random_range(2..=(size / 6).max(2));
                let y0 = rng.random_range(0..=size - h);
                Shape::Stripe { y0, y1: y0 + h }
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Stripe { y0, y1 } => (y0..y1).contains(&y),
        }
    }
}

fn render(ids: &[u8], size: usize, colors: &[[f32; 3]], sigma: f64, rng: &mut ChaCha8Rng) -> Image {
    let noise = Normal::new(0.0, sigma.max(1e-12)).expect("finite sigma");
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    for (p, &id) in ids.iter().enumerate() {
        for c in 0..3 {
            let v = colors[id as usize][c] as f64 + if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            data[c * hw + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(size, size, data).expect("size matches")
}

/// Class 0 is the background; every other class is painted only over
/// background until it reaches its target pixel count.
fn shapes_sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Image, LabelMap) {
    let size = spec.image_size;
    let total = size * size;
    let mut ids = vec![0u8; total];
    let fractions = spec.fractions();
    let mut order: Vec<usize> = (1..spec.n_classes).collect();
    // Shuffle so no class is systematically painted last.
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    for &class in &order {
        let target = (fractions[class] * total as f64).round() as usize;
        let mut painted = 0;
        let mut attempts = 0;
        while painted < target && attempts < 200 {
            attempts += 1;
            let shape = Shape::random(size, rng);
            'paint: for y in 0..size {
                for x in 0..size {
                    if painted >= target {
                        break 'paint;
                    }
                    let p = y * size + x;
                    if ids[p] == 0 && shape.contains(y, x) {
                        ids[p] = class as u8;
                        painted += 1;
                    }
                }
            }
        }
    }
    let image = render(&ids, size, &spec.palette(), spec.noise_sigma, rng);
    (image, LabelMap::new(size, size, ids, DEFAULT_IGNORE).expect("size matches"))
}

const BOUNDARY_GREY: f32 = 0.25;

/// Cue patch side length for a long-range image.
pub fn cue_size(image_size: usize) -> usize {
    (image_size / 8).max(2)
}

fn longrange_sample(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (Image, LabelMap) {
    let size = spec.image_size;
    let cue = cue_size(size);
    let min_band = cue + 2;
    // Band boundaries along the stripe-normal axis.
    let max_bands = (size / min_band).clamp(2, 4);
    let bands = rng.random_range(2..=max_bands);
    let mut cuts: Vec<usize> = Vec::new();
    loop {
        cuts.clear();
        for _ in 1..bands {
            cuts.push(rng.random_range(min_band..=size - min_band));
        }
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(size);
        if cuts.windows(2).all(|w| w[1] - w[0] >= min_band) {
            break;
        }
    }
    let mut classes: Vec<u8> = (0..bands).map(|_| rng.random_range(0..spec.n_classes) as u8).collect();
    if classes.iter().all(|&c| c == classes[0]) {
        let i = rng.random_range(0..bands);
        classes[i] = ((classes[i] as usize + 1) % spec.n_classes) as u8;
    }
    let vertical = rng.random_bool(0.5);
    let band_of = |t: usize| cuts.windows(2).position(|w| (w[0]..w[1]).contains(&t)).expect("bands cover");

    let mut ids = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = if vertical { x } else { y };
            ids[y * size + x] = classes[band_of(t)];
        }
    }
    // Same grey texture everywhere.
    let grey = vec![[0.5f32; 3]; spec.n_classes];
    let mut image = render(&ids, size, &grey, spec.noise_sigma, rng);
    let palette = spec.palette();
    let hw = size * size;
    // A thin dark line opens every band after the first. It marks where a
    // band starts but says nothing about its class.
    for &cut in &cuts[1..bands] {
        for a in 0..size {
            let (y, x) = if vertical { (a, cut) } else { (cut, a) };
            for c in 0..3 {
                image.data_mut()[c * hw + y * size + x] = BOUNDARY_GREY;
            }
        }
    }
    for (b, w) in cuts.windows(2).enumerate() {
        // Clear of the boundary line at w[0].
        let across = rng.random_range(w[0] + 1..=w[1] - cue - 1);
        let along = rng.random_range(0..=size - cue);
        for a in 0..cue {
            for o in 0..cue {
                let (y, x) = if vertical { (along + o, across + a) } else { (across + a, along + o) };
                for (c, &v) in palette[classes[b] as usize].iter().enumerate() {
                    image.data_mut()[c * hw + y * size + x] = v;
                }
            }
        }
    }
    (image, LabelMap::new(size, size, ids, DEFAULT_IGNORE).expect("size matches"))
}

/// Write `spec.n_images` samples under `dir` in the dataset layout and
/// return the stems.
pub fn generate_synthetic(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<Vec<String>> {
    spec.validate()?;
    let samples = (0..spec.n_images)
        .map(|i| spec.sample(i).map(|(im, l)| (format!("synth_{i:05}"), im, l)))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(dir, &samples)
}
