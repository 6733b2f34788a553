//! Epoch loop, evaluation and score diagnostics on in-memory samples.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slc_tensor::{Adam, Mode, Real, Tape};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::dataset::Sample;
use crate::data::image::Image;
use crate::data::tiles::{predict_tiled, Merge, Segmenter};
use crate::error::{CoreError, Result};
use crate::labels::LabelMap;
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_labels, lr_at, train_step, Batch, LossBreakdown, Slcnet};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at which the rate is divided by 10.
    pub lr_drop_epochs: Vec<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            lr_drop_epochs: Vec::new(),
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

/// Shuffle, augment and train on every sample once. Returns the mean of
/// each loss term over the epoch's steps.
pub fn run_epoch<T: Real>(
    model: &mut Slcnet<T>,
    optimizer: &mut Adam<T>,
    samples: &[Sample],
    options: &TrainOptions,
    epoch: usize,
    step: &mut u64,
) -> Result<LossBreakdown> {
    if samples.is_empty() || options.batch_size == 0 {
        return Err(CoreError::Config("training needs samples and a positive batch size".into()));
    }
    optimizer.set_lr(lr_at(epoch, options.lr, &options.lr_drop_epochs));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let mut sum = LossBreakdown::default();
    let mut steps = 0usize;
    for chunk in order.chunks(options.batch_size) {
        let pairs: Vec<(Image, LabelMap)> = chunk
            .iter()
            .map(|&i| augment(&samples[i].image, &samples[i].labels, &options.augment, &mut rng))
            .collect();
        let images: Vec<&Image> = pairs.iter().map(|(im, _)| im).collect();
        let batch = Batch {
            images: Image::batch(&images)?,
            labels: pairs.iter().map(|(_, l)| l.clone()).collect(),
        };
        let l = train_step(model, optimizer, &batch, *step)?;
        *step += 1;
        steps += 1;
        sum.total += l.total;
        sum.fcsm += l.fcsm;
        sum.side += l.side;
        sum.lovasz += l.lovasz;
    }
    let k = steps as f64;
    Ok(LossBreakdown {
        total: sum.total / k,
        fcsm: sum.fcsm / k,
        side: sum.side / k,
        lovasz: sum.lovasz / k,
    })
}

/// Predicted label map for one image; tiled when `tile` is given and the
/// image is not exactly one tile.
pub fn predict_labels<T: Real>(model: &mut dyn Segmenter<T>, image: &Image, tile: Option<usize>, overlap: f64, merge: Merge) -> Result<LabelMap> {
    let logits = match tile {
        Some(t) if (image.height(), image.width()) != (t, t) => predict_tiled(model, image, t, overlap, merge)?,
        _ => model.logits(&image.to_tensor())?,
    };
    Ok(argmax_labels(&logits)?.remove(0))
}

pub fn evaluate<T: Real>(
    model: &mut dyn Segmenter<T>,
    samples: &[Sample],
    tile: Option<usize>,
    overlap: f64,
    merge: Merge,
    ignore: &[u8],
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::with_ignore(model.n_classes(), ignore);
    for s in samples {
        let pred = predict_labels(model, &s.image, tile, overlap, merge)?;
        cm.accumulate(&pred, &s.labels)?;
    }
    Ok(cm)
}

/// Mean attention score between same-class and between different-class
/// pixel pairs (self pairs excluded), over rows and columns of every
/// sample, at one attention scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreSeparation {
    pub same: f64,
    pub cross: f64,
}

pub fn score_separation<T: Real>(model: &mut Slcnet<T>, samples: &[Sample], scale: usize) -> Result<ScoreSeparation> {
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for s in samples {
        let mut tape = Tape::new();
        let x = tape.constant(s.image.to_tensor());
        let out = model.forward(&mut tape, x, Mode::Eval)?;
        let scores = out
            .fcsm_scores
            .iter()
            .find(|(sc, _)| *sc == scale)
            .map(|(_, sc)| *sc)
            .ok_or_else(|| CoreError::Config(format!("no attention at scale {scale}")))?;
        let labels = s.labels.downsample_nearest(scale);
        let lines: [(Vec<Vec<u8>>, &[T]); 2] = [
            ((0..labels.height()).map(|r| labels.row(r).to_vec()).collect(), tape.value(scores.rows).data()),
            ((0..labels.width()).map(|c| labels.column(c)).collect(), tape.value(scores.cols).data()),
        ];
        for (lines, values) in lines {
            let len = lines[0].len();
            for (l, line) in lines.iter().enumerate() {
                for i in 0..len {
                    for j in 0..len {
                        let (a, b) = (line[i], line[j]);
                        if i == j || labels.is_ignored(a) || labels.is_ignored(b) {
                            continue;
                        }
                        let v = values[(l * len + i) * len + j].as_f64();
                        if a == b {
                            same += v;
                            n_same += 1;
                        } else {
                            cross += v;
                            n_cross += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(ScoreSeparation {
        same: same / n_same.max(1) as f64,
        cross: cross / n_cross.max(1) as f64,
    })
}
