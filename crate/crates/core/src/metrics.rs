//! Confusion-matrix accumulation and per-class segmentation scores.

use crate::error::{CoreError, Result};
use crate::labels::LabelMap;

/// `counts[gt][pred]` over evaluated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    /// Ground-truth ids skipped entirely, besides each map's own ignore id.
    ignore: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClassScores {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    /// Per class; `None` for ignored classes.
    pub per_class: Vec<Option<ClassScores>>,
    pub miou: f64,
    pub ave_f1: f64,
    /// Any evaluated class had an undefined ratio.
    pub undefined: bool,
}

fn ratio(num: u64, den: u64, undefined: &mut bool) -> f64 {
    if den == 0 {
        *undefined = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self::with_ignore(n_classes, &[])
    }

    /// Classes in `ignore` are neither counted nor averaged.
    pub fn with_ignore(n_classes: usize, ignore: &[u8]) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
            ignore: ignore.to_vec(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn ignored(&self) -> &[u8] {
        &self.ignore
    }

    pub fn from_counts(n_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(CoreError::Contract(format!("{n_classes} classes need {} counts", n_classes * n_classes)));
        }
        Ok(ConfusionMatrix {
            n: n_classes,
            counts,
            ignore: Vec::new(),
        })
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(CoreError::Contract(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            if gt.is_ignored(g) || self.ignore.contains(&g) {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.n || p >= self.n {
                return Err(CoreError::Contract(format!("id {} outside {} classes", g.max(p), self.n)));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum with another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(CoreError::Contract("merging confusion matrices of different sizes".into()));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn class_scores(&self, c: usize) -> ClassScores {
        let tp = self.get(c, c);
        let row: u64 = (0..self.n).map(|j| self.get(c, j)).sum();
        let col: u64 = (0..self.n).map(|i| self.get(i, c)).sum();
        let (fp, fn_) = (col - tp, row - tp);
        let mut undefined = false;
        let iou = ratio(tp, tp + fp + fn_, &mut undefined);
        let precision = ratio(tp, tp + fp, &mut undefined);
        let recall = ratio(tp, tp + fn_, &mut undefined);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            undefined = true;
            0.0
        };
        ClassScores {
            iou,
            precision,
            recall,
            f1,
            undefined,
        }
    }

    pub fn scores(&self) -> Scores {
        let per_class: Vec<Option<ClassScores>> = (0..self.n)
            .map(|c| (!self.ignore.contains(&(c as u8))).then(|| self.class_scores(c)))
            .collect();
        let evaluated: Vec<&ClassScores> = per_class.iter().flatten().collect();
        let k = evaluated.len().max(1) as f64;
        Scores {
            miou: evaluated.iter().map(|s| s.iou).sum::<f64>() / k,
            ave_f1: evaluated.iter().map(|s| s.f1).sum::<f64>() / k,
            undefined: evaluated.iter().any(|s| s.undefined),
            per_class,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DEFAULT_IGNORE;

    #[test]
    fn perfect_prediction() {
        let gt = LabelMap::new(2, 2, vec![0, 1, 1, 0], DEFAULT_IGNORE).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&gt, &gt).unwrap();
        let s = cm.scores();
        assert_eq!((s.miou, s.ave_f1), (1.0, 1.0));
        let zeros = LabelMap::filled(2, 2, 0);
        let mut cm = ConfusionMatrix::new(1);
        cm.accumulate(&zeros, &zeros).unwrap();
        assert_eq!(cm.get(0, 0), 4);
    }

    #[test]
    fn all_ignored_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&LabelMap::filled(3, 3, 1), &LabelMap::filled(3, 3, DEFAULT_IGNORE)).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn hand_counts() {
        // class 0: TP 2, FP 1, FN 1
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 1, 5]).unwrap();
        let s = cm.class_scores(0);
        assert_eq!(s.iou, 0.5);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15 && (s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_is_flagged() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 0, 0, 0]).unwrap();
        let s = cm.scores();
        assert!(s.undefined);
        assert_eq!(s.per_class[1].unwrap().iou, 0.0);
        assert_eq!(s.miou, 0.5);
    }

    #[test]
    fn ignored_classes_leave_the_mean() {
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1], DEFAULT_IGNORE).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 0, 1], DEFAULT_IGNORE).unwrap();
        let mut cm = ConfusionMatrix::with_ignore(2, &[1]);
        cm.accumulate(&pred, &gt).unwrap();
        let s = cm.scores();
        assert!(s.per_class[1].is_none());
        assert_eq!(cm.total(), 2);
        assert_eq!(s.miou, 1.0);
    }
}
