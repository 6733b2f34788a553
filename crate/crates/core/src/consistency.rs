//! Ground-truth category-consistency targets for row and column attention.
//!
//! For a line of pixels the raw consistency matrix holds 1 where two pixels
//! share a class and 0 otherwise. Each matrix row is then normalised so it can
//! be compared directly with a row of softmax attention scores.

use crate::labels::LabelMap;

/// How a binary consistency row is turned into a distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TargetNorm {
    /// Softmax over the raw 0/1 values of the valid entries.
    #[default]
    Softmax,
    /// `1/k` on each of the `k` same-class entries, 0 elsewhere.
    Uniform,
}

impl std::str::FromStr for TargetNorm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(TargetNorm::Softmax),
            "uniform" => Ok(TargetNorm::Uniform),
            other => Err(format!("unknown target normalisation `{other}`")),
        }
    }
}

impl std::fmt::Display for TargetNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TargetNorm::Softmax => "softmax",
            TargetNorm::Uniform => "uniform",
        })
    }
}

/// Square matrix with a validity flag per entry.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMatrix {
    pub size: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MaskedMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.size + j]
    }
}

/// Binary consistency of one line of labels. Pairs touching an ignored
/// pixel are masked out.
pub fn build_raw_consistency(line: &[u8], ignore_id: u8) -> MaskedMatrix {
    let n = line.len();
    let mut values = vec![0.0; n * n];
    let mut valid = vec![false; n * n];
    for (i, &a) in line.iter().enumerate() {
        for (j, &b) in line.iter().enumerate() {
            if a != ignore_id && b != ignore_id {
                valid[i * n + j] = true;
                if a == b {
                    values[i * n + j] = 1.0;
                }
            }
        }
    }
    MaskedMatrix { size: n, values, valid }
}

/// Row-normalise a raw consistency matrix over its valid entries. Rows with
/// no valid entry stay fully masked.
pub fn normalize_target(raw: &MaskedMatrix, norm: TargetNorm) -> MaskedMatrix {
    let n = raw.size;
    let mut out = raw.clone();
    for i in 0..n {
        let row = i * n..(i + 1) * n;
        let valid = &raw.valid[row.clone()];
        if !valid.iter().any(|&v| v) {
            continue;
        }
        let values = &raw.values[row.clone()];
        let dst = &mut out.values[row];
        match norm {
            TargetNorm::Softmax => {
                let total: f64 = values.iter().zip(valid).filter(|(_, &ok)| ok).map(|(&v, _)| v.exp()).sum();
                for ((d, &v), &ok) in dst.iter_mut().zip(values).zip(valid) {
                    *d = if ok { v.exp() / total } else { 0.0 };
                }
            }
            TargetNorm::Uniform => {
                let same = values.iter().zip(valid).filter(|(&v, &ok)| ok && v > 0.5).count();
                for ((d, &v), &ok) in dst.iter_mut().zip(values).zip(valid) {
                    *d = if ok && v > 0.5 { 1.0 / same as f64 } else { 0.0 };
                }
            }
        }
    }
    out
}

/// Normalised consistency targets for every row and column of a label map.
///
/// `rows` holds `height` matrices of `width×width`, `cols` holds `width`
/// matrices of `height×height`, both flattened row-major in that order.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTarget {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<f64>,
    pub row_valid: Vec<bool>,
    pub cols: Vec<f64>,
    pub col_valid: Vec<bool>,
}

impl CorrelationTarget {
    pub fn row_matrix(&self, r: usize) -> MaskedMatrix {
        let len = self.width * self.width;
        MaskedMatrix {
            size: self.width,
            values: self.rows[r * len..(r + 1) * len].to_vec(),
            valid: self.row_valid[r * len..(r + 1) * len].to_vec(),
        }
    }

    pub fn col_matrix(&self, c: usize) -> MaskedMatrix {
        let len = self.height * self.height;
        MaskedMatrix {
            size: self.height,
            values: self.cols[c * len..(c + 1) * len].to_vec(),
            valid: self.col_valid[c * len..(c + 1) * len].to_vec(),
        }
    }
}

/// Targets built directly on `labels`.
pub fn build_targets(labels: &LabelMap, norm: TargetNorm) -> CorrelationTarget {
    let (h, w, ignore) = (labels.height(), labels.width(), labels.ignore_id());
    let mut target = CorrelationTarget {
        height: h,
        width: w,
        rows: Vec::with_capacity(h * w * w),
        row_valid: Vec::with_capacity(h * w * w),
        cols: Vec::with_capacity(w * h * h),
        col_valid: Vec::with_capacity(w * h * h),
    };
    for r in 0..h {
        let m = normalize_target(&build_raw_consistency(labels.row(r), ignore), norm);
        target.rows.extend(m.values);
        target.row_valid.extend(m.valid);
    }
    for c in 0..w {
        let m = normalize_target(&build_raw_consistency(&labels.column(c), ignore), norm);
        target.cols.extend(m.values);
        target.col_valid.extend(m.valid);
    }
    target
}

/// Targets on the labels nearest-downsampled by `scale`.
pub fn build_targets_for_scale(labels: &LabelMap, scale: usize, norm: TargetNorm) -> CorrelationTarget {
    if scale == 1 {
        build_targets(labels, norm)
    } else {
        build_targets(&labels.downsample_nearest(scale), norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::DEFAULT_IGNORE;

    const IG: u8 = DEFAULT_IGNORE;

    #[test]
    fn raw_matrix_of_two_classes() {
        let m = build_raw_consistency(&[0, 0, 1], IG);
        assert_eq!(m.values, vec![1., 1., 0., 1., 1., 0., 0., 0., 1.]);
        assert!(m.valid.iter().all(|&v| v));
        let same = build_raw_consistency(&[3; 4], IG);
        assert!(same.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn raw_matrix_masks_ignored_pixels() {
        let m = build_raw_consistency(&[0, IG, 0], IG);
        assert_eq!(m.get(0, 2), 1.0);
        for k in 0..3 {
            assert!(!m.is_valid(1, k) && !m.is_valid(k, 1));
        }
        assert!(m.is_valid(0, 0) && m.is_valid(2, 0));
    }

    #[test]
    fn softmax_rows_hand_values() {
        let e = std::f64::consts::E;
        let m = normalize_target(&build_raw_consistency(&[0, 0, 1], IG), TargetNorm::Softmax);
        let row: Vec<f64> = (0..3).map(|j| m.get(0, j)).collect();
        let expect = [e / (2.0 * e + 1.0), e / (2.0 * e + 1.0), 1.0 / (2.0 * e + 1.0)];
        for (a, b) in row.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((row[0] - 0.42232).abs() < 1e-5 && (row[2] - 0.15536).abs() < 1e-5);

        let m = normalize_target(&build_raw_consistency(&[2, 5], IG), TargetNorm::Softmax);
        assert!((m.get(0, 0) - 0.73106).abs() < 1e-5 && (m.get(0, 1) - 0.26894).abs() < 1e-5);

        let m = normalize_target(&build_raw_consistency(&[1; 5], IG), TargetNorm::Softmax);
        assert!(m.values.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn uniform_rows_split_over_same_class() {
        let m = normalize_target(&build_raw_consistency(&[0, 0, 1, 0], IG), TargetNorm::Uniform);
        assert_eq!((0..4).map(|j| m.get(0, j)).collect::<Vec<_>>(), vec![1. / 3., 1. / 3., 0., 1. / 3.]);
        assert_eq!((0..4).map(|j| m.get(2, j)).collect::<Vec<_>>(), vec![0., 0., 1., 0.]);
    }

    #[test]
    fn fully_ignored_row_stays_masked() {
        let m = normalize_target(&build_raw_consistency(&[IG, IG], IG), TargetNorm::Softmax);
        assert!(m.valid.iter().all(|&v| !v));
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scale_one_equals_direct_build() {
        let ids: Vec<u8> = (0..16).map(|i| (i * 7 % 3) as u8).collect();
        let labels = LabelMap::new(4, 4, ids, IG).unwrap();
        assert_eq!(build_targets_for_scale(&labels, 1, TargetNorm::Softmax), build_targets(&labels, TargetNorm::Softmax));
    }
}
