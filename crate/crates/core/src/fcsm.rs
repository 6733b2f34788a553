//! Row/column decomposed self-attention whose scores can be supervised by
//! category-consistency targets.

use rand::Rng;
use slc_tensor::nn::child;
use slc_tensor::{Conv2d, ConvSpec, Mode, Module, ParamVisitor, Real, Tape, Var};

use crate::blocks::ConvBlock;
use crate::consistency::CorrelationTarget;
use crate::error::{CoreError, Result};
use crate::losses::{weighted_abs_diff, LossTerm};

/// Which 1-D stage runs first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AxisOrder {
    #[default]
    RowFirst,
    ColumnFirst,
}

impl std::str::FromStr for AxisOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "row_first" | "row" => Ok(AxisOrder::RowFirst),
            "column_first" | "col" | "column" => Ok(AxisOrder::ColumnFirst),
            other => Err(format!("unknown attention order `{other}`")),
        }
    }
}

impl std::fmt::Display for AxisOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AxisOrder::RowFirst => "row_first",
            AxisOrder::ColumnFirst => "column_first",
        })
    }
}

/// Post-softmax attention scores. `rows` is `(N, H, W, W)`: for image `n`
/// and row `r`, a `W×W` row-stochastic matrix. `cols` is `(N, W, H, H)`.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationScores {
    pub rows: Var,
    pub cols: Var,
}

/// Entries stored for one image's scores versus full 2-D attention.
pub fn score_entries(height: usize, width: usize) -> (usize, usize) {
    (height * width * width + width * height * height, (height * width).pow(2))
}

/// Three 1×1 projections.
#[derive(Clone, Debug)]
pub struct Qkv<T: Real> {
    pub q: Conv2d<T>,
    pub k: Conv2d<T>,
    pub v: Conv2d<T>,
}

impl<T: Real> Qkv<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let mut proj = || Conv2d::new(channels, channels, 1, ConvSpec::default(), true, rng);
        Qkv {
            q: proj(),
            k: proj(),
            v: proj(),
        }
    }

    pub fn project(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Var, Var)> {
        Ok((self.q.forward(tape, x)?, self.k.forward(tape, x)?, self.v.forward(tape, x)?))
    }
}

impl<T: Real> Module<T> for Qkv<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.q.visit(&child(prefix, "q"), v);
        self.k.visit(&child(prefix, "k"), v);
        self.v.visit(&child(prefix, "v"), v);
    }
}

/// Attention along one spatial axis. `perm` moves NCHW to
/// `(N, lines, len, C)`.
fn line_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, perm: &[usize; 4]) -> Result<(Var, Var)> {
    let (n, c, h, w) = tape.value(q).nchw()?;
    for x in [k, v] {
        if tape.shape(x) != tape.shape(q) {
            return Err(CoreError::Contract(format!(
                "attention inputs differ in shape: {:?} vs {:?}",
                tape.shape(q),
                tape.shape(x)
            )));
        }
    }
    let (lines, len) = if perm == &ROW_PERM { (h, w) } else { (w, h) };
    let mut flat = |x: Var| -> Result<Var> {
        let p = tape.permute(x, perm)?;
        Ok(tape.reshape(p, &[n * lines, len, c])?)
    };
    let (qf, kf, vf) = (flat(q)?, flat(k)?, flat(v)?);
    let logits = tape.bmm(qf, kf, true)?;
    let logits = tape.scale(logits, T::lit(1.0 / (c as f64).sqrt()));
    let scores = tape.softmax(logits, 2)?;
    let out = tape.bmm(scores, vf, false)?;
    let out = tape.reshape(out, &[n, lines, len, c])?;
    let inverse = if perm == &ROW_PERM { [0, 3, 1, 2] } else { COL_PERM };
    let out = tape.permute(out, &inverse)?;
    let scores = tape.reshape(scores, &[n, lines, len, len])?;
    Ok((out, scores))
}

const ROW_PERM: [usize; 4] = [0, 2, 3, 1];
const COL_PERM: [usize; 4] = [0, 3, 2, 1];

/// For every row: `softmax(Q·Kᵀ/√C)·V`. Returns the recalibrated map and
/// scores of shape `(N, H, W, W)`.
pub fn row_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    line_attention(tape, q, k, v, &ROW_PERM)
}

/// Column counterpart of [`row_attention`]; scores are `(N, W, H, H)`.
pub fn col_attention<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    line_attention(tape, q, k, v, &COL_PERM)
}

#[derive(Clone, Debug)]
pub struct FcsmBlock<T: Real> {
    pub row: Qkv<T>,
    pub col: Qkv<T>,
    pub fuse: ConvBlock<T>,
    /// Whether the scores are trained against consistency targets. The
    /// forward pass is the same either way.
    pub supervised: bool,
    pub order: AxisOrder,
}

/// Output map and scores of one FCSM forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FcsmOutput {
    pub out: Var,
    pub scores: CorrelationScores,
}

impl<T: Real> FcsmBlock<T> {
    pub fn new(channels: usize, supervised: bool, order: AxisOrder, rng: &mut impl Rng) -> Self {
        FcsmBlock {
            row: Qkv::new(channels, rng),
            col: Qkv::new(channels, rng),
            fuse: ConvBlock::conv3(channels, channels, rng),
            supervised,
            order,
        }
    }

    pub fn channels(&self) -> usize {
        self.fuse.out_channels()
    }

    /// Both attention stages without the fusing convolution: returns the
    /// second stage's output and the scores.
    pub fn attend(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, CorrelationScores)> {
        let (_, c, _, _) = tape.value(x).nchw()?;
        if c != self.channels() {
            return Err(CoreError::Contract(format!("FCSM built for {} channels got {c}", self.channels())));
        }
        let (q, k, v) = self.first_qkv().project(tape, x)?;
        let (mid, first) = self.first_stage(tape, q, k, v)?;
        let (q, k, v) = self.second_qkv().project(tape, mid)?;
        let (out, second) = self.second_stage(tape, q, k, v)?;
        let scores = match self.order {
            AxisOrder::RowFirst => CorrelationScores { rows: first, cols: second },
            AxisOrder::ColumnFirst => CorrelationScores { rows: second, cols: first },
        };
        Ok((out, scores))
    }

    /// `fuse(x + attend(x))`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<FcsmOutput> {
        let (attended, scores) = self.attend(tape, x)?;
        let sum = tape.add(x, attended)?;
        let out = self.fuse.forward(tape, sum, mode)?;
        Ok(FcsmOutput { out, scores })
    }

    fn first_qkv(&self) -> &Qkv<T> {
        match self.order {
            AxisOrder::RowFirst => &self.row,
            AxisOrder::ColumnFirst => &self.col,
        }
    }

    fn second_qkv(&self) -> &Qkv<T> {
        match self.order {
            AxisOrder::RowFirst => &self.col,
            AxisOrder::ColumnFirst => &self.row,
        }
    }

    fn first_stage(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        match self.order {
            AxisOrder::RowFirst => row_attention(tape, q, k, v),
            AxisOrder::ColumnFirst => col_attention(tape, q, k, v),
        }
    }

    fn second_stage(&self, tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        match self.order {
            AxisOrder::RowFirst => col_attention(tape, q, k, v),
            AxisOrder::ColumnFirst => row_attention(tape, q, k, v),
        }
    }
}

impl<T: Real> Module<T> for FcsmBlock<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        self.row.visit(&child(prefix, "row"), v);
        self.col.visit(&child(prefix, "col"), v);
        self.fuse.visit(&child(prefix, "fuse"), v);
    }
}

/// Per-entry weights that turn a weighted L1 sum into "mean over valid
/// entries of each line, then mean over lines with any valid entry".
/// Returns the number of contributing lines.
fn line_weights(valid: &[bool], line_len: usize, scale: f64, out: &mut Vec<f64>) -> usize {
    let lines: Vec<usize> = valid.chunks(line_len).map(|l| l.iter().filter(|&&v| v).count()).collect();
    let active = lines.iter().filter(|&&c| c > 0).count();
    for (chunk, &count) in valid.chunks(line_len).zip(&lines) {
        for &ok in chunk {
            out.push(if ok && active > 0 { scale / (count as f64 * active as f64) } else { 0.0 });
        }
    }
    active
}

/// Correlation loss for a batch: per image, the mean over rows of the mean
/// absolute score/target difference of each row matrix plus the same over
/// columns, then averaged over images. Masked entries and fully masked
/// rows or columns are left out of every denominator.
pub fn fcsm_loss<T: Real>(tape: &mut Tape<T>, scores: &CorrelationScores, targets: &[CorrelationTarget]) -> Result<LossTerm> {
    let (n, h, w, w2) = tape.value(scores.rows).nchw()?;
    let col_shape = tape.value(scores.cols).nchw()?;
    if w != w2 || col_shape != (n, w, h, h) || targets.len() != n {
        return Err(CoreError::Contract(format!(
            "score shapes {:?}/{:?} do not fit {} targets",
            tape.shape(scores.rows),
            tape.shape(scores.cols),
            targets.len()
        )));
    }
    let per_image = 1.0 / n as f64;
    let (mut row_t, mut row_w, mut col_t, mut col_w) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut active = 0;
    for t in targets {
        if (t.height, t.width) != (h, w) {
            return Err(CoreError::Contract(format!(
                "target {}×{} does not match scores {h}×{w}",
                t.height, t.width
            )));
        }
        row_t.extend(&t.rows);
        col_t.extend(&t.cols);
        active += line_weights(&t.row_valid, w * w, per_image, &mut row_w);
        active += line_weights(&t.col_valid, h * h, per_image, &mut col_w);
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
    let rows = weighted_abs_diff(tape, scores.rows, cast(row_t), cast(row_w))?;
    let cols = weighted_abs_diff(tape, scores.cols, cast(col_t), cast(col_w))?;
    Ok(LossTerm {
        value: tape.add(rows, cols)?,
        degenerate: active == 0,
    })
}
