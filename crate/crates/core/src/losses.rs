//! Segmentation losses recorded as custom tape operations.

use slc_tensor::{CustomBackward, Real, Tape, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::labels::LabelMap;

/// Weights of the hybrid objective: correlation L1, side-output CE and
/// final-output Lovász-softmax.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 0.05,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(CoreError::Config(format!("loss weights must be nonnegative: {self:?}")))
        }
    }
}

/// A scalar loss node plus a flag raised when there was nothing to average
/// over (the value is then 0).
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub value: Var,
    pub degenerate: bool,
}

// ------------------------------------------------------------------ weighted L1

struct WeightedAbsDiff<T: Real> {
    target: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> CustomBackward<T> for WeightedAbsDiff<T> {
    fn name(&self) -> &'static str {
        "weighted_abs_diff"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        let a = inputs[0];
        let d = a
            .data()
            .iter()
            .zip(&self.target)
            .zip(&self.weights)
            .map(|((&x, &t), &w)| {
                let diff = x - t;
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g * w * sign
            })
            .collect();
        vec![Some(Tensor::new(a.shape(), d).expect("same shape"))]
    }
}

/// `Σ wᵢ·|aᵢ − tᵢ|` with constant target and weights.
pub fn weighted_abs_diff<T: Real>(tape: &mut Tape<T>, a: Var, target: Vec<T>, weights: Vec<T>) -> Result<Var> {
    let n = tape.value(a).numel();
    if target.len() != n || weights.len() != n {
        return Err(CoreError::Contract(format!(
            "weighted L1 over {n} entries given {} targets and {} weights",
            target.len(),
            weights.len()
        )));
    }
    let total = tape
        .value(a)
        .data()
        .iter()
        .zip(&target)
        .zip(&weights)
        .map(|((&x, &t), &w)| w * (x - t).abs())
        .sum();
    Ok(tape.custom(&[a], Tensor::scalar(total), Box::new(WeightedAbsDiff { target, weights })))
}

/// Mean absolute difference over the entries where `mask` is set.
pub fn l1_mean<T: Real>(tape: &mut Tape<T>, a: Var, b: &Tensor<T>, mask: &[bool]) -> Result<LossTerm> {
    if b.shape() != tape.shape(a) || mask.len() != b.numel() {
        return Err(CoreError::Contract(format!(
            "l1_mean shapes differ: {:?} vs {:?} (mask {})",
            tape.shape(a),
            b.shape(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let w = if count == 0 { T::zero() } else { T::one() / T::lit(count as f64) };
    let weights = mask.iter().map(|&m| if m { w } else { T::zero() }).collect();
    let value = weighted_abs_diff(tape, a, b.data().to_vec(), weights)?;
    Ok(LossTerm {
        value,
        degenerate: count == 0,
    })
}

// --------------------------------------------------------------- cross-entropy

const LOG_CLAMP: f64 = 1e-12;

struct CrossEntropy<T: Real> {
    /// Per-pixel gradient of the mean loss w.r.t. the logits.
    grad: Vec<T>,
}

impl<T: Real> CustomBackward<T> for CrossEntropy<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        let d = self.grad.iter().map(|&v| v * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), d).expect("same shape"))]
    }
}

fn check_labels<T: Real>(tape: &Tape<T>, x: Var, labels: &[LabelMap], op: &str) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = tape.value(x).nchw()?;
    if labels.len() != n {
        return Err(CoreError::Contract(format!("{op}: {n} predictions but {} label maps", labels.len())));
    }
    for l in labels {
        if (l.height(), l.width()) != (h, w) {
            return Err(CoreError::Contract(format!(
                "{op}: labels {}×{} do not match predictions {h}×{w}",
                l.height(),
                l.width()
            )));
        }
        l.validate(c)?;
    }
    Ok((n, c, h, w))
}

/// Mean over non-ignored pixels of `−log softmax(logits)[label]`, with the
/// probability clamped at 1e-12.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[LabelMap]) -> Result<LossTerm> {
    let (_, c, h, w) = check_labels(tape, logits, labels, "cross_entropy")?;
    let hw = h * w;
    let x = tape.value(logits).data();
    let mut grad = vec![T::zero(); x.len()];
    let floor = LOG_CLAMP.ln();
    let mut total = 0.0;
    let mut count = 0usize;
    let mut probs = vec![0.0; c];
    for (b, labels) in labels.iter().enumerate() {
        for (p, target) in labels.targets().enumerate() {
            let Some(t) = target else { continue };
            let at = |k: usize| (b * c + k) * hw + p;
            let max = (0..c).map(|k| x[at(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (x[at(k)].as_f64() - max).exp();
                z += *pk;
            }
            let log_p = x[at(t)].as_f64() - max - z.ln();
            count += 1;
            if log_p < floor {
                // Clamped pixels contribute a constant and no gradient.
                total -= floor;
                continue;
            }
            total -= log_p;
            for (k, &pk) in probs.iter().enumerate() {
                let onehot = if k == t { 1.0 } else { 0.0 };
                grad[at(k)] = T::lit(pk / z - onehot);
            }
        }
    }
    if count == 0 {
        let value = tape.custom(&[logits], Tensor::scalar(T::zero()), Box::new(CrossEntropy { grad }));
        return Ok(LossTerm { value, degenerate: true });
    }
    let inv = T::lit(1.0 / count as f64);
    grad.iter_mut().for_each(|g| *g *= inv);
    let value = tape.custom(&[logits], Tensor::scalar(T::lit(total / count as f64)), Box::new(CrossEntropy { grad }));
    Ok(LossTerm { value, degenerate: false })
}

// ------------------------------------------------------------ Lovász-softmax

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order, given the foreground flags in that order.
pub fn lovasz_grad(fg_sorted: &[bool]) -> Vec<f64> {
    let gts = fg_sorted.iter().filter(|&&f| f).count() as f64;
    let mut grad = Vec::with_capacity(fg_sorted.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg_sorted {
        if f {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let intersection = gts - cum_fg;
        let union = gts + cum_bg;
        let jaccard = if union > 0.0 { 1.0 - intersection / union } else { 0.0 };
        grad.push(jaccard - prev);
        prev = jaccard;
    }
    grad
}

/// Lovász extension of the Jaccard loss at `errors`, with its gradient.
/// Ties are broken by original index.
pub fn lovasz_extension(errors: &[f64], fg: &[bool]) -> (f64, Vec<f64>) {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let fg_sorted: Vec<bool> = order.iter().map(|&i| fg[i]).collect();
    let g = lovasz_grad(&fg_sorted);
    let mut grad = vec![0.0; errors.len()];
    for (rank, &i) in order.iter().enumerate() {
        grad[i] = g[rank];
    }
    // Value as Σ_k (e_k − e_{k+1})·J_k over the sorted errors: equal to
    // Σ e_k·g_k, but exactly J when the errors are all 0 or 1.
    let gts = fg_sorted.iter().filter(|&&f| f).count();
    let (mut wrong_fg, mut loss) = (0, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        wrong_fg += fg_sorted[rank] as usize;
        let next = order.get(rank + 1).map_or(0.0, |&j| errors[j]);
        let drop = errors[i] - next;
        if drop != 0.0 {
            let union = gts + (rank + 1 - wrong_fg);
            loss += drop * (1.0 - (gts - wrong_fg) as f64 / union as f64);
        }
    }
    (loss, grad)
}

struct LovaszSoftmax<T: Real> {
    grad: Vec<T>,
}

impl<T: Real> CustomBackward<T> for LovaszSoftmax<T> {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad.item();
        let d = self.grad.iter().map(|&v| v * g).collect();
        vec![Some(Tensor::new(inputs[0].shape(), d).expect("same shape"))]
    }
}

/// Per-image Lovász-softmax: for every class present in an image's labels,
/// the Lovász extension of its Jaccard loss over the errors
/// `|1{y=c} − p(c)|`; averaged over present classes, then over images.
pub fn lovasz_softmax<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[LabelMap]) -> Result<LossTerm> {
    let (_, c, h, w) = check_labels(tape, probs, labels, "lovasz_softmax")?;
    let hw = h * w;
    let p = tape.value(probs).data();
    let mut grad = vec![0.0f64; p.len()];
    let mut image_losses = Vec::new();
    let mut image_grads: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for (b, labels) in labels.iter().enumerate() {
        let pixels: Vec<(usize, usize)> = labels.targets().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
        let mut present = vec![false; c];
        for &(_, t) in &pixels {
            present[t] = true;
        }
        let classes: Vec<usize> = (0..c).filter(|&k| present[k]).collect();
        if classes.is_empty() {
            continue;
        }
        let mut loss = 0.0;
        let mut local = Vec::new();
        for &k in &classes {
            let fg: Vec<bool> = pixels.iter().map(|&(_, t)| t == k).collect();
            let errors: Vec<f64> = pixels
                .iter()
                .zip(&fg)
                .map(|(&(i, _), &f)| {
                    let pk = p[(b * c + k) * hw + i].as_f64();
                    if f { 1.0 - pk } else { pk }.abs()
                })
                .collect();
            let (l, g) = lovasz_extension(&errors, &fg);
            loss += l;
            for ((&(i, _), &f), gi) in pixels.iter().zip(&fg).zip(g) {
                // d|fg − p|/dp for p in [0, 1]
                let dp = if f { -gi } else { gi };
                local.push(((b * c + k) * hw + i, dp));
            }
        }
        let inv = 1.0 / classes.len() as f64;
        image_losses.push(loss / classes.len() as f64);
        image_grads.push((b, local.into_iter().map(|(i, d)| (i, d * inv)).collect()));
    }
    if image_losses.is_empty() {
        let grad = vec![T::zero(); p.len()];
        let value = tape.custom(&[probs], Tensor::scalar(T::zero()), Box::new(LovaszSoftmax { grad }));
        return Ok(LossTerm { value, degenerate: true });
    }
    let inv = 1.0 / image_losses.len() as f64;
    for (_, local) in image_grads {
        for (i, d) in local {
            grad[i] += d * inv;
        }
    }
    let loss = image_losses.iter().sum::<f64>() / image_losses.len() as f64;
    let grad = grad.into_iter().map(T::lit).collect();
    let value = tape.custom(&[probs], Tensor::scalar(T::lit(loss)), Box::new(LovaszSoftmax { grad }));
    Ok(LossTerm { value, degenerate: false })
}

/// `α·fcsm + β·side + γ·final`.
pub fn hybrid_total<T: Real>(tape: &mut Tape<T>, fcsm: Var, side: Var, last: Var, weights: &LossWeights) -> Result<Var> {
    for v in [fcsm, side, last] {
        if tape.value(v).numel() != 1 {
            return Err(CoreError::Contract(format!("hybrid_total needs scalar terms, got {:?}", tape.shape(v))));
        }
    }
    let a = tape.scale(fcsm, T::lit(weights.alpha));
    let b = tape.scale(side, T::lit(weights.beta));
    let c = tape.scale(last, T::lit(weights.gamma));
    let ab = tape.add(a, b)?;
    Ok(tape.add(ab, c)?)
}
