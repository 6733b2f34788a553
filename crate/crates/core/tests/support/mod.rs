//! Independent reference implementations shared by the integration tests.
//! Every check returns the largest deviation it saw.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slc_core::consistency::{build_targets_for_scale, TargetNorm};
use slc_core::fcsm::{col_attention, fcsm_loss, row_attention, CorrelationScores};
use slc_core::losses::{cross_entropy, hybrid_total, lovasz_extension, lovasz_softmax, LossWeights};
use slc_core::metrics::ConfusionMatrix;
use slc_core::{LabelMap, DEFAULT_IGNORE};
use slc_tensor::{ConvSpec, Tape, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Labels in `0..n` with roughly `p_ignore` of the pixels set to the ignore id.
pub fn random_labels(h: usize, w: usize, n: usize, p_ignore: f64, rng: &mut ChaCha8Rng) -> LabelMap {
    let ids = (0..h * w)
        .map(|_| if rng.random_bool(p_ignore) { DEFAULT_IGNORE } else { rng.random_range(0..n) as u8 })
        .collect();
    LabelMap::new(h, w, ids, DEFAULT_IGNORE).unwrap()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ------------------------------------------------------------------ conv2d

pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize, d: usize) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * p - d * (k - 1) - 1) / s + 1;
    let ow = (wd + 2 * p - d * (k - 1) - 1) / s + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * s + ky * d) as isize - p as isize;
                                let ix = (xx * s + kx * d) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b_, i, iy as usize, ix as usize]) * w.at(&[o, i, ky, kx]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn conv2d_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (k, s, d) = (rng.random_range(1..=3), rng.random_range(1..=2), rng.random_range(1..=2));
        let p = rng.random_range(0..=d * (k - 1));
        let x = random_tensor(&[2, 3, rng.random_range(5..9), rng.random_range(5..9)], &mut rng);
        let w = random_tensor(&[4, 3, k, k], &mut rng);
        let b = random_tensor(&[4], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), ConvSpec::new(s, p, d)).unwrap();
        worst = worst.max(max_abs(tape.value(y).data(), &naive_conv(&x, &w, b.data(), s, p, d)));
    }
    worst
}

// --------------------------------------------------------------- attention

/// Per-line `softmax(q·kᵀ/√C)·v`, looping over rows (or columns).
pub fn naive_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, column: bool) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
    let (lines, len) = if column { (w, h) } else { (h, w) };
    let at = |t: &Tensor<f64>, b: usize, ch: usize, line: usize, i: usize| {
        if column {
            t.at(&[b, ch, i, line])
        } else {
            t.at(&[b, ch, line, i])
        }
    };
    let mut scores = vec![0.0; n * lines * len * len];
    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for l in 0..lines {
            for i in 0..len {
                let logits: Vec<f64> = (0..len)
                    .map(|j| (0..c).map(|ch| at(q, b, ch, l, i) * at(k, b, ch, l, j)).sum::<f64>() / (c as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..len {
                    scores[((b * lines + l) * len + i) * len + j] = e[j] / z;
                }
                for ch in 0..c {
                    let val: f64 = (0..len).map(|j| e[j] / z * at(v, b, ch, l, j)).sum();
                    let (y, x) = if column { (i, l) } else { (l, i) };
                    out[((b * c + ch) * h + y) * w + x] = val;
                }
            }
        }
    }
    (out, scores)
}

pub fn attention_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let column = i % 2 == 1;
        let shape = [rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..6)];
        let (q, k, v) = (random_tensor(&shape, &mut rng), random_tensor(&shape, &mut rng), random_tensor(&shape, &mut rng));
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (out, scores) = if column { col_attention(&mut tape, qv, kv, vv) } else { row_attention(&mut tape, qv, kv, vv) }.unwrap();
        let (o, s) = naive_attention(&q, &k, &v, column);
        worst = worst.max(max_abs(tape.value(out).data(), &o)).max(max_abs(tape.value(scores).data(), &s));
    }
    worst
}

// ------------------------------------------------------------- consistency

/// Pairwise targets computed from scratch: pick the top-left label of each
/// `scale` cell, compare every pair on each row and column, and normalise
/// with closed forms (`e/(k·e + m − k)` for same-class entries under
/// softmax, with `k` same-class and `m` valid entries).
pub fn consistency_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let norm = if i % 2 == 0 { TargetNorm::Softmax } else { TargetNorm::Uniform };
        let labels = random_labels(8, 8, 3, 0.15, &mut rng);
        let t = build_targets_for_scale(&labels, 2, norm);
        let small: Vec<Vec<u8>> = (0..4).map(|y| (0..4).map(|x| labels.get(2 * y, 2 * x)).collect()).collect();
        let expect_line = |line: &[u8]| -> (Vec<f64>, Vec<bool>) {
            let mut vals = Vec::new();
            let mut valid = Vec::new();
            for &a in line {
                let m = if a == DEFAULT_IGNORE { 0 } else { line.iter().filter(|&&b| b != DEFAULT_IGNORE).count() };
                let k = line.iter().filter(|&&b| b == a && a != DEFAULT_IGNORE).count();
                for &b in line {
                    let ok = a != DEFAULT_IGNORE && b != DEFAULT_IGNORE;
                    valid.push(ok);
                    let same = ok && a == b;
                    vals.push(match (ok, norm) {
                        (false, _) => 0.0,
                        (true, TargetNorm::Softmax) => {
                            let e = std::f64::consts::E;
                            (if same { e } else { 1.0 }) / (k as f64 * e + (m - k) as f64)
                        }
                        (true, TargetNorm::Uniform) => {
                            if same {
                                1.0 / k as f64
                            } else {
                                0.0
                            }
                        }
                    });
                }
            }
            (vals, valid)
        };
        let (mut rows, mut row_valid, mut cols, mut col_valid) = (vec![], vec![], vec![], vec![]);
        for y in 0..4 {
            let (v, ok) = expect_line(&small[y]);
            rows.extend(v);
            row_valid.extend(ok);
        }
        for x in 0..4 {
            let line: Vec<u8> = (0..4).map(|y| small[y][x]).collect();
            let (v, ok) = expect_line(&line);
            cols.extend(v);
            col_valid.extend(ok);
        }
        if t.row_valid != row_valid || t.col_valid != col_valid || (t.height, t.width) != (4, 4) {
            return f64::INFINITY;
        }
        worst = worst.max(max_abs(&t.rows, &rows)).max(max_abs(&t.cols, &cols));
    }
    worst
}

// ------------------------------------------------------------------ Lovász

/// Jaccard loss of mispredicting the set `wrong`, given foreground flags.
fn jaccard_set_loss(wrong: &[bool], fg: &[bool]) -> f64 {
    let n_wrong = wrong.iter().filter(|&&w| w).count();
    let union = fg.iter().zip(wrong).filter(|(&f, &w)| f || w).count();
    if union == 0 {
        0.0
    } else {
        n_wrong as f64 / union as f64
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Lovász extension of the (submodular) Jaccard set loss as the maximum,
/// over every ordering of the pixels, of the greedy linear form.
pub fn lovasz_by_enumeration(errors: &[f64], fg: &[bool]) -> f64 {
    let n = errors.len();
    permutations(n)
        .iter()
        .map(|perm| {
            let mut wrong = vec![false; n];
            let mut prev = 0.0;
            let mut total = 0.0;
            for &i in perm {
                wrong[i] = true;
                let cur = jaccard_set_loss(&wrong, fg);
                total += errors[i] * (cur - prev);
                prev = cur;
            }
            total
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Extension and Lovász-softmax against enumeration on up to 8 pixels.
pub fn lovasz_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let fg: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        worst = worst.max((lovasz_extension(&errors, &fg).0 - lovasz_by_enumeration(&errors, &fg)).abs());

        // Whole loss on a 2×4 image with 3 classes.
        let labels = random_labels(2, 4, 3, 0.0, &mut rng);
        let logits = random_tensor(&[1, 3, 2, 4], &mut rng);
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let probs = tape.softmax(lv, 1).unwrap();
        let p = tape.value(probs).clone();
        let loss = lovasz_softmax(&mut tape, probs, std::slice::from_ref(&labels)).unwrap();
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..3 {
            let fg: Vec<bool> = labels.ids().iter().map(|&y| y as usize == c).collect();
            if !fg.iter().any(|&f| f) {
                continue;
            }
            present += 1;
            let e: Vec<f64> = (0..8).map(|i| (if fg[i] { 1.0 } else { 0.0 } - p.data()[c * 8 + i]).abs()).collect();
            sum += lovasz_by_enumeration(&e, &fg);
        }
        worst = worst.max((tape.value(loss.value).item() - sum / present as f64).abs());
    }
    worst
}

/// One-hot probabilities of random predictions: Lovász-softmax must equal
/// the mean over present classes of 1 − IoU. Returns the largest
/// difference, which should be exactly 0.
pub fn lovasz_hard_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (h, w, c) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(2..5));
        let gt = random_labels(h, w, c, 0.0, &mut rng);
        let pred = random_labels(h, w, c, 0.0, &mut rng);
        let mut onehot = vec![0.0; c * h * w];
        for (i, &p) in pred.ids().iter().enumerate() {
            onehot[p as usize * h * w + i] = 1.0;
        }
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::new(&[1, c, h, w], onehot).unwrap());
        let loss = lovasz_softmax(&mut tape, probs, std::slice::from_ref(&gt)).unwrap().value;
        let loss = tape.value(loss).item();
        let (mut sum, mut present) = (0.0, 0);
        for k in 0..c as u8 {
            let gt_k = gt.ids().iter().filter(|&&g| g == k).count();
            if gt_k == 0 {
                continue;
            }
            let tp = gt.ids().iter().zip(pred.ids()).filter(|(&g, &p)| g == k && p == k).count();
            let pred_k = pred.ids().iter().filter(|&&p| p == k).count();
            sum += 1.0 - tp as f64 / (gt_k + pred_k - tp) as f64;
            present += 1;
        }
        worst = worst.max((loss - sum / present as f64).abs());
    }
    worst
}

// ----------------------------------------------------------- cross-entropy

pub fn cross_entropy_error(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (n, c, h, w) = (2, 4, 3, 3);
        let labels: Vec<LabelMap> = (0..n).map(|_| random_labels(h, w, c, 0.2, &mut rng)).collect();
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let loss = cross_entropy(&mut tape, xv, &labels).unwrap().value;
        let loss = tape.value(loss).item();
        let (mut sum, mut count) = (0.0, 0);
        for (b, l) in labels.iter().enumerate() {
            for y in 0..h {
                for xx in 0..w {
                    let t = l.get(y, xx);
                    if t == DEFAULT_IGNORE {
                        continue;
                    }
                    let z: f64 = (0..c).map(|k| x.at(&[b, k, y, xx]).exp()).sum();
                    sum -= (x.at(&[b, t as usize, y, xx]).exp() / z).ln();
                    count += 1;
                }
            }
        }
        if count > 0 {
            worst = worst.max((loss - sum / count as f64).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------- metrics

/// Per-class IoU/precision/recall/F1 from pixel lists, against the
/// confusion-matrix path. Also returns the largest violation of
/// F1 = 2·IoU/(1+IoU) seen on any evaluated matrix.
pub fn metrics_error(instances: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut identity) = (0.0f64, 0.0f64);
    for _ in 0..instances {
        let c = rng.random_range(2..6);
        let gt = random_labels(6, 7, c, 0.1, &mut rng);
        // Predictions that agree with the ground truth most of the time.
        let pred_ids = gt
            .ids()
            .iter()
            .map(|&g| if g != DEFAULT_IGNORE && rng.random_bool(0.7) { g } else { rng.random_range(0..c) as u8 })
            .collect();
        let pred = LabelMap::new(6, 7, pred_ids, DEFAULT_IGNORE).unwrap();
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &gt).unwrap();
        let scores = cm.scores();
        let pairs: Vec<(u8, u8)> = gt.ids().iter().zip(pred.ids()).filter(|(&g, _)| g != DEFAULT_IGNORE).map(|(&g, &p)| (g, p)).collect();
        let (mut miou, mut mf1) = (0.0, 0.0);
        for k in 0..c as u8 {
            let tp = pairs.iter().filter(|&&(g, p)| g == k && p == k).count() as f64;
            let fp = pairs.iter().filter(|&&(g, p)| g != k && p == k).count() as f64;
            let fn_ = pairs.iter().filter(|&&(g, p)| g == k && p != k).count() as f64;
            let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
            let (iou, prec, rec) = (div(tp, tp + fp + fn_), div(tp, tp + fp), div(tp, tp + fn_));
            let f1 = div(2.0 * tp, 2.0 * tp + fp + fn_);
            let s = scores.per_class[k as usize].unwrap();
            worst = worst
                .max((s.iou - iou).abs())
                .max((s.precision - prec).abs())
                .max((s.recall - rec).abs())
                .max((s.f1 - f1).abs());
            identity = identity.max((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs());
            miou += iou;
            mf1 += f1;
        }
        worst = worst.max((scores.miou - miou / c as f64).abs()).max((scores.ave_f1 - mf1 / c as f64).abs());
    }
    (worst, identity)
}

// ------------------------------------------------------------- identities

/// Correlation loss on the 2×2 example (identity scores against uniform
/// ½ targets) and its hand value: every entry is off by ½, so each of the
/// two row terms and two column terms is ½, giving ½ + ½ = 1.
pub fn worked_example() -> (f64, f64) {
    let mut tape = Tape::<f64>::new();
    let eye = [1.0, 0.0, 0.0, 1.0];
    let rows = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[eye, eye].concat()).unwrap());
    let cols = tape.constant(Tensor::from_f64(&[1, 2, 2, 2], &[eye, eye].concat()).unwrap());
    // A single class under uniform normalisation: every target row is [½, ½].
    let labels = LabelMap::filled(2, 2, 0);
    let target = slc_core::consistency::build_targets(&labels, TargetNorm::Uniform);
    let loss = fcsm_loss(&mut tape, &CorrelationScores { rows, cols }, &[target]).unwrap();
    (tape.value(loss.value).item(), 1.0)
}

/// Weighted total on (0.1, 2, 0.5) with the default weights and its hand
/// value 10·0.1 + 0.05·2 + 1·0.5 = 1.6.
pub fn weighted_total() -> (f64, f64) {
    let mut tape = Tape::<f64>::new();
    let [a, b, c] = [0.1, 2.0, 0.5].map(|v| tape.constant(Tensor::scalar(v)));
    let total = hybrid_total(&mut tape, a, b, c, &LossWeights::default()).unwrap();
    (tape.value(total).item(), 1.6)
}
