//! Finite-difference checks over every differentiable operation used by the
//! network, on random 64-bit instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slc_tensor::gradcheck::check;
use slc_tensor::{ConvSpec, Tape, Tensor, Var};

use crate::consistency::{build_targets, TargetNorm};
use crate::error::Result;
use crate::fcsm::{col_attention, fcsm_loss, row_attention, CorrelationScores};
use crate::labels::{LabelMap, DEFAULT_IGNORE};
use crate::losses::{cross_entropy, lovasz_softmax};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const LOVASZ_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest relative error over all instances and inputs.
    pub worst: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in [−1, 1] at least `gap` apart, so kinks and argmax choices are
/// not crossed by a finite-difference step.
fn spread(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * 2.0 / n as f64).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    let jitter = (2.0 / n as f64 - gap).max(0.0) / 2.0;
    let v = v.into_iter().map(|x| x + rng.random_range(-jitter..=jitter)).collect();
    Tensor::new(shape, v).expect("shape matches")
}

fn random_labels(h: usize, w: usize, n: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..n) as u8).collect(), DEFAULT_IGNORE).expect("size")
}

/// `Σ r ⊙ y` for a fixed random `r`.
fn project(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> slc_tensor::Result<Var> {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv)?;
    Ok(tape.sum(p))
}

type Build<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> slc_tensor::Result<Var> + 'a>;

struct Instance<'a> {
    inputs: Vec<Tensor<f64>>,
    build: Build<'a>,
}

fn worst(inst: &Instance) -> Result<f64> {
    let report = check(&inst.inputs, &vec![true; inst.inputs.len()], STEP, &inst.build)?;
    Ok(report.iter().map(|r| r.rel_error).fold(0.0, f64::max))
}

fn run_op<'a>(
    name: &'static str,
    instances: usize,
    tolerance: f64,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> Instance<'a>,
) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = 0.0f64;
    for _ in 0..instances {
        w = w.max(worst(&make(&mut rng))?);
    }
    Ok(OpReport {
        name,
        instances,
        worst: w,
        tolerance,
    })
}

/// Projected output of a function of the inputs, with the projection drawn
/// once per instance after the output shape is known.
fn projected<'a>(
    inputs: Vec<Tensor<f64>>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> slc_tensor::Result<Var> + Clone + 'a,
) -> Instance<'a> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = f(&mut tape, &vars).expect("probe forward");
    let shape = tape.shape(y).to_vec();
    let r = uniform(&shape, -1.0, 1.0, rng);
    Instance {
        inputs,
        build: Box::new(move |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, &r)
        }),
    }
}

/// Every check, `instances` random cases each.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    let mut op = |name: &'static str, tol: f64, make: &dyn Fn(&mut ChaCha8Rng) -> Instance<'static>| -> Result<()> {
        let s = seed.wrapping_add(reports.len() as u64 * 7919);
        reports.push(run_op(name, instances, tol, s, make)?);
        Ok(())
    };

    op("conv2d", TOLERANCE, &|rng| {
        let (s, d) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let inputs = vec![uniform(&[2, 2, 6, 5], -1.0, 1.0, rng), uniform(&[3, 2, 3, 3], -1.0, 1.0, rng), uniform(&[3], -1.0, 1.0, rng)];
        projected(inputs, rng, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(s, d, d)))
    })?;
    op("conv_transpose2d", TOLERANCE, &|rng| {
        let k = rng.random_range(2..=3);
        let inputs = vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, rng), uniform(&[2, 3, k, k], -1.0, 1.0, rng), uniform(&[3], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2))
    })?;
    op("matmul", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[3, 4], -1.0, 1.0, rng), uniform(&[4, 5], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.matmul(v[0], v[1]))
    })?;
    op("softmax", TOLERANCE, &|rng| {
        let axis = rng.random_range(0..3);
        let inputs = vec![uniform(&[2, 3, 4], -2.0, 2.0, rng)];
        projected(inputs, rng, move |t, v| t.softmax(v[0], axis))
    })?;
    op("sigmoid", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[2, 3, 3], -3.0, 3.0, rng)];
        projected(inputs, rng, |t, v| Ok(t.sigmoid(v[0])))
    })?;
    op("relu", TOLERANCE, &|rng| {
        let inputs = vec![spread(&[2, 3, 3], 1e-3, rng)];
        projected(inputs, rng, |t, v| Ok(t.relu(v[0])))
    })?;
    op("broadcast_mul", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[2, 3, 3, 2], -1.0, 1.0, rng), uniform(&[2, 3, 1, 1], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.mul(v[0], v[1]))
    })?;
    op("batchnorm", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[2, 3, 3, 3], -1.0, 1.0, rng), uniform(&[3], 0.5, 1.5, rng), uniform(&[3], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
    })?;
    op("avg_pool", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[1, 2, 5, 6], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.avg_pool(v[0], 2))
    })?;
    op("max_pool", TOLERANCE, &|rng| {
        let inputs = vec![spread(&[1, 2, 6, 6], 1e-3, rng)];
        projected(inputs, rng, |t, v| t.max_pool(v[0], 3, 2, 1))
    })?;
    op("global_avg_pool", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[2, 3, 4, 3], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.global_avg_pool(v[0]))
    })?;
    op("nearest_upsample", TOLERANCE, &|rng| {
        let inputs = vec![uniform(&[1, 2, 3, 2], -1.0, 1.0, rng)];
        projected(inputs, rng, |t, v| t.nearest_upsample(v[0], 2))
    })?;
    op("row_attention", TOLERANCE, &|rng| {
        let shape = [1, 3, 2, 4];
        let inputs = (0..3).map(|_| uniform(&shape, -1.0, 1.0, rng)).collect();
        attention_instance(inputs, rng, false)
    })?;
    op("col_attention", TOLERANCE, &|rng| {
        let shape = [1, 3, 4, 2];
        let inputs = (0..3).map(|_| uniform(&shape, -1.0, 1.0, rng)).collect();
        attention_instance(inputs, rng, true)
    })?;
    op("cross_entropy", TOLERANCE, &|rng| {
        let labels = vec![random_labels(3, 3, 3, rng), random_labels(3, 3, 3, rng)];
        Instance {
            inputs: vec![uniform(&[2, 3, 3, 3], -1.0, 1.0, rng)],
            build: Box::new(move |t, v| Ok(cross_entropy(t, v[0], &labels).map_err(to_tensor_error)?.value)),
        }
    })?;
    op("lovasz_softmax", LOVASZ_TOLERANCE, &|rng| {
        let labels = vec![random_labels(2, 3, 2, rng)];
        let probs = loop {
            let p = uniform(&[1, 2, 2, 3], 0.05, 0.95, rng);
            if errors_well_separated(&p, &labels[0], 1e-3) {
                break p;
            }
        };
        Instance {
            inputs: vec![probs],
            build: Box::new(move |t, v| Ok(lovasz_softmax(t, v[0], &labels).map_err(to_tensor_error)?.value)),
        }
    })?;
    op("fcsm_loss_path", TOLERANCE, &|rng| {
        let (c, h, w) = (2, 3, 4);
        let labels = random_labels(h, w, 2, rng);
        let target = build_targets(&labels, TargetNorm::Softmax);
        let mut inputs = vec![uniform(&[1, c, h, w], -1.0, 1.0, rng)];
        inputs.extend((0..6).map(|_| uniform(&[c, c, 1, 1], -1.0, 1.0, rng)));
        Instance {
            inputs,
            build: Box::new(move |t, v| {
                let proj = |t: &mut Tape<f64>, x: Var, w: Var| t.conv2d(x, w, None, ConvSpec::default());
                let (q, k, val) = (proj(t, v[0], v[1])?, proj(t, v[0], v[2])?, proj(t, v[0], v[3])?);
                let (mid, rows) = row_attention(t, q, k, val).map_err(to_tensor_error)?;
                let (q, k, val) = (proj(t, mid, v[4])?, proj(t, mid, v[5])?, proj(t, mid, v[6])?);
                let (_, cols) = col_attention(t, q, k, val).map_err(to_tensor_error)?;
                let loss = fcsm_loss(t, &CorrelationScores { rows, cols }, std::slice::from_ref(&target)).map_err(to_tensor_error)?;
                Ok(loss.value)
            }),
        }
    })?;
    Ok(reports)
}

fn attention_instance(inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, column: bool) -> Instance<'static> {
    let mut tape = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let attend = if column { col_attention::<f64> } else { row_attention::<f64> };
    let (out, scores) = attend(&mut tape, v[0], v[1], v[2]).expect("probe");
    let r_out = uniform(tape.shape(out), -1.0, 1.0, rng);
    let r_scores = uniform(tape.shape(scores), -1.0, 1.0, rng);
    Instance {
        inputs,
        build: Box::new(move |t, v| {
            let (out, scores) = attend(t, v[0], v[1], v[2]).map_err(to_tensor_error)?;
            let a = project(t, out, &r_out)?;
            let b = project(t, scores, &r_scores)?;
            t.add(a, b)
        }),
    }
}

fn errors_well_separated(probs: &Tensor<f64>, labels: &LabelMap, gap: f64) -> bool {
    let (_, c, h, w) = probs.nchw().expect("nchw");
    (0..c).all(|k| {
        let mut e: Vec<f64> = labels
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let p = probs.data()[k * h * w + i];
                if y as usize == k {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        e.sort_by(f64::total_cmp);
        e.windows(2).all(|p| p[1] - p[0] > gap)
    })
}

fn to_tensor_error(e: crate::error::CoreError) -> slc_tensor::TensorError {
    match e {
        crate::error::CoreError::Tensor(t) => t,
        other => slc_tensor::TensorError::Contract(other.to_string()),
    }
}
