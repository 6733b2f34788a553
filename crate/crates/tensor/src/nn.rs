//! Trainable parameters and the basic layers built from tape operations.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T: Real> {
    id: ParamId,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            id: ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Kaiming (He) normal initialisation: `N(0, 2 / fan_in)`. Values are
    /// drawn in single precision so both element widths start identical.
    pub fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt() as f32;
        let data = (0..shape.iter().product::<usize>())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                T::lit((z * std) as f64)
            })
            .collect();
        Param::new(Tensor::new(shape, data).expect("shape and data agree"))
    }
}

/// Whether layers use batch statistics (and update running statistics).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Receives every parameter and persistent buffer of a module tree.
pub trait ParamVisitor<T: Real> {
    fn param(&mut self, name: &str, param: &mut Param<T>);
    fn buffer(&mut self, _name: &str, _value: &mut Tensor<T>) {}
}

/// Anything that owns parameters.
pub trait Module<T: Real> {
    /// Visit parameters and buffers in a fixed order, naming them under `prefix`.
    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>);

    fn zero_grad(&mut self) {
        struct Zero;
        impl<T: Real> ParamVisitor<T> for Zero {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                p.zero_grad();
            }
        }
        self.visit("", &mut Zero);
    }

    fn num_params(&mut self) -> usize {
        struct Count(usize);
        impl<T: Real> ParamVisitor<T> for Count {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                self.0 += p.value.numel();
            }
        }
        let mut c = Count(0);
        self.visit("", &mut c);
        c.0
    }

    /// Add the gradients recorded on `tape` into each bound parameter.
    fn collect_grads(&mut self, tape: &Tape<T>) {
        struct Collect<'a, T: Real>(&'a Tape<T>);
        impl<T: Real> ParamVisitor<T> for Collect<'_, T> {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                if let Some(g) = self.0.param_grad(p) {
                    let g = g.clone();
                    p.grad.add_assign(&g);
                }
            }
        }
        self.visit("", &mut Collect(tape));
    }
}

/// Join a module path.
pub fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub spec: ConvSpec,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            spec,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv2d(x, w, b, self.spec)
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.param(&child(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&child(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Real> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        // Each output pixel receives in_channels·(kernel/stride)² taps.
        let fan_in = (in_channels * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            weight: Param::kaiming(&[in_channels, out_channels, kernel, kernel], fan_in, rng),
            bias: Some(Param::new(Tensor::zeros(&[out_channels]))),
            stride,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        tape.conv_transpose2d(x, w, b, self.stride)
    }
}

impl<T: Real> Module<T> for ConvTranspose2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.param(&child(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&child(prefix, "bias"), b);
        }
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// 2-D batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Real> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Number of training batches folded into the running statistics.
    pub tracked: Tensor<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::ones(&[channels])),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            tracked: Tensor::zeros(&[1]),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let eps = T::lit(BN_EPS);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
                let (n, _, h, w) = tape.value(x).nchw()?;
                let count = (n * h * w) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = T::lit(BN_MOMENTUM);
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * *b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * *b * T::lit(unbias);
                }
                self.tracked.data_mut()[0] += T::one();
                Ok(y)
            }
            Mode::Eval => {
                if self.tracked.item() <= T::zero() {
                    return Err(TensorError::State(
                        "batch norm evaluated before any running statistics were accumulated".into(),
                    ));
                }
                tape.batch_norm_eval(x, gamma, beta, self.running_mean.data(), self.running_var.data(), eps)
            }
        }
    }
}

impl<T: Real> Module<T> for BatchNorm2d<T> {
    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor<T>) {
        v.param(&child(prefix, "weight"), &mut self.gamma);
        v.param(&child(prefix, "bias"), &mut self.beta);
        v.buffer(&child(prefix, "running_mean"), &mut self.running_mean);
        v.buffer(&child(prefix, "running_var"), &mut self.running_var);
        v.buffer(&child(prefix, "num_batches_tracked"), &mut self.tracked);
    }
}
