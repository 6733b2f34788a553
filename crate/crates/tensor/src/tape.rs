//! Reverse-mode autodiff tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::nn::{Param, ParamId};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvSpec::new(1, dilation * (kernel - 1) / 2, dilation)
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec::new(1, 0, 1)
    }
}

/// Backward rule for an operation defined outside this crate.
///
/// Receives the input values, the output value and the upstream gradient and
/// returns one gradient per input (`None` for inputs it does not differentiate).
pub trait CustomBackward<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Matmul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    NearestUpsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        factor: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    CenterCrop {
        x: Var,
        top: usize,
        left: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves, indexed like `nodes`.
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(op: &'static str, msg: String) -> Result<V> {
    Err(TensorError::shape(op, msg))
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf holding `value`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a trainable parameter. Binding the same parameter twice returns
    /// the same node so its gradient is accumulated in one place.
    pub fn param(&mut self, param: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&param.id()) {
            return v;
        }
        let v = self.leaf(param.value.clone(), true);
        self.params.insert(param.id(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grad(&self, param: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&param.id()).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, param: &Param<T>) -> Option<Var> {
        self.params.get(&param.id()).copied()
    }

    // ---------------------------------------------------------------- pointwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Vec<usize>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(out_shape) = kernels::broadcast_shape(&sa, &sb) else {
            return shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}"));
        };
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        kernels::for_each_broadcast(&sa, &sb, &out_shape, |o, i, j| out[o] = f(xa[i], xb[j]));
        Ok((Tensor::new(&out_shape, out)?, out_shape))
    }

    /// Elementwise sum with broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product with broadcasting, e.g. `(N,C,H,W) ⊙ (N,C,1,1)`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let out = self.value(x).map(|v| v + offset);
        self.push(out, Op::AddScalar(x), &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    // ------------------------------------------------------------------ linear

    /// `(m×k) · (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return shape_err("matmul", format!("expected two matrices, got {sa:?} and {sb:?}"));
        };
        if k != k2 {
            return shape_err("matmul", format!("inner dimensions differ: {sa:?} × {sb:?}"));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Batched product `(B,m,k) · (B,k,n)`, or `(B,m,k) · (B,n,k)ᵀ` when
    /// `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[batch, m, k], &[batch2, r, c]) = (sa.as_slice(), sb.as_slice()) else {
            return shape_err("bmm", format!("expected rank-3 operands, got {sa:?} and {sb:?}"));
        };
        let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
        if batch != batch2 || k != k2 {
            return shape_err("bmm", format!("incompatible operands {sa:?} and {sb:?} (transpose_b={transpose_b})"));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::matmul_into(
                m,
                k,
                n,
                &xa[i * m * k..(i + 1) * m * k],
                false,
                &xb[i * k * n..(i + 1) * k * n],
                transpose_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let out = Tensor::new(&[batch, m, n], out)?;
        Ok(self.push(out, Op::Bmm { a, b, transpose_b }, &[a, b]))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut out = vec![T::zero(); numel(&shape)];
        kernels::softmax_forward(self.value(x).data(), outer, len, inner, &mut out);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    // ------------------------------------------------------------------ layout

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorder axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} is not a permutation of rank {}", shape.len()));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![T::zero(); numel(&shape)];
        kernels::permute(self.value(x).data(), &shape, perm, &mut out);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return shape_err("concat", "no inputs".into());
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis { axis, rank: base.len() });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agree = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return shape_err("concat", format!("{s:?} does not match {base:?} off axis {axis}"));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = kernels::axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Crop an NCHW tensor to `height×width` around its center.
    pub fn center_crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if height > h || width > w {
            return shape_err("center_crop", format!("cannot crop {h}×{w} to {height}×{width}"));
        }
        let (top, left) = ((h - height) / 2, (w - width) / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * height * width);
        for p in 0..n * c {
            for y in 0..height {
                let row = (p * h + top + y) * w + left;
                out.extend_from_slice(&src[row..row + width]);
            }
        }
        let out = Tensor::new(&[n, c, height, width], out)?;
        Ok(self.push(out, Op::CenterCrop { x, top, left }, &[x]))
    }

    // ------------------------------------------------------------ convolution

    /// 2-D convolution of `x (N,C,H,W)` with `w (O,C,K,K)` and optional bias `(O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let (o, ci, k, k2) = self.value(w).nchw()?;
        if c != ci || k != k2 {
            return shape_err("conv2d", format!("input {:?} does not match kernel {:?}", self.shape(x), self.shape(w)));
        }
        if spec.dilation == 0 || spec.stride == 0 {
            return shape_err("conv2d", "stride and dilation must be at least 1".into());
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv2d", format!("bias {:?} does not match {o} output channels", self.shape(b)));
            }
        }
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_size(h, k, spec.stride, spec.padding, spec.dilation),
            ConvGeom::out_size(wd, k, spec.stride, spec.padding, spec.dilation),
        ) else {
            return shape_err("conv2d", format!("{h}×{wd} input admits no output for kernel {k} {spec:?}"));
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            out_height: ho,
            out_width: wo,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); n * o * cols_n];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols_n] };
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            let image = &xs[i * c * h * wd..(i + 1) * c * h * wd];
            let unfolded: &[T] = if geom.is_pointwise() {
                image
            } else {
                kernels::im2col(image, &geom, &mut cols);
                &cols
            };
            kernels::matmul_into(o, rows, cols_n, ws, false, unfolded, false, &mut out[i * o * cols_n..(i + 1) * o * cols_n], false);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (p, plane) in out.chunks_mut(cols_n).enumerate() {
                let v = bias[p % o];
                plane.iter_mut().for_each(|e| *e += v);
            }
        }
        let out = Tensor::new(&[n, o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution (no padding) of `x (N,Cin,H,W)` with
    /// `w (Cin,Cout,K,K)`; output size `(H-1)·stride + K`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).nchw()?;
        let (ci, o, k, k2) = self.value(w).nchw()?;
        if c != ci || k != k2 {
            return shape_err("conv_transpose2d", format!("input {:?} does not match kernel {:?}", self.shape(x), self.shape(w)));
        }
        if stride == 0 {
            return shape_err("conv_transpose2d", "stride must be at least 1".into());
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("conv_transpose2d", format!("bias {:?} does not match {o} output channels", self.shape(b)));
            }
        }
        let (ho, wo) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        // Geometry of the adjoint convolution: output image -> input grid.
        let geom = ConvGeom {
            channels: o,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding: 0,
            dilation: 1,
            out_height: h,
            out_width: wd,
        };
        let (rows, hw) = (geom.col_rows(), h * wd);
        let mut out = vec![T::zero(); n * o * ho * wo];
        let mut cols = vec![T::zero(); rows * hw];
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        for i in 0..n {
            // cols (O·K·K, H·W) = Wᵀ · x_i
            kernels::matmul_into(rows, c, hw, ws, true, &xs[i * c * hw..(i + 1) * c * hw], false, &mut cols, false);
            kernels::col2im(&cols, &geom, &mut out[i * o * ho * wo..(i + 1) * o * ho * wo]);
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (p, plane) in out.chunks_mut(ho * wo).enumerate() {
                let v = bias[p % o];
                plane.iter_mut().for_each(|e| *e += v);
            }
        }
        let out = Tensor::new(&[n, o, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, geom }, &inputs))
    }

    // ----------------------------------------------------------- normalization

    /// Batch normalization with batch statistics. Returns the output together
    /// with the per-channel batch mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, h, w) = self.value(x).nchw()?;
        self.check_affine(gamma, beta, c)?;
        let hw = h * w;
        let count = T::lit((n * hw) as f64);
        let xs = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut total = T::zero();
            for i in 0..n {
                total += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mu = total / count;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &xs[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = sq / count;
        }
        let v = self.normalize(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (_, c, _, _) = self.value(x).nchw()?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return shape_err("batch_norm", format!("statistics for {} channels, input has {c}", mean.len()));
        }
        self.normalize(x, gamma, beta, mean, var, eps, false)
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(
                "batch_norm",
                format!("affine parameters {:?}/{:?} do not match {c} channels", self.shape(gamma), self.shape(beta)),
            );
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T, train: bool) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for p in range {
                    let z = (xs[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = z;
                    out[p] = gs[ch] * z + bs[ch];
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]))
    }

    // ----------------------------------------------------------------- pooling

    /// Nearest-neighbour upsampling of an NCHW tensor by an integer factor.
    pub fn nearest_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if factor == 0 {
            return shape_err("nearest_upsample", "factor must be positive".into());
        }
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(p * ho + y) * wo + xx] = xs[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::NearestUpsample { x, factor }, &[x]))
    }

    /// `factor×factor` mean pooling to `ceil(H/f)×ceil(W/f)`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        if factor == 0 {
            return shape_err("avg_pool", "factor must be positive".into());
        }
        let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
        let mut out = vec![T::zero(); n * c * ho * wo];
        kernels::avg_pool_forward(self.value(x).data(), n * c, (h, w), factor, &mut out);
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::AvgPool { x, factor }, &[x]))
    }

    /// Max pooling with square window, stride and implicit `-inf` padding.
    pub fn max_pool(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_size(h, kernel, stride, padding, 1),
            ConvGeom::out_size(w, kernel, stride, padding, 1),
        ) else {
            return shape_err("max_pool", format!("{h}×{w} admits no window of size {kernel}"));
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut at = p * h * w;
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (p * h + iy as usize) * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                at = idx;
                            }
                        }
                    }
                    let o = (p * ho + oy) * wo + ox;
                    out[o] = best;
                    argmax[o] = at;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean over the spatial axes: `(N,C,H,W) -> (N,C,1,1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        let denom = T::lit((h * w) as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    // -------------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / T::lit(t.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Record an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, rule: Box<dyn CustomBackward<T>>) -> Var {
        self.push(output, Op::Custom { inputs: inputs.to_vec(), rule }, inputs)
    }

    // ---------------------------------------------------------------- backward

    /// Propagate `d loss / d leaf` to every leaf that requires a gradient.
    /// Repeated calls accumulate into the same leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        self.grads.resize_with(self.nodes.len(), || None);
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads.get_mut(i).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match &mut self.grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Apply the vector-Jacobian product of node `i` to upstream gradient `g`.
    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                let out_shape = node.value.shape();
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let mut da = needs(*a).then(|| vec![T::zero(); val(*a).numel()]);
                let mut db = needs(*b).then(|| vec![T::zero(); val(*b).numel()]);
                kernels::for_each_broadcast(sa, sb, out_shape, |o, ia, ib| {
                    if let Some(da) = da.as_mut() {
                        da[ia] += gd[o];
                    }
                    if let Some(db) = db.as_mut() {
                        db[ib] += sign * gd[o];
                    }
                });
                if let Some(da) = da {
                    accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (xa, xb) = (val(*a), val(*b));
                let (sa, sb) = (xa.shape(), xb.shape());
                let (va, vb) = (xa.data(), xb.data());
                let mut da = needs(*a).then(|| vec![T::zero(); xa.numel()]);
                let mut db = needs(*b).then(|| vec![T::zero(); xb.numel()]);
                kernels::for_each_broadcast(sa, sb, out_shape, |o, ia, ib| {
                    if let Some(da) = da.as_mut() {
                        da[ia] += gd[o] * vb[ib];
                    }
                    if let Some(db) = db.as_mut() {
                        db[ib] += gd[o] * va[ia];
                    }
                });
                if let Some(da) = da {
                    accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if let Some(db) = db {
                    accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::Scale(x, factor) => accumulate(grads, *x, g.map(|v| v * *factor)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = val(*x).shape();
                accumulate(grads, *x, g.clone().reshape(shape)?);
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                let d = xs.iter().zip(gd).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                accumulate(grads, *x, Tensor::new(val(*x).shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                let d = ys.iter().zip(gd).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                accumulate(grads, *x, Tensor::new(val(*x).shape(), d)?);
            }
            Op::Matmul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (m, k, n) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                if needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_into(m, n, k, gd, false, xb.data(), true, &mut da, false);
                    accumulate(grads, *a, Tensor::new(&[m, k], da)?);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_into(k, m, n, xa.data(), true, gd, false, &mut db, false);
                    accumulate(grads, *b, Tensor::new(&[k, n], db)?);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let (xa, xb) = (val(*a), val(*b));
                let (batch, m, k) = (xa.shape()[0], xa.shape()[1], xa.shape()[2]);
                let n = node.value.shape()[2];
                if needs(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for t in 0..batch {
                        // dA = G · Bᵀ, or G · B when B was used transposed.
                        kernels::matmul_into(
                            m,
                            n,
                            k,
                            &gd[t * m * n..(t + 1) * m * n],
                            false,
                            &xb.data()[t * k * n..(t + 1) * k * n],
                            !*transpose_b,
                            &mut da[t * m * k..(t + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(grads, *a, Tensor::new(xa.shape(), da)?);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for t in 0..batch {
                        let (ga, aa) = (&gd[t * m * n..(t + 1) * m * n], &xa.data()[t * m * k..(t + 1) * m * k]);
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if *transpose_b {
                            // B is (n×k): dB = Gᵀ · A
                            kernels::matmul_into(n, m, k, ga, true, aa, false, out, false);
                        } else {
                            kernels::matmul_into(k, m, n, aa, true, ga, false, out, false);
                        }
                    }
                    accumulate(grads, *b, Tensor::new(xb.shape(), db)?);
                }
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = kernels::axis_split(shape, *axis);
                let mut dx = vec![T::zero(); node.value.numel()];
                kernels::softmax_backward(node.value.data(), gd, outer, len, inner, &mut dx);
                accumulate(grads, *x, Tensor::new(shape, dx)?);
            }
            Op::Permute { x, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let mut dx = vec![T::zero(); g.numel()];
                kernels::permute(gd, g.shape(), &inv, &mut dx);
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = kernels::axis_split(node.value.shape(), *axis);
                let total: usize = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = val(v).shape()[*axis] * inner;
                    if needs(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        accumulate(grads, v, Tensor::new(val(v).shape(), d)?);
                    }
                    offset += len;
                }
            }
            Op::CenterCrop { x, top, left } => {
                let (n, c, h, w) = val(*x).nchw()?;
                let (_, _, ch, cw) = node.value.nchw()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ch {
                        let dst = (p * h + top + y) * w + left;
                        let src = (p * ch + y) * cw;
                        dx[dst..dst + cw].copy_from_slice(&gd[src..src + cw]);
                    }
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads)?,
            Op::ConvTranspose2d { x, w, b, geom } => self.conv_transpose2d_backward(*x, *w, *b, geom, g, grads)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, h, w) = val(*x).nchw()?;
                let hw = h * w;
                let gs = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        for p in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                            dgamma[ch] += gd[p] * xhat[p];
                            dbeta[ch] += gd[p];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * c * hw];
                    let count = T::lit((n * hw) as f64);
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gs[ch] * inv_std[ch];
                            for p in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                                dx[p] = if *train {
                                    // (γ/σ)·(g − mean(g) − x̂·mean(g·x̂))
                                    scale * (gd[p] - dbeta[ch] / count - xhat[p] * dgamma[ch] / count)
                                } else {
                                    scale * gd[p]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::NearestUpsample { x, factor } => {
                let (n, c, h, w) = val(*x).nchw()?;
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(p * h + y / factor) * w + xx / factor] += gd[(p * ho + y) * wo + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::AvgPool { x, factor } => {
                let (n, c, h, w) = val(*x).nchw()?;
                let mut dx = vec![T::zero(); n * c * h * w];
                kernels::avg_pool_backward(gd, n * c, (h, w), *factor, &mut dx);
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); val(*x).numel()];
                for (&at, &gv) in argmax.iter().zip(gd) {
                    dx[at] += gv;
                }
                accumulate(grads, *x, Tensor::new(val(*x).shape(), dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = val(*x).nchw()?;
                let denom = T::lit((h * w) as f64);
                let mut dx = Vec::with_capacity(n * c * h * w);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv / denom, h * w));
                }
                accumulate(grads, *x, Tensor::new(&[n, c, h, w], dx)?);
            }
            Op::Sum(x) => accumulate(grads, *x, Tensor::full(val(*x).shape(), gd[0])),
            Op::Mean(x) => {
                let t = val(*x);
                accumulate(grads, *x, Tensor::full(t.shape(), gd[0] / T::lit(t.numel() as f64)));
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let out = rule.backward(&values, &node.value, g);
                if out.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "{} returned {} gradients for {} inputs",
                        rule.name(),
                        out.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(out) {
                    if let (Some(d), true) = (d, needs(v)) {
                        if d.shape() != val(v).shape() {
                            return Err(TensorError::shape(rule.name(), format!("gradient shape {:?} for input {:?}", d.shape(), val(v).shape())));
                        }
                        accumulate(grads, v, d);
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, o) = (g.shape()[0], g.shape()[1]);
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let image_len = geom.channels * geom.height * geom.width;
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let gd = g.data();
        let mut dw = vec![T::zero(); o * rows];
        let mut dx = if need_x { vec![T::zero(); n * image_len] } else { Vec::new() };
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * cols_n }];
        let mut dcols = vec![T::zero(); if need_x && !geom.is_pointwise() { rows * cols_n } else { 0 }];
        for i in 0..n {
            let gi = &gd[i * o * cols_n..(i + 1) * o * cols_n];
            let image = &xv.data()[i * image_len..(i + 1) * image_len];
            if need_w {
                let unfolded: &[T] = if geom.is_pointwise() {
                    image
                } else {
                    kernels::im2col(image, geom, &mut cols);
                    &cols
                };
                // dW += G_i · colsᵀ
                kernels::matmul_into(o, cols_n, rows, gi, false, unfolded, true, &mut dw, true);
            }
            if need_x {
                let dimage = &mut dx[i * image_len..(i + 1) * image_len];
                if geom.is_pointwise() {
                    kernels::matmul_into(rows, o, cols_n, wv.data(), true, gi, false, dimage, false);
                } else {
                    kernels::matmul_into(rows, o, cols_n, wv.data(), true, gi, false, &mut dcols, false);
                    kernels::col2im(&dcols, geom, dimage);
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
        }
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let mut db = vec![T::zero(); o];
            for (p, plane) in gd.chunks(cols_n).enumerate() {
                db[p % o] += plane.iter().copied().sum::<T>();
            }
            accumulate(grads, b, Tensor::new(&[o], db)?);
        }
        Ok(())
    }

    fn conv_transpose2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let (rows, hw) = (geom.col_rows(), geom.col_cols());
        let out_len = geom.channels * geom.height * geom.width;
        let (need_x, need_w) = (self.requires_grad(x), self.requires_grad(w));
        let gd = g.data();
        let mut dx = if need_x { vec![T::zero(); n * c * hw] } else { Vec::new() };
        let mut dw = vec![T::zero(); c * rows];
        let mut cols = vec![T::zero(); rows * hw];
        for i in 0..n {
            kernels::im2col(&gd[i * out_len..(i + 1) * out_len], geom, &mut cols);
            if need_x {
                // dx_i = W · cols
                kernels::matmul_into(c, rows, hw, wv.data(), false, &cols, false, &mut dx[i * c * hw..(i + 1) * c * hw], false);
            }
            if need_w {
                // dW += x_i · colsᵀ
                kernels::matmul_into(c, hw, rows, &xv.data()[i * c * hw..(i + 1) * c * hw], false, &cols, true, &mut dw, true);
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::new(xv.shape(), dx)?);
        }
        if need_w {
            accumulate(grads, w, Tensor::new(wv.shape(), dw)?);
        }
        if let Some(b) = b.filter(|&b| self.requires_grad(b)) {
            let o = geom.channels;
            let mut db = vec![T::zero(); o];
            for (p, plane) in gd.chunks(geom.height * geom.width).enumerate() {
                db[p % o] += plane.iter().copied().sum::<T>();
            }
            accumulate(grads, b, Tensor::new(&[o], db)?);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn conv_full_window_sums_to_nine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, ConvSpec::new(1, 1, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(tape.value(y).at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 4], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, ConvSpec::default()).unwrap();
        assert_eq!(tape.value(y).data(), data.as_slice());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, ConvSpec::default()).unwrap_err();
        assert!(matches!(err, TensorError::Shape { op: "conv2d", .. }), "{err}");
    }

    #[test]
    fn transposed_conv_single_site_stamp() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv_transpose2d(x, w, None, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0; 4]);
    }

    #[test]
    fn matmul_hand_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[1., 1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        let bad = tape.constant(t(&[3, 1], &[1., 1., 1.]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn softmax_analytic_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-12 && (d[1] - 1.0 / 3.0).abs() < 1e-12);
        let big = tape.constant(t(&[2], &[1000.0, 999.0]));
        let small = tape.constant(t(&[2], &[1.0, 0.0]));
        let (yb, ys) = (tape.softmax(big, 0).unwrap(), tape.softmax(small, 0).unwrap());
        assert!(tape.value(yb).all_finite());
        assert!(tape.value(yb).max_abs_diff(tape.value(ys)) < 1e-12);
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::Axis { .. })));
    }

    #[test]
    fn sigmoid_and_global_pool() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[0.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).item(), 0.5);
        let c = tape.constant(Tensor::full(&[2, 3, 4, 5], 1.25));
        let p = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.shape(p), &[2, 3, 1, 1]);
        assert!(tape.value(p).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn broadcast_mismatch_is_shape_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 3, 3]));
        let b = tape.constant(Tensor::ones(&[1, 3, 1, 1]));
        assert!(matches!(tape.mul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1., -2., 3., 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut tape = Tape::<f64>::new();
        let values = [0.3, -1.2, 2.0];
        let x = tape.leaf(t(&[3], &values), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &values);
        // A second pass accumulates.
        tape.backward(loss).unwrap();
        let doubled: Vec<f64> = values.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.grad(x).unwrap().data(), doubled.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 1.0]), true);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn batchnorm_train_moments() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 23) as f64).sin() * 3.0 + 1.0).collect();
        let x = tape.constant(t(&[2, 3, 4, 4], &data));
        let gamma = tape.constant(Tensor::ones(&[3]));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, _, _) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let y = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..16).map(move |p| (n, p))).map(|(n, p)| y.data()[(n * 3 + ch) * 16 + p]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn concat_and_crop_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        assert_eq!(tape.value(c).at(&[0, 1, 3, 3]), 1.0);
        assert_eq!(tape.value(c).at(&[0, 2, 0, 0]), 0.0);
        let cropped = tape.center_crop(c, 3, 2).unwrap();
        assert_eq!(tape.shape(cropped), &[1, 5, 3, 2]);
    }
}
