//! Forward/backward kernels on raw buffers. The tape wraps these with shape
//! checking and graph bookkeeping.

use crate::real::Real;

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Output size along one axis, `None` when no output position fits.
    pub fn out_size(
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Option<usize> {
        let span = dilation * (kernel - 1) + 1;
        let padded = input + 2 * padding;
        if stride == 0 || padded < span {
            None
        } else {
            Some((padded - span) / stride + 1)
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// True when im2col is the identity (1×1 kernel, unit stride, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold an image `(C, H, W)` into columns `(C·K·K, Ho·Wo)`.
pub fn im2col<T: Real>(image: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, hw_out) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back onto an image buffer.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let (k, hw_out) = (g.kernel, g.col_cols());
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[oy * g.out_width..(oy + 1) * g.out_width].iter().enumerate() {
                        let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)` on contiguous row-major buffers, with
/// optional transposition of either operand and accumulation into `c`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    transpose_a: bool,
    b: &[T],
    transpose_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_strides = if transpose_a { (1, m) } else { (k, 1) };
    let b_strides = if transpose_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, beta, c, (n, 1));
}

/// Split a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along the middle dimension of `(outer, len, inner)`.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, len: usize, inner: usize, y: &mut [T]) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - max).exp();
                y[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                y[base + j * inner] /= total;
            }
        }
    }
}

pub fn softmax_backward<T: Real>(
    y: &[T],
    grad: &[T],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [T],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += y[base + j * inner] * grad[base + j * inner];
            }
            for j in 0..len {
                let at = base + j * inner;
                dx[at] += y[at] * (grad[at] - dot);
            }
        }
    }
}

/// Row-major strides of a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape of two equal-rank shapes, `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(own)
        .map(|((&d, &o), s)| if d == o { s } else { 0 })
        .collect()
}

/// Visit `(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if a == out && b == out {
        for i in 0..out.iter().product() {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let last = rank - 1;
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        // Innermost axis in a tight loop.
        for j in 0..out[last] {
            f(o + j, ia + j * sa[last], ib + j * sb[last]);
        }
        o += out[last];
        // Carry into the outer axes.
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out[axis] {
                break;
            }
            ia -= sa[axis] * out[axis];
            ib -= sb[axis] * out[axis];
            idx[axis] = 0;
        }
    }
}

/// Gather `src` into `dst` so that `dst` has axes `perm` of `src`.
pub fn permute<T: Real>(src: &[T], shape: &[usize], perm: &[usize], dst: &mut [T]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let mut o = 0;
    let total = dst.len();
    while o < total {
        for j in 0..out_shape[last] {
            dst[o + j] = src[offset + j * gather[last]];
        }
        o += out_shape[last];
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            offset += gather[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= gather[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Mean over `factor×factor` windows of each plane; edge windows average only
/// the pixels they contain.
pub fn avg_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    factor: usize,
    y: &mut [T],
) {
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            for ox in 0..wo {
                let xs = ox * factor..((ox + 1) * factor).min(w);
                let count = ys.len() * xs.len();
                let mut total = T::zero();
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        total += src[iy * w + ix];
                    }
                }
                y[(p * ho + oy) * wo + ox] = total / T::lit(count as f64);
            }
        }
    }
}

pub fn avg_pool_backward<T: Real>(
    grad: &[T],
    planes: usize,
    (h, w): (usize, usize),
    factor: usize,
    dx: &mut [T],
) {
    let (ho, wo) = (h.div_ceil(factor), w.div_ceil(factor));
    for p in 0..planes {
        for oy in 0..ho {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            for ox in 0..wo {
                let xs = ox * factor..((ox + 1) * factor).min(w);
                let share = grad[(p * ho + oy) * wo + ox] / T::lit((ys.len() * xs.len()) as f64);
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        dx[(p * h + iy) * w + ix] += share;
                    }
                }
            }
        }
    }
}
