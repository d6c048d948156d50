//! Tape-free numerical kernels over [`Tensor`].
//!
//! Every kernel writes each output element from exactly one task, in a fixed
//! summation order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 3D convolution.
///
/// Weights of a forward convolution have shape `(out, in, k0, k1, k2)`. A
/// transposed convolution uses `(in, out, k0, k1, k2)`, which makes it the
/// exact adjoint of the forward convolution sharing the same buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
    pub transposed: bool,
}

impl ConvSpec {
    /// `3×3×3`, padding 1, equal stride on every axis.
    pub fn cube3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kernel: [3; 3],
            stride: [stride; 3],
            padding: [1; 3],
            in_channels,
            out_channels,
            transposed: false,
        }
    }

    pub fn transposed3(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            transposed: true,
            ..Self::cube3(in_channels, out_channels, stride)
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let [k0, k1, k2] = self.kernel;
        if self.transposed {
            vec![self.in_channels, self.out_channels, k0, k1, k2]
        } else {
            vec![self.out_channels, self.in_channels, k0, k1, k2]
        }
    }

    /// Output spatial extent along one axis.
    pub fn output_len(&self, axis: usize, n: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel[axis], self.stride[axis], self.padding[axis]);
        if self.transposed {
            // output_padding is chosen so the result is exactly n·s.
            let base = (n - 1) * s + k;
            if base < 2 * p || n * s < base - 2 * p || n * s - (base - 2 * p) >= s.max(1) {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!("cannot reach {}·{s} on axis {axis} with kernel {k}, padding {p}", n),
                ));
            }
            Ok(n * s)
        } else {
            if n + 2 * p < k {
                return Err(Error::shape(
                    "conv3d",
                    format!("axis {axis} of size {n} is smaller than kernel {k} after padding"),
                ));
            }
            Ok((n + 2 * p - k) / s + 1)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("convolution channel counts must be positive".into()));
        }
        if self.stride.contains(&0) || self.kernel.contains(&0) {
            return Err(Error::Config("convolution stride and kernel must be positive".into()));
        }
        Ok(())
    }
}

const SPATIAL_AXES: [&str; 3] = ["H", "W", "D"];

fn check_conv_input(op: &'static str, x: &Tensor, channels: usize) -> Result<[usize; 3]> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape(op, format!("expected (N, C, H, W, D), got {s:?}")));
    }
    if s[1] != channels {
        return Err(Error::shape(
            op,
            format!("axis C: input has {} channels, spec expects {channels}", s[1]),
        ));
    }
    for (axis, &n) in SPATIAL_AXES.iter().zip(&s[2..]) {
        if n == 0 {
            return Err(Error::shape(op, format!("axis {axis} has zero size")));
        }
    }
    Ok([s[2], s[3], s[4]])
}

fn check_weight(op: &'static str, w: &Tensor, spec: &ConvSpec) -> Result<()> {
    let expected = spec.weight_shape();
    if w.shape() != expected.as_slice() {
        return Err(Error::shape(
            op,
            format!("weight shape {:?}, expected {expected:?}", w.shape()),
        ));
    }
    Ok(())
}

fn check_bias(op: &'static str, b: Option<&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [channels] {
            return Err(Error::shape(
                op,
                format!("bias shape {:?}, expected [{channels}]", b.shape()),
            ));
        }
    }
    Ok(())
}

/// Range of "output" positions `o` whose input position `o·s + k − p` lies
/// in `[0, in_len)`, clipped to `[0, out_len)`.
#[inline]
fn valid_range(k: usize, s: usize, p: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
    if in_len + p <= k {
        return (0, 0);
    }
    let hi = ((in_len - 1 + p - k) / s + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Geometry shared by the three raw convolution loops. "Input" is the
/// dense side (`i = o·s + k − p`), "output" the strided side.
#[derive(Clone, Copy)]
struct Geometry {
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn ranges(&self, k: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            valid_range(k[a], self.stride[a], self.padding[a], self.input[a], self.output[a])
        })
    }

    #[inline]
    fn in_index(&self, a: usize, o: usize, k: usize) -> usize {
        o * self.stride[a] + k - self.padding[a]
    }
}

/// Calls `f(out_start, in_start, len)` for every row of valid (o, i) pairs
/// for kernel tap `k`. Along the last axis `o` advances by 1 and `i` by the
/// stride.
#[inline]
fn for_each_row(g: &Geometry, k: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [r0, r1, r2] = g.ranges(k);
    if r2.1 <= r2.0 {
        return;
    }
    let [_, o1n, o2n] = g.output;
    let [_, i1n, i2n] = g.input;
    let i2 = g.in_index(2, r2.0, k[2]);
    for o0 in r0.0..r0.1 {
        let i0 = g.in_index(0, o0, k[0]);
        for o1 in r1.0..r1.1 {
            let i1 = g.in_index(1, o1, k[1]);
            f((o0 * o1n + o1) * o2n + r2.0, (i0 * i1n + i1) * i2n + i2, r2.1 - r2.0);
        }
    }
}

fn taps(kernel: [usize; 3]) -> impl Iterator<Item = (usize, [usize; 3])> {
    let [k0, k1, k2] = kernel;
    (0..k0 * k1 * k2).map(move |t| (t, [t / (k1 * k2), (t / k2) % k1, t % k2]))
}

/// `c[m×n] = beta·c + a[m×k] · b[k×n]` with explicit row and column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    beta: f64,
    c: (&mut [f64], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || (last(m, k, a.1, a.2) < a.0.len() && last(k, n, b.1, b.2) < b.0.len()));
    assert!(last(m, n, c.1, c.2) < c.0.len());
    // SAFETY: every index touched by dgemm is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.0.as_mut_ptr(),
            c.1,
            c.2,
        );
    }
}

/// Copies the input values seen by tap `k` into `col` (`channels × out_volume`),
/// zero where the tap falls into padding.
fn gather_tap(x: &[f64], channels: usize, g: &Geometry, k: [usize; 3], col: &mut [f64]) {
    let (iv, ov) = (g.in_volume(), g.out_volume());
    let s2 = g.stride[2];
    col.fill(0.0);
    for c in 0..channels {
        let xin = &x[c * iv..][..iv];
        let dst = &mut col[c * ov..][..ov];
        for_each_row(g, k, |o, i, len| {
            if s2 == 1 {
                dst[o..o + len].copy_from_slice(&xin[i..i + len]);
            } else {
                dst[o..o + len].iter_mut().zip(xin[i..].iter().step_by(s2)).for_each(|(d, x)| *d = *x);
            }
        });
    }
}

/// Adds `col` (`channels × out_volume`) back onto the input positions of tap `k`.
fn scatter_tap(col: &[f64], channels: usize, g: &Geometry, k: [usize; 3], x: &mut [f64]) {
    let (iv, ov) = (g.in_volume(), g.out_volume());
    let s2 = g.stride[2];
    for c in 0..channels {
        let xout = &mut x[c * iv..][..iv];
        let src = &col[c * ov..][..ov];
        for_each_row(g, k, |o, i, len| {
            if s2 == 1 {
                xout[i..i + len].iter_mut().zip(&src[o..o + len]).for_each(|(d, v)| *d += v);
            } else {
                xout[i..].iter_mut().step_by(s2).zip(&src[o..o + len]).for_each(|(d, v)| *d += v);
            }
        });
    }
}

/// Strided correlation: `out[n, co, o] = Σ_ci Σ_k w[co, ci, k] · x[n, ci, o·s + k − p]`.
fn conv_forward_raw(x: &[f64], w: &[f64], batch: usize, ci_n: usize, co_n: usize, g: Geometry) -> Vec<f64> {
    let (iv, ov) = (g.in_volume(), g.out_volume());
    let kv: usize = g.kernel.iter().product();
    let mut out = vec![0.0; batch * co_n * ov];
    let mut col = vec![0.0; ci_n * ov];
    for n in 0..batch {
        let xin = &x[n * ci_n * iv..][..ci_n * iv];
        let dst = &mut out[n * co_n * ov..][..co_n * ov];
        for (t, k) in taps(g.kernel) {
            gather_tap(xin, ci_n, &g, k, &mut col);
            let wt = (&w[t..], (ci_n * kv) as isize, kv as isize);
            gemm(co_n, ci_n, ov, wt, (&col, ov as isize, 1), 1.0, (&mut *dst, ov as isize, 1));
        }
    }
    out
}

/// Adjoint of [`conv_forward_raw`]: `out[n, b, i] = Σ_a Σ_k w[a, b, k] · y[n, a, o]` with `i = o·s + k − p`.
fn conv_transpose_raw(y: &[f64], w: &[f64], batch: usize, a_n: usize, b_n: usize, g: Geometry) -> Vec<f64> {
    let (iv, ov) = (g.in_volume(), g.out_volume());
    let kv: usize = g.kernel.iter().product();
    let mut out = vec![0.0; batch * b_n * iv];
    let mut col = vec![0.0; b_n * ov];
    for n in 0..batch {
        let yin = &y[n * a_n * ov..][..a_n * ov];
        let dst = &mut out[n * b_n * iv..][..b_n * iv];
        for (t, k) in taps(g.kernel) {
            let wt = (&w[t..], kv as isize, (b_n * kv) as isize);
            gemm(b_n, a_n, ov, wt, (yin, ov as isize, 1), 0.0, (&mut col, ov as isize, 1));
            scatter_tap(&col, b_n, &g, k, dst);
        }
    }
    out
}

/// Weight gradient: `gw[a, b, k] = Σ_n Σ_o gy[n, a, o] · x[n, b, o·s + k − p]`.
fn conv_weight_grad_raw(x: &[f64], gy: &[f64], batch: usize, a_n: usize, b_n: usize, g: Geometry) -> Vec<f64> {
    let (iv, ov) = (g.in_volume(), g.out_volume());
    let kv: usize = g.kernel.iter().product();
    let mut gw = vec![0.0; a_n * b_n * kv];
    let mut col = vec![0.0; b_n * ov];
    for n in 0..batch {
        let xin = &x[n * b_n * iv..][..b_n * iv];
        let yin = &gy[n * a_n * ov..][..a_n * ov];
        for (t, k) in taps(g.kernel) {
            gather_tap(xin, b_n, &g, k, &mut col);
            let dst = (&mut gw[t..], (b_n * kv) as isize, kv as isize);
            gemm(a_n, ov, b_n, (yin, ov as isize, 1), (&col, 1, ov as isize), 1.0, dst);
        }
    }
    gw
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], volume: usize) {
    let channels = bias.len();
    out.par_chunks_mut(volume).enumerate().for_each(|(plane, chunk)| {
        let b = bias[plane % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    });
}

/// Sums a `(N, C, …)` tensor over every axis but `C`.
pub fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (batch, channels) = (s[0], s[1]);
    let volume: usize = s[2..].iter().product();
    let mut sums = vec![0.0; channels];
    for n in 0..batch {
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += t.data()[(n * channels + c) * volume..][..volume].iter().sum::<f64>();
        }
    }
    Tensor::from_parts(vec![channels], sums)
}

fn forward_geometry(spec: &ConvSpec, input: [usize; 3]) -> Result<Geometry> {
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = spec.output_len(a, input[a])?;
    }
    Ok(Geometry {
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        input,
        output,
    })
}

/// Forward 3D convolution of `(N, Cin, H, W, D)` by `(Cout, Cin, k, k, k)` weights.
pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    if spec.transposed {
        return Err(Error::Config("conv3d called with a transposed spec".into()));
    }
    let input = check_conv_input("conv3d", x, spec.in_channels)?;
    check_weight("conv3d", w, spec)?;
    check_bias("conv3d", bias, spec.out_channels)?;
    let g = forward_geometry(spec, input)?;
    let batch = x.shape()[0];
    let mut out = conv_forward_raw(x.data(), w.data(), batch, spec.in_channels, spec.out_channels, g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.out_volume());
    }
    let [o0, o1, o2] = g.output;
    Ok(Tensor::from_parts(vec![batch, spec.out_channels, o0, o1, o2], out))
}

/// Gradients of [`conv3d`] with respect to input and weight.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let s = x.shape();
    let g = Geometry {
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        input: [s[2], s[3], s[4]],
        output: [grad_out.shape()[2], grad_out.shape()[3], grad_out.shape()[4]],
    };
    let batch = s[0];
    let gx = need_input.then(|| {
        let data = conv_transpose_raw(grad_out.data(), w.data(), batch, spec.out_channels, spec.in_channels, g);
        Tensor::from_parts(s.to_vec(), data)
    });
    let gw = need_weight.then(|| {
        let data = conv_weight_grad_raw(x.data(), grad_out.data(), batch, spec.out_channels, spec.in_channels, g);
        Tensor::from_parts(w.shape().to_vec(), data)
    });
    (gx, gw)
}

fn transposed_geometry(spec: &ConvSpec, input: [usize; 3]) -> Result<Geometry> {
    let mut output = [0; 3];
    for a in 0..3 {
        output[a] = spec.output_len(a, input[a])?;
    }
    // The strided side of a transposed convolution is its input.
    Ok(Geometry {
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        input: output,
        output: input,
    })
}

/// Transposed 3D convolution with `(Cin, Cout, k, k, k)` weights; spatial
/// size is multiplied by the stride exactly.
pub fn conv_transpose3d(y: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    if !spec.transposed {
        return Err(Error::Config("conv_transpose3d called with a forward spec".into()));
    }
    let input = check_conv_input("conv_transpose3d", y, spec.in_channels)?;
    check_weight("conv_transpose3d", w, spec)?;
    check_bias("conv_transpose3d", bias, spec.out_channels)?;
    let g = transposed_geometry(spec, input)?;
    let batch = y.shape()[0];
    let mut out = conv_transpose_raw(y.data(), w.data(), batch, spec.in_channels, spec.out_channels, g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.in_volume());
    }
    let [o0, o1, o2] = g.input;
    Ok(Tensor::from_parts(vec![batch, spec.out_channels, o0, o1, o2], out))
}

/// Gradients of [`conv_transpose3d`] with respect to input and weight.
pub fn conv_transpose3d_backward(
    y: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    spec: &ConvSpec,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let s = y.shape();
    let go = grad_out.shape();
    let g = Geometry {
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        input: [go[2], go[3], go[4]],
        output: [s[2], s[3], s[4]],
    };
    let batch = s[0];
    let gy = need_input.then(|| {
        let data = conv_forward_raw(grad_out.data(), w.data(), batch, spec.out_channels, spec.in_channels, g);
        Tensor::from_parts(s.to_vec(), data)
    });
    let gw = need_weight.then(|| {
        let data = conv_weight_grad_raw(grad_out.data(), y.data(), batch, spec.in_channels, spec.out_channels, g);
        Tensor::from_parts(w.shape().to_vec(), data)
    });
    (gy, gw)
}

/// `(m, k) · (k, n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], _m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..][..k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..][..n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// Batched `(g, m, k) · (g, k, n)`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
        return Err(Error::shape("bmm", format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    let (g, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = vec![0.0; g * m * n];
    if m * n > 0 {
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, chunk)| {
            let ai = &a.data()[i * m * k..][..m * k];
            let bi = &b.data()[i * k * n..][..k * n];
            for r in 0..m {
                let row = &mut chunk[r * n..][..n];
                for p in 0..k {
                    let av = ai[r * k + p];
                    for (o, &bv) in row.iter_mut().zip(&bi[p * n..][..n]) {
                        *o += av * bv;
                    }
                }
            }
        });
    }
    Ok(Tensor::from_parts(vec![g, m, n], out))
}

/// General axis permutation: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(
            "permute",
            format!("{axes:?} is not a permutation of {rank} axes"),
        ));
    }
    let in_strides = x.strides();
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(x.data()[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reverses `x` along each axis in `axes`.
pub fn flip(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    if let Some(&bad) = axes.iter().find(|&&a| a >= rank) {
        return Err(Error::InvalidAxis {
            op: "flip",
            axis: bad,
            rank,
        });
    }
    let shape = x.shape();
    let st = strides(shape);
    let mut flipped = vec![false; rank];
    for &a in axes {
        flipped[a] ^= true;
    }
    let n = x.numel();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in 0..rank {
            idx[d] = rem / st[d];
            rem %= st[d];
        }
        let src: usize = (0..rank)
            .map(|d| {
                let i = if flipped[d] { shape[d] - 1 - idx[d] } else { idx[d] };
                i * st[d]
            })
            .sum();
        *slot = x.data()[src];
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (out[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                out[base + j * inner] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `log(softmax(x))` along `axis`.
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("log_softmax", x, axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len).map(|j| out[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..len).map(|j| (out[base + j * inner] - max).exp()).sum::<f64>().ln();
            for j in 0..len {
                out[base + j * inner] -= lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn check_axis(op: &'static str, x: &Tensor, axis: usize) -> Result<()> {
    if axis >= x.rank() {
        return Err(Error::InvalidAxis {
            op,
            axis,
            rank: x.rank(),
        });
    }
    Ok(())
}
