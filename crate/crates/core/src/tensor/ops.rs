//! Differentiable operations on [`Var`].
//!
//! Each op evaluates its kernel eagerly and, when any input is on a tape,
//! records a backward rule. Binary elementwise ops broadcast size-1 axes of
//! equal-rank operands (bias adds, attention-map products); nothing else
//! broadcasts.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::kernels::{self, axis_split, check_axis, ConvSpec};
use super::{strides, Tensor, Var};
use crate::error::{Error, Result};

fn some(t: Tensor) -> Option<Tensor> {
    Some(t)
}

// ---------------------------------------------------------------------------
// Broadcasting binary ops

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, format!("rank mismatch {a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(st)
        .map(|((&d, &o), s)| if d == o { s } else { 0 })
        .collect()
}

/// Visits `(out_offset, a_offset, b_offset)` in row-major output order.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let n: usize = out.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn binary(
    op: &'static str,
    a: &Var,
    b: &Var,
    f: fn(f64, f64) -> f64,
    // Partial derivatives (∂/∂a, ∂/∂b) at (a, b).
    df: fn(f64, f64) -> (f64, f64),
) -> Result<Var> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_broadcast(&out_shape, av.shape(), bv.shape(), |o, ia, ib| {
        out[o] = f(av.data()[ia], bv.data()[ib]);
    });
    let value = Tensor::from_parts(out_shape.clone(), out);
    Ok(Var::record(
        &[a, b],
        value,
        Box::new(move |g, needs| {
            let mut ga = needs[0].then(|| vec![0.0; av.numel()]);
            let mut gb = needs[1].then(|| vec![0.0; bv.numel()]);
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |o, ia, ib| {
                let (da, db) = df(av.data()[ia], bv.data()[ib]);
                let go = g.data()[o];
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += go * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += go * db;
                }
            });
            vec![
                ga.map(|d| Tensor::from_parts(av.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(bv.shape().to_vec(), d)),
            ]
        }),
    ))
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    binary("add", a, b, |x, y| x + y, |_, _| (1.0, 1.0))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    binary("sub", a, b, |x, y| x - y, |_, _| (1.0, -1.0))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    binary("mul", a, b, |x, y| x * y, |x, y| (y, x))
}

pub fn div(a: &Var, b: &Var) -> Result<Var> {
    binary("div", a, b, |x, y| x / y, |x, y| (1.0 / y, -x / (y * y)))
}

// ---------------------------------------------------------------------------
// Unary elementwise ops

fn unary(x: &Var, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var {
    let xv = x.value().clone();
    let value = xv.map(f);
    let yv = value.clone();
    Var::record(
        &[x],
        value,
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&go, (&xi, &yi))| go * df(xi, yi))
                .collect();
            vec![some(Tensor::from_parts(xv.shape().to_vec(), data))]
        }),
    )
}

pub fn scale(x: &Var, c: f64) -> Var {
    let xv = x.value();
    let value = xv.map(|v| v * c);
    Var::record(&[x], value, Box::new(move |g, _| vec![some(g.map(|v| v * c))]))
}

pub fn add_scalar(x: &Var, c: f64) -> Var {
    Var::record(&[x], x.value().map(|v| v + c), Box::new(|g, _| vec![some(g.clone())]))
}

pub fn relu(x: &Var) -> Var {
    unary(x, |v| v.max(0.0), |xi, _| if xi > 0.0 { 1.0 } else { 0.0 })
}

pub fn sigmoid(x: &Var) -> Var {
    unary(x, |v| 1.0 / (1.0 + (-v).exp()), |_, y| y * (1.0 - y))
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Var) -> Var {
    unary(
        x,
        |v| 0.5 * v * (1.0 + libm::erf(v * FRAC_1_SQRT_2)),
        |v, _| {
            let cdf = 0.5 * (1.0 + libm::erf(v * FRAC_1_SQRT_2));
            let pdf = (-0.5 * v * v).exp() / (2.0 * PI).sqrt();
            cdf + v * pdf
        },
    )
}

// ---------------------------------------------------------------------------
// Reductions

/// Sum of all elements, as a `[1]` tensor.
pub fn sum(x: &Var) -> Var {
    let shape = x.shape().to_vec();
    Var::record(
        &[x],
        Tensor::scalar(x.value().sum()),
        Box::new(move |g, _| vec![some(Tensor::full(shape.clone(), g.data()[0]))]),
    )
}

pub fn mean(x: &Var) -> Var {
    let n = x.value().numel() as f64;
    scale(&sum(x), 1.0 / n)
}

fn keep_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

/// Sum along `axis`, keeping it with size 1.
pub fn sum_axis(x: &Var, axis: usize) -> Result<Var> {
    check_axis("sum_axis", x.value(), axis)?;
    let shape = x.shape().to_vec();
    let (outer, len, inner) = axis_split(&shape, axis);
    let xd = x.value().data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            let row = &xd[(o * len + j) * inner..][..inner];
            for (acc, v) in out[o * inner..][..inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let value = Tensor::from_parts(keep_shape(&shape, axis), out);
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for j in 0..len {
                    gx[(o * len + j) * inner..][..inner].copy_from_slice(&g.data()[o * inner..][..inner]);
                }
            }
            vec![some(Tensor::from_parts(shape.clone(), gx))]
        }),
    ))
}

pub fn mean_axis(x: &Var, axis: usize) -> Result<Var> {
    check_axis("mean_axis", x.value(), axis)?;
    let len = x.shape()[axis] as f64;
    Ok(scale(&sum_axis(x, axis)?, 1.0 / len))
}

/// Maximum along `axis` (kept with size 1). Ties route the gradient to the
/// first maximal element.
pub fn max_axis(x: &Var, axis: usize) -> Result<Var> {
    check_axis("max_axis", x.value(), axis)?;
    let shape = x.shape().to_vec();
    let (outer, len, inner) = axis_split(&shape, axis);
    let xd = x.value().data();
    let mut out = vec![f64::NEG_INFINITY; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for j in 0..len {
            for i in 0..inner {
                let v = xd[(o * len + j) * inner + i];
                let slot = o * inner + i;
                if v > out[slot] {
                    out[slot] = v;
                    arg[slot] = (o * len + j) * inner + i;
                }
            }
        }
    }
    let value = Tensor::from_parts(keep_shape(&shape, axis), out);
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| {
            let mut gx = vec![0.0; outer * len * inner];
            for (slot, &src) in arg.iter().enumerate() {
                gx[src] += g.data()[slot];
            }
            vec![some(Tensor::from_parts(shape.clone(), gx))]
        }),
    ))
}

fn check_volume(op: &'static str, x: &Var) -> Result<()> {
    if x.value().rank() != 5 {
        return Err(Error::shape(op, format!("expected (N, C, H, W, D), got {:?}", x.shape())));
    }
    Ok(())
}

/// Mean over the spatial axes of `(N, C, H, W, D)`, giving `(N, C, 1, 1, 1)`.
pub fn global_avg_pool(x: &Var) -> Result<Var> {
    check_volume("global_avg_pool", x)?;
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let flat = reshape(x, [n, c, s[2] * s[3] * s[4]])?;
    reshape(&mean_axis(&flat, 2)?, [n, c, 1, 1, 1])
}

/// Maximum over the spatial axes of `(N, C, H, W, D)`, giving `(N, C, 1, 1, 1)`.
pub fn global_max_pool(x: &Var) -> Result<Var> {
    check_volume("global_max_pool", x)?;
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let flat = reshape(x, [n, c, s[2] * s[3] * s[4]])?;
    reshape(&max_axis(&flat, 2)?, [n, c, 1, 1, 1])
}

// ---------------------------------------------------------------------------
// Normalization and softmax

pub fn softmax(x: &Var, axis: usize) -> Result<Var> {
    let y = kernels::softmax(x.value(), axis)?;
    let yv = y.clone();
    Ok(Var::record(
        &[x],
        y,
        Box::new(move |g, _| {
            let (outer, len, inner) = axis_split(yv.shape(), axis);
            let (yd, gd) = (yv.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|j| gd[base + j * inner] * yd[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = yd[k] * (gd[k] - dot);
                    }
                }
            }
            vec![some(Tensor::from_parts(yv.shape().to_vec(), gx))]
        }),
    ))
}

pub fn log_softmax(x: &Var, axis: usize) -> Result<Var> {
    let y = kernels::log_softmax(x.value(), axis)?;
    let yv = y.clone();
    Ok(Var::record(
        &[x],
        y,
        Box::new(move |g, _| {
            let (outer, len, inner) = axis_split(yv.shape(), axis);
            let (yd, gd) = (yv.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let total: f64 = (0..len).map(|j| gd[base + j * inner]).sum();
                    for j in 0..len {
                        let k = base + j * inner;
                        gx[k] = gd[k] - yd[k].exp() * total;
                    }
                }
            }
            vec![some(Tensor::from_parts(yv.shape().to_vec(), gx))]
        }),
    ))
}

/// Standardizes every row along the last axis to zero mean and unit
/// (population) variance: `(x − μ) / sqrt(σ² + eps)`.
pub fn normalize_last(x: &Var, eps: f64) -> Result<Var> {
    let shape = x.shape().to_vec();
    let Some(&len) = shape.last() else {
        return Err(Error::shape("normalize_last", "scalar input"));
    };
    if len == 0 {
        return Err(Error::shape("normalize_last", "empty last axis"));
    }
    let xd = x.value().data();
    let rows = xd.len() / len;
    let mut y = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &xd[r * len..][..len];
        let mu = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, v) in y[r * len..][..len].iter_mut().zip(row) {
            *o = (v - mu) * inv;
        }
    }
    let value = Tensor::from_parts(shape.clone(), y);
    let yv = value.clone();
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| {
            let (yd, gd) = (yv.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for r in 0..rows {
                let (yr, gr) = (&yd[r * len..][..len], &gd[r * len..][..len]);
                let g_mean = gr.iter().sum::<f64>() / len as f64;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                for ((o, gi), yi) in gx[r * len..][..len].iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[r] * (gi - g_mean - yi * gy_mean);
                }
            }
            vec![some(Tensor::from_parts(shape.clone(), gx))]
        }),
    ))
}

/// Reshapes a length-`c` vector so it broadcasts along `axis` of a rank-`rank` tensor.
fn along_axis(v: &Var, rank: usize, axis: usize) -> Result<Var> {
    let mut shape = vec![1; rank];
    shape[axis] = v.value().numel();
    reshape(v, shape)
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let rank = x.value().rank();
    let d = *x.shape().last().unwrap_or(&0);
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?} vs last axis {d}", gamma.shape(), beta.shape()),
        ));
    }
    let normed = normalize_last(x, eps)?;
    let scaled = mul(&normed, &along_axis(gamma, rank, rank - 1)?)?;
    add(&scaled, &along_axis(beta, rank, rank - 1)?)
}

/// Group normalization of `(N, C, …)` with per-channel affine.
pub fn group_norm(x: &Var, groups: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 || groups == 0 || !shape[1].is_multiple_of(groups) {
        return Err(Error::shape(
            "group_norm",
            format!("{groups} groups do not divide channels of {shape:?}"),
        ));
    }
    let c = shape[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "group_norm",
            format!("gamma {:?} / beta {:?} vs {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let per_group = x.value().numel() / (shape[0] * groups);
    let grouped = reshape(x, [shape[0] * groups, per_group])?;
    let normed = reshape(&normalize_last(&grouped, eps)?, shape.clone())?;
    let scaled = mul(&normed, &along_axis(gamma, shape.len(), 1)?)?;
    add(&scaled, &along_axis(beta, shape.len(), 1)?)
}

// ---------------------------------------------------------------------------
// Linear algebra

pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    let value = kernels::matmul(a.value(), b.value())?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    Ok(Var::record(
        &[a, b],
        value,
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let bt = kernels::permute(&bv, &[1, 0]).expect("rank 2");
                kernels::matmul(g, &bt).expect("shapes checked in forward")
            });
            let gb = needs[1].then(|| {
                let at = kernels::permute(&av, &[1, 0]).expect("rank 2");
                kernels::matmul(&at, g).expect("shapes checked in forward")
            });
            vec![ga, gb]
        }),
    ))
}

pub fn bmm(a: &Var, b: &Var) -> Result<Var> {
    let value = kernels::bmm(a.value(), b.value())?;
    let (av, bv) = (a.value().clone(), b.value().clone());
    Ok(Var::record(
        &[a, b],
        value,
        Box::new(move |g, needs| {
            let ga = needs[0].then(|| {
                let bt = kernels::permute(&bv, &[0, 2, 1]).expect("rank 3");
                kernels::bmm(g, &bt).expect("shapes checked in forward")
            });
            let gb = needs[1].then(|| {
                let at = kernels::permute(&av, &[0, 2, 1]).expect("rank 3");
                kernels::bmm(&at, g).expect("shapes checked in forward")
            });
            vec![ga, gb]
        }),
    ))
}

/// `x · w + b` over the last axis of `x`; `w` is `(in, out)`, `b` is `(out)`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let shape = x.shape().to_vec();
    let Some(&d_in) = shape.last() else {
        return Err(Error::shape("linear", "scalar input"));
    };
    if w.value().rank() != 2 || w.shape()[0] != d_in {
        return Err(Error::shape(
            "linear",
            format!("input {shape:?} vs weight {:?}", w.shape()),
        ));
    }
    let d_out = w.shape()[1];
    let rows = x.value().numel() / d_in.max(1);
    let mut y = matmul(&reshape(x, [rows, d_in])?, w)?;
    if let Some(b) = b {
        y = add(&y, &along_axis(b, 2, 1)?)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("nonempty") = d_out;
    reshape(&y, out_shape)
}

// ---------------------------------------------------------------------------
// Shape manipulation

pub fn reshape(x: &Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
    let value = x.value().reshape(shape)?;
    let original = x.shape().to_vec();
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| vec![some(g.reshape(original.clone()).expect("same numel"))]),
    ))
}

pub fn permute(x: &Var, axes: &[usize]) -> Result<Var> {
    let value = kernels::permute(x.value(), axes)?;
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| vec![some(kernels::permute(g, &inverse).expect("valid permutation"))]),
    ))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat(xs: &[&Var], axis: usize) -> Result<Var> {
    let Some(first) = xs.first() else {
        return Err(Error::Empty("concat inputs"));
    };
    check_axis("concat", first.value(), axis)?;
    let base = first.shape().to_vec();
    for x in xs {
        let s = x.shape();
        let ok = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
        }
    }
    let lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = axis_split(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (x, &len) in xs.iter().zip(&lens) {
            out.extend_from_slice(&x.value().data()[o * len * inner..][..len * inner]);
        }
    }
    let value = Tensor::from_parts(out_shape, out);
    let shapes: Vec<Vec<usize>> = xs.iter().map(|x| x.shape().to_vec()).collect();
    Ok(Var::record(
        xs,
        value,
        Box::new(move |g, needs| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            for o in 0..outer {
                let mut start = o * total * inner;
                for (gi, &len) in grads.iter_mut().zip(&lens) {
                    gi.extend_from_slice(&g.data()[start..][..len * inner]);
                    start += len * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((d, s), &need)| need.then(|| Tensor::from_parts(s.clone(), d)))
                .collect()
        }),
    ))
}

/// The slice `start..start + len` along `axis`.
pub fn narrow(x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    check_axis("narrow", x.value(), axis)?;
    let shape = x.shape().to_vec();
    if start + len > shape[axis] {
        return Err(Error::shape(
            "narrow",
            format!("{start}..{} exceeds axis {axis} of {shape:?}", start + len),
        ));
    }
    let (outer, full, inner) = axis_split(&shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        out.extend_from_slice(&x.value().data()[(o * full + start) * inner..][..len * inner]);
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    Ok(Var::record(
        &[x],
        Tensor::from_parts(out_shape, out),
        Box::new(move |g, _| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..][..len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
            }
            vec![some(Tensor::from_parts(shape.clone(), gx))]
        }),
    ))
}

/// Reverses the listed spatial axes of an `(N, C, H, W, D)` tensor.
/// Axis numbers are absolute and must be 2, 3 or 4.
pub fn flip(x: &Var, axes: &[usize]) -> Result<Var> {
    if let Some(&bad) = axes.iter().find(|&&a| !(2..5).contains(&a) || a >= x.value().rank()) {
        return Err(Error::InvalidAxis {
            op: "flip",
            axis: bad,
            rank: x.value().rank(),
        });
    }
    let value = kernels::flip(x.value(), axes)?;
    let axes = axes.to_vec();
    Ok(Var::record(
        &[x],
        value,
        Box::new(move |g, _| vec![some(kernels::flip(g, &axes).expect("axes checked"))]),
    ))
}

// ---------------------------------------------------------------------------
// Convolutions

pub fn conv3d(x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
    let value = kernels::conv3d(x.value(), w.value(), b.map(Var::value), spec)?;
    let (xv, wv, spec) = (x.value().clone(), w.value().clone(), *spec);
    let inputs: Vec<&Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(Var::record(
        &inputs,
        value,
        Box::new(move |g, needs| {
            let (gx, gw) = kernels::conv3d_backward(&xv, &wv, g, &spec, needs[0], needs[1]);
            let mut out = vec![gx, gw];
            if needs.len() == 3 {
                out.push(needs[2].then(|| kernels::channel_sums(g)));
            }
            out
        }),
    ))
}

pub fn conv_transpose3d(x: &Var, w: &Var, b: Option<&Var>, spec: &ConvSpec) -> Result<Var> {
    let value = kernels::conv_transpose3d(x.value(), w.value(), b.map(Var::value), spec)?;
    let (xv, wv, spec) = (x.value().clone(), w.value().clone(), *spec);
    let inputs: Vec<&Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
    Ok(Var::record(
        &inputs,
        value,
        Box::new(move |g, needs| {
            let (gx, gw) = kernels::conv_transpose3d_backward(&xv, &wv, g, &spec, needs[0], needs[1]);
            let mut out = vec![gx, gw];
            if needs.len() == 3 {
                out.push(needs[2].then(|| kernels::channel_sums(g)));
            }
            out
        }),
    ))
}
