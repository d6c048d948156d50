//! Central finite differences and the per-op gradient suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::ConvSpec;
use super::{ops, Tape, Tensor, Var};
use crate::error::Result;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i` of `x`.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale < 1e-12 {
        return analytic.max_abs_diff(numeric);
    }
    analytic.max_abs_diff(numeric) / scale
}

/// Scalar relative error with the same vanishing-scale convention.
pub fn scalar_relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-12 {
        return (analytic - numeric).abs();
    }
    (analytic - numeric).abs() / scale
}

type OpFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

/// One randomized op instance: inputs and the op applied to them.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub op: OpFn,
}

/// Worst-case result over all instances of one op.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// Compares tape gradients against finite differences for `loss = Σ op(x) ⊙ r`.
pub fn check_case(case: &OpCase, rng: &mut impl Rng, h: f64) -> Result<f64> {
    let probe = (case.op)(&case.inputs.iter().cloned().map(Var::constant).collect::<Vec<_>>())?;
    let weights = Tensor::randn(probe.shape().to_vec(), 1.0, rng);

    let tape = Tape::new();
    let leaves: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.op)(&leaves)?;
    let loss = ops::sum(&ops::mul(&out, &Var::constant(weights.clone()))?);
    loss.backward()?;

    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
        let f = |xi: &Tensor| {
            let vars: Vec<Var> = case
                .inputs
                .iter()
                .enumerate()
                .map(|(j, t)| Var::constant(if j == i { xi.clone() } else { t.clone() }))
                .collect();
            (case.op)(&vars).map(|y| y.value().dot(&weights)).unwrap_or(f64::NAN)
        };
        let numeric = finite_difference_grad(f, &case.inputs[i], h);
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Normal samples pushed at least `gap` away from zero (kinks, poles).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Distinct values with spacing far above the finite-difference step.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let jitter: Vec<f64> = (0..n).map(|_| rng.random_range(-0.02..0.02)).collect();
    Tensor::from_fn(shape.to_vec(), |i| (order[i] as f64 - n as f64 / 2.0) * 0.1 + jitter[i])
}

type CaseBuilder = fn(&mut ChaCha8Rng) -> OpCase;

fn case(inputs: Vec<Tensor>, op: impl Fn(&[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        inputs,
        op: Box::new(op),
    }
}

/// Every differentiable op with a randomized instance generator.
pub fn op_catalog() -> Vec<(&'static str, CaseBuilder)> {
    vec![
        ("add_broadcast", |r| case(vec![randn(r, &[2, 3, 4]), randn(r, &[1, 3, 1])], |v| ops::add(&v[0], &v[1]))),
        ("sub", |r| case(vec![randn(r, &[3, 4]), randn(r, &[3, 4])], |v| ops::sub(&v[0], &v[1]))),
        ("mul_channel_map", |r| {
            case(vec![randn(r, &[1, 3, 2, 2, 2]), randn(r, &[1, 3, 1, 1, 1])], |v| ops::mul(&v[0], &v[1]))
        }),
        ("mul_spatial_map", |r| {
            case(vec![randn(r, &[2, 3, 2, 3, 2]), randn(r, &[2, 1, 2, 3, 2])], |v| ops::mul(&v[0], &v[1]))
        }),
        ("div", |r| {
            let b = away_from_zero(r, &[2, 3], 0.5);
            case(vec![randn(r, &[2, 3]), b], |v| ops::div(&v[0], &v[1]))
        }),
        ("scale", |r| {
            let c: f64 = r.random_range(-2.0..2.0);
            case(vec![randn(r, &[5])], move |v| Ok(ops::scale(&v[0], c)))
        }),
        ("relu", |r| case(vec![away_from_zero(r, &[3, 5], 0.05)], |v| Ok(ops::relu(&v[0])))),
        ("sigmoid", |r| case(vec![randn(r, &[3, 5])], |v| Ok(ops::sigmoid(&v[0])))),
        ("gelu", |r| case(vec![randn(r, &[3, 5])], |v| Ok(ops::gelu(&v[0])))),
        ("sum", |r| case(vec![randn(r, &[2, 3])], |v| Ok(ops::sum(&v[0])))),
        ("mean", |r| case(vec![randn(r, &[2, 3])], |v| Ok(ops::mean(&v[0])))),
        ("sum_axis", |r| case(vec![randn(r, &[2, 3, 4])], |v| ops::sum_axis(&v[0], 1))),
        ("mean_axis", |r| case(vec![randn(r, &[2, 3, 4])], |v| ops::mean_axis(&v[0], 2))),
        ("max_axis", |r| case(vec![well_separated(r, &[2, 4, 3])], |v| ops::max_axis(&v[0], 1))),
        ("global_avg_pool", |r| case(vec![randn(r, &[2, 3, 2, 2, 3])], |v| ops::global_avg_pool(&v[0]))),
        ("global_max_pool", |r| {
            case(vec![well_separated(r, &[1, 3, 2, 3, 2])], |v| ops::global_max_pool(&v[0]))
        }),
        ("softmax", |r| case(vec![randn(r, &[2, 4, 3])], |v| ops::softmax(&v[0], 1))),
        ("log_softmax", |r| case(vec![randn(r, &[2, 3, 4])], |v| ops::log_softmax(&v[0], 2))),
        ("layer_norm", |r| {
            case(vec![randn(r, &[3, 6]), randn(r, &[6]), randn(r, &[6])], |v| {
                ops::layer_norm(&v[0], &v[1], &v[2], 1e-5)
            })
        }),
        ("group_norm", |r| {
            case(vec![randn(r, &[2, 4, 2, 2, 2]), randn(r, &[4]), randn(r, &[4])], |v| {
                ops::group_norm(&v[0], 2, &v[1], &v[2], 1e-5)
            })
        }),
        ("matmul", |r| case(vec![randn(r, &[4, 5]), randn(r, &[5, 3])], |v| ops::matmul(&v[0], &v[1]))),
        ("bmm", |r| case(vec![randn(r, &[2, 3, 4]), randn(r, &[2, 4, 2])], |v| ops::bmm(&v[0], &v[1]))),
        ("linear", |r| {
            case(vec![randn(r, &[2, 3, 4]), randn(r, &[4, 5]), randn(r, &[5])], |v| {
                ops::linear(&v[0], &v[1], Some(&v[2]))
            })
        }),
        ("permute", |r| case(vec![randn(r, &[2, 3, 4])], |v| ops::permute(&v[0], &[2, 0, 1]))),
        ("reshape", |r| case(vec![randn(r, &[2, 6])], |v| ops::reshape(&v[0], [3, 4]))),
        ("concat", |r| {
            case(vec![randn(r, &[1, 2, 2, 2, 2]), randn(r, &[1, 3, 2, 2, 2])], |v| ops::concat(&[&v[0], &v[1]], 1))
        }),
        ("narrow", |r| case(vec![randn(r, &[2, 5, 3])], |v| ops::narrow(&v[0], 1, 1, 3))),
        ("flip", |r| case(vec![randn(r, &[1, 2, 3, 2, 4])], |v| ops::flip(&v[0], &[2, 4]))),
        ("conv3d_stride1", |r| {
            let spec = ConvSpec::cube3(2, 3, 1);
            case(vec![randn(r, &[1, 2, 4, 3, 4]), randn(r, &[3, 2, 3, 3, 3]), randn(r, &[3])], move |v| {
                ops::conv3d(&v[0], &v[1], Some(&v[2]), &spec)
            })
        }),
        ("conv3d_stride2", |r| {
            let spec = ConvSpec::cube3(2, 2, 2);
            case(vec![randn(r, &[2, 2, 5, 4, 4]), randn(r, &[2, 2, 3, 3, 3]), randn(r, &[2])], move |v| {
                ops::conv3d(&v[0], &v[1], Some(&v[2]), &spec)
            })
        }),
        ("conv_transpose3d", |r| {
            let spec = ConvSpec::transposed3(3, 2, 2);
            case(vec![randn(r, &[1, 3, 2, 3, 2]), randn(r, &[3, 2, 3, 3, 3]), randn(r, &[2])], move |v| {
                ops::conv_transpose3d(&v[0], &v[1], Some(&v[2]), &spec)
            })
        }),
    ]
}

/// Runs `instances` random cases of every op in [`op_catalog`].
pub fn run_op_suite(instances: usize, seed: u64, h: f64) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, build) in op_catalog() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let c = build(&mut rng);
            worst = worst.max(check_case(&c, &mut rng, h)?);
        }
        reports.push(OpReport {
            name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}
