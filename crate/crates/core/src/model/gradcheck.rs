//! Finite-difference check of whole-model parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BiTrUnet, ModelConfig};
use crate::error::Result;
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{ops, Tensor, Var};

#[derive(Clone, Debug)]
pub struct ModelGradReport {
    pub coordinates: usize,
    pub tensors: usize,
    /// `‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞)` over the sampled coordinates.
    pub max_rel_error: f64,
    /// Worst single-coordinate deviation, for diagnostics.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Coordinates re-measured with a smaller step because the one-sided
    /// differences disagreed (a ReLU or max-pool kink inside `±h`).
    pub refined: usize,
}

/// Step refinements tried when a kink is detected.
const MAX_REFINE: usize = 3;

/// Tiny model with `in_channels` 2 on a 16³ grid, the input used by the
/// gradient suite.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig::tiny(2, [16, 16, 16])
}

/// Compares tape gradients of `Σ model(x) ⊙ r` against central differences
/// at `samples` parameter coordinates, at least one per parameter tensor.
pub fn model_gradcheck(config: ModelConfig, samples: usize, seed: u64, h: f64) -> Result<ModelGradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = BiTrUnet::new(config.clone(), seed)?;
    let [a, b, c] = config.input_size;
    let x = Tensor::randn([1, config.in_channels, a, b, c], 1.0, &mut rng);
    let r = Tensor::randn([1, config.num_classes, a, b, c], 1.0, &mut rng);

    let (_, params) = model.bind_for_training();
    let out = model.forward_vars(&params, &Var::constant(x.clone()))?;
    ops::sum(&ops::mul(&out, &Var::constant(r.clone()))?).backward()?;
    let grads: Vec<Tensor> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let n_tensors = grads.len();
    let mut coords: Vec<(usize, usize)> = (0..n_tensors).map(|t| (t, rng.random_range(0..grads[t].numel()))).collect();
    while coords.len() < samples {
        let t = rng.random_range(0..n_tensors);
        coords.push((t, rng.random_range(0..grads[t].numel())));
    }

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst: Option<(String, usize, f64, f64)> = None;
    let mut refined = 0;
    for &(t, i) in &coords {
        let id = model.params().id(&names[t]).expect("registered");
        let orig = model.params().get(id).data()[i];
        let mut eval = |v: f64| -> Result<f64> {
            model.params_mut().get_mut(id).data_mut()[i] = v;
            Ok(model.forward(&x)?.dot(&r))
        };
        let centre = eval(orig)?;
        let mut step = h;
        let mut fd;
        let mut tries = 0;
        loop {
            let (plus, minus) = (eval(orig + step)?, eval(orig - step)?);
            fd = (plus - minus) / (2.0 * step);
            let (fwd, bwd) = ((plus - centre) / step, (centre - minus) / step);
            let smooth = (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()).max(1.0);
            if smooth || tries == MAX_REFINE {
                break;
            }
            tries += 1;
            step /= 10.0;
        }
        refined += usize::from(tries > 0);
        model.params_mut().get_mut(id).data_mut()[i] = orig;
        let g = grads[t].data()[i];
        if worst.as_ref().is_none_or(|w| (w.2 - w.3).abs() < (g - fd).abs()) {
            worst = Some((names[t].clone(), i, g, fd));
        }
        analytic.push(g);
        numeric.push(fd);
    }
    let n = analytic.len();
    let err = relative_error(&Tensor::new([n], analytic)?, &Tensor::new([n], numeric)?);
    Ok(ModelGradReport {
        coordinates: n,
        tensors: n_tensors,
        max_rel_error: err,
        worst,
        refined,
    })
}
