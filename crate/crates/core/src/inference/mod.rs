//! Flip test-time augmentation, majority-vote ensembling and volume-threshold
//! postprocessing.

mod postprocess;
mod probs;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::BiTrUnet;
use crate::tensor::{kernels, Tensor};
use crate::volume::{numel, Padding, ProbabilityMap, SegmentationMask};

pub use postprocess::{components, volume_threshold_postprocess, PostprocConfig, Strategy, ThresholdMode};
pub use probs::{read_probs, sidecar_path, write_probs};

/// Which spatial axes (H, W, D) to reverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FlipCombo {
    pub h: bool,
    pub w: bool,
    pub d: bool,
}

impl FlipCombo {
    pub const IDENTITY: FlipCombo = FlipCombo { h: false, w: false, d: false };

    /// The eight combinations, identity first, as a 3-bit count over (h, w, d).
    pub fn all() -> [FlipCombo; 8] {
        std::array::from_fn(|i| FlipCombo {
            h: i & 4 != 0,
            w: i & 2 != 0,
            d: i & 1 != 0,
        })
    }

    pub fn axes(self) -> [bool; 3] {
        [self.h, self.w, self.d]
    }

    /// Reverses the flagged axes among the last three of `x`.
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        let r = x.rank();
        if r < 3 {
            return Err(Error::shape("flip", format!("need at least 3 axes, got {:?}", x.shape())));
        }
        let axes: Vec<usize> = (0..3).filter(|&a| self.axes()[a]).map(|a| r - 3 + a).collect();
        if axes.is_empty() {
            return Ok(x.clone());
        }
        kernels::flip(x, &axes)
    }
}

/// A network that maps `(1, C, H, W, D)` inputs to `(1, K, H, W, D)` class
/// scores.
pub trait Segmenter: Sync {
    fn num_classes(&self) -> usize;

    /// Fixed spatial size the network accepts, if any.
    fn input_size(&self) -> Option<[usize; 3]>;

    fn scores(&self, x: &Tensor) -> Result<Tensor>;
}

impl Segmenter for BiTrUnet {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn input_size(&self) -> Option<[usize; 3]> {
        Some(self.config().input_size)
    }

    fn scores(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(Error::shape("predict", format!("expected (C, H, W, D), got {:?}", x.shape())));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(shape)
}

fn probabilities(model: &dyn Segmenter, x: &Tensor) -> Result<Tensor> {
    let scores = model.scores(x)?;
    let s = scores.shape();
    if s.len() != 5 || s[0] != 1 || s[1] != model.num_classes() || s[2..] != x.shape()[2..] {
        return Err(Error::shape(
            "predict",
            format!("model returned {s:?} for input {:?}", x.shape()),
        ));
    }
    kernels::softmax(&scores, 1)
}

fn into_map(p: Tensor) -> Result<ProbabilityMap> {
    let s = p.shape()[1..].to_vec();
    ProbabilityMap::new(p.reshape(s)?)
}

/// Softmax of one forward pass over a `(C, H, W, D)` volume.
pub fn predict(model: &dyn Segmenter, x: &Tensor) -> Result<ProbabilityMap> {
    into_map(probabilities(model, &batched(x)?)?)
}

/// Mean over the eight flip combinations of the un-flipped softmax maps.
pub fn tta_predict(model: &dyn Segmenter, x: &Tensor) -> Result<ProbabilityMap> {
    let x = batched(x)?;
    let maps = FlipCombo::all()
        .par_iter()
        .map(|&combo| combo.apply(&probabilities(model, &combo.apply(&x)?)?))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0.0; maps[0].numel()];
    for m in &maps {
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    into_map(Tensor::new(maps[0].shape().to_vec(), acc)?)
}

/// Per-voxel majority vote over `masks`. A tie in vote count goes to the
/// tied label with the largest mean probability across `probs`, then to the
/// lowest label.
pub fn majority_vote(masks: &[SegmentationMask], probs: &[ProbabilityMap]) -> Result<SegmentationMask> {
    let Some(first) = masks.first() else {
        return Err(Error::Empty("model list"));
    };
    if probs.len() != masks.len() {
        return Err(Error::shape(
            "majority_vote",
            format!("{} masks but {} probability maps", masks.len(), probs.len()),
        ));
    }
    let dims = first.dims();
    let k = probs[0].classes();
    for (i, (m, p)) in masks.iter().zip(probs).enumerate() {
        if m.dims() != dims || p.dims() != dims || p.classes() != k {
            return Err(Error::shape(
                "majority_vote",
                format!(
                    "model {i}: mask {:?} and probabilities {:?}, expected grid {dims:?} with {k} classes",
                    m.dims(),
                    p.tensor().shape()
                ),
            ));
        }
        m.check_classes(k)?;
    }
    let n = masks.len() as f64;
    let mut votes = vec![0usize; k];
    let data = (0..numel(dims))
        .map(|j| {
            votes.iter_mut().for_each(|v| *v = 0);
            for m in masks {
                votes[m.data()[j] as usize] += 1;
            }
            let top = *votes.iter().max().expect("k > 0");
            let tied: Vec<usize> = (0..k).filter(|&c| votes[c] == top).collect();
            if tied.len() == 1 {
                return tied[0] as u8;
            }
            let mut best = tied[0];
            let mut best_p = f64::NEG_INFINITY;
            for &c in &tied {
                let mean = probs.iter().map(|p| p.get(c, j)).sum::<f64>() / n;
                if mean > best_p {
                    best = c;
                    best_p = mean;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(dims, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub tta: bool,
    pub postproc: PostprocConfig,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            tta: true,
            postproc: PostprocConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    /// External labels {0, 1, 2, 4}.
    pub mask: SegmentationMask,
    /// One map per model on the original grid.
    pub probs: Vec<ProbabilityMap>,
}

/// Per model: pad to its input size, predict, crop back. Then vote,
/// postprocess and convert to external labels.
pub fn predict_case(models: &[&dyn Segmenter], x: &Tensor, cfg: &PredictConfig) -> Result<Prediction> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    if x.rank() != 4 {
        return Err(Error::shape("predict_case", format!("expected (C, H, W, D), got {:?}", x.shape())));
    }
    let dims = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut probs = Vec::with_capacity(models.len());
    for &model in models {
        let padding = match model.input_size() {
            Some(size) => Padding::new(dims, size)?,
            None => Padding::to_multiple(dims, 16),
        };
        let padded = padding.pad(x)?;
        let p = if cfg.tta { tta_predict(model, &padded)? } else { predict(model, &padded)? };
        probs.push(ProbabilityMap::new(padding.unpad(p.tensor())?)?);
    }
    let masks: Vec<SegmentationMask> = probs.iter().map(ProbabilityMap::argmax).collect();
    let voted = majority_vote(&masks, &probs)?;
    let mask = volume_threshold_postprocess(&voted, &cfg.postproc)?.to_external()?;
    Ok(Prediction { mask, probs })
}
