//! Optimization: loss, Adam, polynomial learning-rate decay, augmentation
//! and the training loop.

pub mod config;
pub mod synthetic;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{BiTrUnet, ParamStore};
use crate::tensor::{ops, Tensor, Var};
use crate::volume::{crop_grid, Padding, SegmentationMask};

pub use config::TrainConfig;

// ---------------------------------------------------------------------------
// Learning-rate schedule

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_iters: usize,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(total_iters: usize) -> Self {
        Self {
            base_lr: 2e-4,
            total_iters,
            power: 0.9,
        }
    }
}

/// `base_lr · (1 − iter/total)^power`, defined for `0 ≤ iter ≤ total`.
pub fn poly_lr(iter: usize, schedule: &LrSchedule) -> Result<f64> {
    let total = schedule.total_iters;
    if iter > total {
        return Err(Error::IterOutOfRange { iter, total });
    }
    if total == 0 {
        return Ok(schedule.base_lr);
    }
    let remaining = (total - iter) as f64 / total as f64;
    Ok(schedule.base_lr * remaining.powf(schedule.power))
}

// ---------------------------------------------------------------------------
// Adam

/// Bias-corrected Adam state for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update with `grads` aligned to the store's parameter order.
    /// Nothing is modified if a gradient is missing or misshapen.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients and {} moments for {} parameters", grads.len(), self.m.len(), params.len()),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            match g {
                None => return Err(Error::MissingGrad(name.to_string())),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter().flatten())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityAugment {
    pub enabled: bool,
    /// δ ~ U[−shift, shift].
    pub shift: f64,
    /// s ~ U[1 − scale, 1 + scale].
    pub scale: f64,
}

impl Default for IntensityAugment {
    fn default() -> Self {
        Self {
            enabled: true,
            shift: 0.1,
            scale: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: [usize; 3],
    pub intensity: IntensityAugment,
}

impl AugmentConfig {
    pub fn new(crop: [usize; 3]) -> Self {
        Self {
            crop,
            intensity: IntensityAugment::default(),
        }
    }
}

/// Random crop of a `(C, H, W, D)` image and its label with shared offsets,
/// then per-channel `v·s + δ`.
pub fn augment(
    image: &Tensor,
    label: &SegmentationMask,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor, SegmentationMask)> {
    let s = image.shape();
    if s.len() != 4 || s[1..] != label.dims() {
        return Err(Error::shape(
            "augment",
            format!("image {s:?} and label grid {:?} disagree", label.dims()),
        ));
    }
    let dims = label.dims();
    let crop = cfg.crop;
    if (0..3).any(|a| crop[a] > dims[a] || crop[a] == 0) {
        return Err(Error::shape("augment", format!("crop {crop:?} does not fit volume {dims:?}")));
    }
    let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=dims[a] - crop[a]));
    let channels = s[0];
    let mut data = crop_grid(image.data(), dims, channels, offset, crop)?;
    if cfg.intensity.enabled {
        let voxels = crop.iter().product::<usize>();
        let IntensityAugment { shift, scale, .. } = cfg.intensity;
        for c in 0..channels {
            let s = rng.random_range(1.0 - scale..=1.0 + scale);
            let d = rng.random_range(-shift..=shift);
            for v in &mut data[c * voxels..(c + 1) * voxels] {
                *v = *v * s + d;
            }
        }
    }
    Ok((
        Tensor::new([channels, crop[0], crop[1], crop[2]], data)?,
        label.crop(offset, crop)?,
    ))
}

// ---------------------------------------------------------------------------
// Loss

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Smoothing added to numerator and denominator of each class Dice.
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            dice_weight: 1.0,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ce_weight < 0.0 || self.dice_weight < 0.0 || self.ce_weight + self.dice_weight == 0.0 {
            return Err(Error::Config("loss weights must be nonnegative and not both zero".into()));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config("dice_eps must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable loss and its detached parts.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: Var,
    pub ce: f64,
    /// `1 − mean foreground soft Dice`.
    pub dice_loss: f64,
}

impl LossValue {
    pub fn soft_dice(&self) -> f64 {
        1.0 - self.dice_loss
    }
}

/// One-hot `(N, K, H, W, D)` encoding of `N` masks.
pub fn one_hot(targets: &[&SegmentationMask], classes: usize) -> Result<Tensor> {
    let Some(first) = targets.first() else {
        return Err(Error::Empty("targets"));
    };
    let dims = first.dims();
    let voxels: usize = dims.iter().product();
    let mut data = vec![0.0; targets.len() * classes * voxels];
    for (n, t) in targets.iter().enumerate() {
        if t.dims() != dims {
            return Err(Error::shape("one_hot", format!("target grids {dims:?} and {:?}", t.dims())));
        }
        t.check_classes(classes)?;
        for (j, &label) in t.data().iter().enumerate() {
            data[(n * classes + label as usize) * voxels + j] = 1.0;
        }
    }
    Tensor::new([targets.len(), classes, dims[0], dims[1], dims[2]], data)
}

/// `w_ce · CE + w_dice · (1 − mean soft Dice over classes 1..K)` on raw
/// scores `(N, K, H, W, D)`.
pub fn loss(scores: &Var, targets: &[&SegmentationMask], cfg: &LossConfig) -> Result<LossValue> {
    let s = scores.shape().to_vec();
    if s.len() != 5 || s[1] < 2 || s[0] != targets.len() {
        return Err(Error::shape(
            "loss",
            format!("scores {s:?} for {} targets; need (N, K ≥ 2, H, W, D)", targets.len()),
        ));
    }
    let (n, k) = (s[0], s[1]);
    let voxels: usize = s[2..].iter().product();
    let y = one_hot(targets, k)?;
    if y.shape() != s.as_slice() {
        return Err(Error::shape("loss", format!("targets {:?} vs scores {s:?}", y.shape())));
    }
    let y = Var::constant(y);

    let log_p = ops::log_softmax(scores, 1)?;
    let ce = ops::scale(&ops::sum(&ops::mul(&log_p, &y)?), -1.0 / (n * voxels) as f64);

    let per_class = |v: &Var| -> Result<Var> {
        let flat = ops::reshape(v, [n, k, voxels])?;
        let summed = ops::sum_axis(&ops::sum_axis(&flat, 2)?, 0)?;
        ops::narrow(&ops::reshape(&summed, [k])?, 0, 1, k - 1)
    };
    let p = ops::softmax(scores, 1)?;
    let eps = cfg.dice_eps;
    let intersection = per_class(&ops::mul(&p, &y)?)?;
    let denominator = ops::add_scalar(&ops::add(&per_class(&p)?, &per_class(&y)?)?, eps);
    let dice = ops::div(&ops::add_scalar(&ops::scale(&intersection, 2.0), eps), &denominator)?;
    let dice_loss = ops::add_scalar(&ops::scale(&ops::mean(&dice), -1.0), 1.0);

    let total = ops::add(&ops::scale(&ce, cfg.ce_weight), &ops::scale(&dice_loss, cfg.dice_weight))?;
    Ok(LossValue {
        ce: ce.value().data()[0],
        dice_loss: dice_loss.value().data()[0],
        total,
    })
}

// ---------------------------------------------------------------------------
// Training loop

/// One training case: a `(C, H, W, D)` image and internal-label mask.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub label: SegmentationMask,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub dice: f64,
}

impl LossRecord {
    pub const TSV_HEADER: &'static str = "iter\tlr\tloss\tce\tdice_loss";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{:e}\t{:.9}\t{:.9}\t{:.9}", self.iter, self.lr, self.total, self.ce, self.dice)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn total_iters(&self) -> usize {
        self.records.len()
    }
}

/// Optimizer steps per epoch: each step consumes `batch_size × accumulation`
/// samples, the last one possibly fewer.
pub fn steps_per_epoch(samples: usize, cfg: &TrainConfig) -> usize {
    samples.div_ceil(cfg.batch_size * cfg.accumulation)
}

fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iter:06}.btru"))
}

fn write_file<T>(path: &Path, f: impl FnOnce() -> std::io::Result<T>) -> Result<T> {
    f().map_err(|e| Error::io(path, e))
}

/// Trains `model` in place. With `out_dir`, writes `loss.tsv` and
/// checkpoints (initial, every `checkpoint_every` steps, final).
pub fn train_loop(model: &mut BiTrUnet, data: &[Sample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    cfg.validate()?;
    let classes = model.config().num_classes;
    let crop = model.config().input_size;
    for s in data {
        s.label.check_classes(classes)?;
        if s.image.shape().first() != Some(&model.config().in_channels) {
            return Err(Error::shape(
                "train_loop",
                format!("image {:?} does not have {} channels", s.image.shape(), model.config().in_channels),
            ));
        }
    }
    let padded: Vec<Sample> = data
        .iter()
        .map(|s| {
            let dims = s.label.dims();
            let pad = Padding::new(dims, std::array::from_fn(|a| dims[a].max(crop[a])))?;
            Ok(Sample {
                image: pad.pad(&s.image)?,
                label: pad.pad_mask(&s.label)?,
            })
        })
        .collect::<Result<_>>()?;

    let per_epoch = steps_per_epoch(data.len(), cfg);
    let schedule = LrSchedule {
        base_lr: cfg.base_lr,
        total_iters: cfg.epochs * per_epoch,
        power: cfg.lr_power,
    };
    let augment_cfg = AugmentConfig {
        crop,
        intensity: cfg.intensity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params());
    let mut report = TrainReport::default();

    let mut log = match out_dir {
        Some(dir) => {
            write_file(dir, || fs::create_dir_all(dir))?;
            let path = dir.join("loss.tsv");
            let mut w = BufWriter::new(write_file(&path, || File::create(&path))?);
            write_file(&path, || writeln!(w, "{}", LossRecord::TSV_HEADER))?;
            Some((w, path))
        }
        None => None,
    };
    let save = |model: &BiTrUnet, iter: usize, report: &mut TrainReport| -> Result<()> {
        if let Some(dir) = out_dir {
            let path = checkpoint_path(dir, iter);
            save_checkpoint(model, &path)?;
            report.checkpoints.push(path);
        }
        Ok(())
    };
    save(model, 0, &mut report)?;

    let mut iter = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..padded.len()).collect();
        order.shuffle(&mut rng);
        for step in order.chunks(cfg.batch_size * cfg.accumulation) {
            let lr = poly_lr(iter, &schedule)?;
            let micro: Vec<&[usize]> = step.chunks(cfg.batch_size).collect();
            let weight = 1.0 / micro.len() as f64;
            let mut grads: Vec<Option<Tensor>> = vec![None; model.params().len()];
            let (mut total, mut ce, mut dice) = (0.0, 0.0, 0.0);
            for batch in micro {
                let mut images = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (img, lab) = augment(&padded[i].image, &padded[i].label, &augment_cfg, &mut rng)?;
                    images.push(Var::constant(img));
                    labels.push(lab);
                }
                let refs: Vec<&Var> = images.iter().collect();
                let stacked = ops::concat(&refs, 0)?;
                let c = stacked.shape()[0] / batch.len();
                let x = ops::reshape(&stacked, [batch.len(), c, crop[0], crop[1], crop[2]])?;

                let (_, params) = model.bind_for_training();
                let scores = model.forward_vars(&params, &x)?;
                let label_refs: Vec<&SegmentationMask> = labels.iter().collect();
                let value = loss(&scores, &label_refs, &cfg.loss)?;
                ops::scale(&value.total, weight).backward()?;
                for (slot, p) in grads.iter_mut().zip(&params) {
                    if let Some(g) = p.grad() {
                        *slot = Some(match slot.take() {
                            Some(acc) => acc.zip_map(&g, |a, b| a + b)?,
                            None => g,
                        });
                    }
                }
                total += weight * value.total.value().data()[0];
                ce += weight * value.ce;
                dice += weight * value.dice_loss;
            }
            adam.step(model.params_mut(), &grads, lr)?;
            model.apply_precision();
            let record = LossRecord { iter, lr, total, ce, dice };
            if let Some((w, path)) = log.as_mut() {
                write_file(path, || writeln!(w, "{}", record.to_tsv()))?;
            }
            report.records.push(record);
            iter += 1;
            if cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0 && iter != schedule.total_iters {
                save(model, iter, &mut report)?;
            }
        }
    }
    if iter > 0 {
        save(model, iter, &mut report)?;
    }
    if let Some((mut w, path)) = log {
        write_file(&path, || w.flush())?;
    }
    Ok(report)
}

/// Soft Dice of `model` on a full sample (the crop must equal the model's
/// input size), averaged over foreground classes.
pub fn evaluate_soft_dice(model: &BiTrUnet, sample: &Sample) -> Result<f64> {
    let s = sample.image.shape();
    let x = sample.image.reshape([1, s[0], s[1], s[2], s[3]])?;
    let scores = Var::constant(model.forward(&x)?);
    let value = loss(&scores, &[&sample.label], &LossConfig::default())?;
    Ok(value.soft_dice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{finite_difference_grad, relative_error};
    use crate::tensor::Tape;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(1000);
        assert_eq!(poly_lr(0, &s).unwrap(), 2e-4);
        assert_eq!(poly_lr(1000, &s).unwrap(), 0.0);
        assert!((poly_lr(500, &s).unwrap() - 1.0718e-4).abs() < 1e-8);
        assert!(matches!(poly_lr(1001, &s), Err(Error::IterOutOfRange { .. })));
    }

    fn scalar_store(v: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.register("p", Tensor::scalar(v));
        store
    }

    #[test]
    fn adam_single_step_by_hand() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &[Some(Tensor::scalar(1.0))], 0.1).unwrap();
        let p = store.by_name("p").unwrap().data()[0];
        assert!((p - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop_and_counts() {
        let mut store = scalar_store(0.37);
        let mut adam = Adam::new(&store);
        for _ in 0..5 {
            adam.step(&mut store, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        }
        assert_eq!(store.by_name("p").unwrap().data()[0], 0.37);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn adam_missing_grad_names_parameter() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store);
        match adam.step(&mut store, &[None], 0.1) {
            Err(Error::MissingGrad(name)) => assert_eq!(name, "p"),
            other => panic!("{other:?}"),
        }
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store);
        for _ in 0..500 {
            let p = store.by_name("p").unwrap().data()[0];
            adam.step(&mut store, &[Some(Tensor::scalar(2.0 * p))], 0.05).unwrap();
        }
        assert!(store.by_name("p").unwrap().data()[0].abs() < 1e-2);
    }

    fn toy_case(rng: &mut ChaCha8Rng) -> (Tensor, SegmentationMask) {
        let image = Tensor::randn([2, 6, 5, 4], 1.0, rng);
        let label = SegmentationMask::new([6, 5, 4], (0..120).map(|i| (i % 7 % 4) as u8).collect()).unwrap();
        (image, label)
    }

    #[test]
    fn full_crop_without_intensity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (image, label) = toy_case(&mut rng);
        let cfg = AugmentConfig {
            crop: [6, 5, 4],
            intensity: IntensityAugment {
                enabled: false,
                ..Default::default()
            },
        };
        let (i2, l2) = augment(&image, &label, &cfg, &mut rng).unwrap();
        assert_eq!((i2, l2), (image, label));
    }

    #[test]
    fn augment_is_seeded_and_keeps_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (image, label) = toy_case(&mut rng);
        let cfg = AugmentConfig::new([6, 5, 4]);
        let a = augment(&image, &label, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&image, &label, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.histogram(), label.histogram());
        assert_ne!(a.0, image);
        let small = AugmentConfig::new([3, 3, 2]);
        let (ci, cl) = augment(&image, &label, &small, &mut rng).unwrap();
        assert_eq!(ci.shape(), &[2, 3, 3, 2]);
        assert_eq!(cl.dims(), [3, 3, 2]);
        assert!(augment(&image, &label, &AugmentConfig::new([7, 5, 4]), &mut rng).is_err());
    }

    #[test]
    fn uniform_scores_give_ln_k() {
        let target = SegmentationMask::new([2, 2, 2], vec![0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let scores = Var::constant(Tensor::zeros([1, 4, 2, 2, 2]));
        let v = loss(&scores, &[&target], &LossConfig::default()).unwrap();
        assert!((v.ce - 4f64.ln()).abs() < 1e-12);
        let d = (2.0 * 0.5 + 1e-5) / (2.0 + 2.0 + 1e-5);
        assert!((v.dice_loss - (1.0 - d)).abs() < 1e-12);
    }

    #[test]
    fn peaked_scores_give_small_loss() {
        let target = SegmentationMask::new([2, 2, 2], vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        let scores = one_hot(&[&target], 4).unwrap().map(|v| 30.0 * v);
        let v = loss(&Var::constant(scores), &[&target], &LossConfig::default()).unwrap();
        assert!(v.total.value().data()[0] < 0.01 && v.total.value().data()[0] >= 0.0);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let target = SegmentationMask::new([1, 1, 2], vec![0, 5]).unwrap();
        let scores = Var::constant(Tensor::zeros([1, 4, 1, 1, 2]));
        assert!(matches!(
            loss(&scores, &[&target], &LossConfig::default()),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = SegmentationMask::new([2, 2, 2], vec![0, 1, 2, 3, 1, 1, 0, 2]).unwrap();
        let x = Tensor::randn([1, 4, 2, 2, 2], 1.0, &mut rng);
        let cfg = LossConfig::default();
        let tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        loss(&leaf, &[&target], &cfg).unwrap().total.backward().unwrap();
        let numeric = finite_difference_grad(
            |t| loss(&Var::constant(t.clone()), &[&target], &cfg).unwrap().total.value().data()[0],
            &x,
            1e-5,
        );
        assert!(relative_error(&leaf.grad().unwrap(), &numeric) < 1e-4);
    }
}
