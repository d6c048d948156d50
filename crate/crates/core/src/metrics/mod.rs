//! BraTS region metrics: Dice, HD95, sensitivity and specificity.

mod distance;
pub mod report;

use crate::error::{Error, Result};
use crate::volume::{numel, SegmentationMask};

pub use distance::{squared_distance_transform, surface};
pub use report::{summarize, CaseMetrics, RegionMetrics, Summary};

/// Overlapping evaluation regions over external labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    /// Whole tumour: {1, 2, 4}.
    Wt,
    /// Tumour core: {1, 4}.
    Tc,
    /// Enhancing tumour: {4}.
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn labels(self) -> &'static [u8] {
        match self {
            Region::Wt => &[1, 2, 4],
            Region::Tc => &[1, 4],
            Region::Et => &[4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        }
    }
}

/// Boolean voxel set over an `(H, W, D)` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    dims: [usize; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if numel(dims) != data.len() {
            return Err(Error::shape(
                "BinaryMask::new",
                format!("grid {dims:?} holds {} voxels, buffer has {}", numel(dims), data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_set(&self) -> bool {
        !self.data.contains(&true)
    }
}

/// Voxels whose external label belongs to `region`.
pub fn region_mask(mask: &SegmentationMask, region: Region) -> BinaryMask {
    let labels = region.labels();
    BinaryMask {
        dims: mask.dims(),
        data: mask.data().iter().map(|v| labels.contains(v)).collect(),
    }
}

fn check_pair(op: &'static str, a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape(op, format!("grids {:?} and {:?}", a.dims, b.dims)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &BinaryMask, truth: &BinaryMask) -> Result<Confusion> {
    check_pair("confusion", pred, truth)?;
    let mut c = Confusion::default();
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2|P∩T| / (|P| + |T|)`; 1 when both are empty.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { (2 * c.tp) as f64 / denom as f64 })
}

/// `TP / (TP + FN)`; 1 when the truth is empty.
pub fn sensitivity(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let denom = c.tp + c.fn_;
    Ok(if denom == 0 { 1.0 } else { c.tp as f64 / denom as f64 })
}

/// `TN / (TN + FP)`; 1 when the truth covers every voxel.
pub fn specificity(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, truth)?;
    let denom = c.tn + c.fp;
    Ok(if denom == 0 { 1.0 } else { c.tn as f64 / denom as f64 })
}

/// HD95 value when exactly one of the two sets is empty.
pub const HD95_SENTINEL: f64 = 373.1287;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Hd95Mode {
    /// Both directed distance sets pooled before taking the percentile.
    #[default]
    Pooled,
    /// Larger of the two directed 95th percentiles.
    MaxDirected,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95Config {
    pub spacing: [f64; 3],
    pub sentinel: f64,
    pub mode: Hd95Mode,
}

impl Default for Hd95Config {
    fn default() -> Self {
        Self {
            spacing: [1.0; 3],
            sentinel: HD95_SENTINEL,
            mode: Hd95Mode::Pooled,
        }
    }
}

/// Percentile with linear interpolation between order statistics
/// (`q` in `[0, 100]`). `values` must be sorted and nonempty.
pub fn percentile_sorted(values: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Distances from each surface voxel of `from` to the nearest surface voxel
/// of `to`.
fn directed(from: &BinaryMask, to_sdt: &[f64]) -> Vec<f64> {
    from.data
        .iter()
        .zip(to_sdt)
        .filter(|(&on, _)| on)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

pub fn hd95(pred: &BinaryMask, truth: &BinaryMask, cfg: &Hd95Config) -> Result<f64> {
    check_pair("hd95", pred, truth)?;
    match (pred.is_empty_set(), truth.is_empty_set()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(cfg.sentinel),
        _ => {}
    }
    let (sp, st) = (surface(pred), surface(truth));
    let to_truth = squared_distance_transform(&st, cfg.spacing);
    let to_pred = squared_distance_transform(&sp, cfg.spacing);
    let mut ab = directed(&sp, &to_truth);
    let mut ba = directed(&st, &to_pred);
    let sort = |v: &mut Vec<f64>| v.sort_by(f64::total_cmp);
    Ok(match cfg.mode {
        Hd95Mode::Pooled => {
            ab.append(&mut ba);
            sort(&mut ab);
            percentile_sorted(&ab, 95.0)
        }
        Hd95Mode::MaxDirected => {
            sort(&mut ab);
            sort(&mut ba);
            percentile_sorted(&ab, 95.0).max(percentile_sorted(&ba, 95.0))
        }
    })
}

/// All four metrics for every region of an external-label prediction.
pub fn evaluate_case(id: &str, pred: &SegmentationMask, truth: &SegmentationMask, cfg: &Hd95Config) -> Result<CaseMetrics> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(
            "evaluate",
            format!("case {id}: prediction {:?} vs truth {:?}", pred.dims(), truth.dims()),
        ));
    }
    let regions = Region::ALL
        .iter()
        .map(|&r| {
            let (p, t) = (region_mask(pred, r), region_mask(truth, r));
            Ok(RegionMetrics {
                region: r,
                dice: dice(&p, &t)?,
                hd95: hd95(&p, &t, cfg)?,
                sensitivity: sensitivity(&p, &t)?,
                specificity: specificity(&p, &t)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaseMetrics {
        id: id.to_string(),
        regions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(dims: [usize; 3], on: &[usize]) -> BinaryMask {
        let mut data = vec![false; numel(dims)];
        for &i in on {
            data[i] = true;
        }
        BinaryMask::new(dims, data).unwrap()
    }

    #[test]
    fn regions_by_hand() {
        let m = SegmentationMask::new([2, 2, 2], vec![1, 2, 4, 0, 0, 4, 2, 1]).unwrap();
        let on = |r| region_mask(&m, r).data().iter().map(|&b| b as u8).collect::<Vec<_>>();
        assert_eq!(on(Region::Wt), [1, 1, 1, 0, 0, 1, 1, 1]);
        assert_eq!(on(Region::Tc), [1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(on(Region::Et), [0, 0, 1, 0, 0, 1, 0, 0]);
        let all4 = SegmentationMask::filled([2, 2, 2], 4);
        assert!(Region::ALL.iter().all(|&r| region_mask(&all4, r).count() == 8));
        let bg = SegmentationMask::filled([2, 2, 2], 0);
        assert!(Region::ALL.iter().all(|&r| region_mask(&bg, r).is_empty_set()));
    }

    #[test]
    fn dice_cases() {
        let dims = [4, 4, 4];
        let p = binary(dims, &[0, 1, 2, 3]);
        let t = binary(dims, &[1, 2, 3, 10, 11, 12]);
        assert_eq!(dice(&p, &t).unwrap(), 0.6);
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(dice(&p, &binary(dims, &[20])).unwrap(), 0.0);
        assert_eq!(dice(&binary(dims, &[]), &binary(dims, &[])).unwrap(), 1.0);
        assert_eq!(dice(&binary(dims, &[]), &p).unwrap(), 0.0);
        assert!(dice(&p, &binary([4, 4, 2], &[])).is_err());
    }

    #[test]
    fn hd95_cases() {
        let dims = [8, 8, 8];
        let cfg = Hd95Config::default();
        let a = binary(dims, &[0]);
        let b = binary(dims, &[3 * 64]);
        assert_eq!(hd95(&a, &b, &cfg).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, &cfg).unwrap(), 0.0);
        let empty = binary(dims, &[]);
        assert_eq!(hd95(&empty, &empty, &cfg).unwrap(), 0.0);
        assert_eq!(hd95(&empty, &a, &cfg).unwrap(), HD95_SENTINEL);
        let scaled = Hd95Config {
            spacing: [2.0, 1.0, 1.0],
            ..cfg
        };
        assert_eq!(hd95(&a, &b, &scaled).unwrap(), 6.0);
    }

    #[test]
    fn sensitivity_specificity_cases() {
        let dims = [4, 4, 4];
        let all: Vec<usize> = (0..64).collect();
        let half: Vec<usize> = (0..32).collect();
        let (p, t) = (binary(dims, &all), binary(dims, &half));
        assert_eq!(sensitivity(&p, &t).unwrap(), 1.0);
        assert_eq!(specificity(&p, &t).unwrap(), 0.0);
        assert_eq!(sensitivity(&t, &t).unwrap(), 1.0);
        assert_eq!(specificity(&t, &t).unwrap(), 1.0);
        assert_eq!(sensitivity(&p, &binary(dims, &[])).unwrap(), 1.0);
        assert_eq!(specificity(&p, &p).unwrap(), 1.0);

        // 5 TP, 3 FP, 2 FN, 54 TN.
        let p = binary(dims, &[0, 1, 2, 3, 4, 10, 11, 12]);
        let t = binary(dims, &[0, 1, 2, 3, 4, 20, 21]);
        let c = confusion(&p, &t).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (5, 3, 2, 54));
        assert_eq!(sensitivity(&p, &t).unwrap(), 5.0 / 7.0);
        assert_eq!(specificity(&p, &t).unwrap(), 54.0 / 57.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(percentile_sorted(&v, 50.0), 3.0);
        assert_eq!(percentile_sorted(&v, 25.0), 2.0);
        assert!((percentile_sorted(&v, 95.0) - 8.8).abs() < 1e-12);
    }
}
