//! Voxel-grid containers shared by training, inference and evaluation.
//!
//! Grids are indexed `(H, W, D)` row-major, matching the trailing axes of
//! model tensors. Label masks come in two vocabularies: the contiguous
//! internal one `{0, 1, 2, 3}` used by the network, and the external one
//! `{0, 1, 2, 4}` used in files and metrics. Internal 3 is external 4; the
//! other labels coincide.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// External label values indexed by internal class.
pub const EXTERNAL_LABELS: [u8; 4] = [0, 1, 2, 4];

pub fn to_external(internal: u8) -> Result<u8> {
    EXTERNAL_LABELS
        .get(internal as usize)
        .copied()
        .ok_or(Error::LabelOutOfRange {
            label: internal,
            classes: EXTERNAL_LABELS.len(),
        })
}

pub fn to_internal(external: u8) -> Result<u8> {
    EXTERNAL_LABELS
        .iter()
        .position(|&e| e == external)
        .map(|i| i as u8)
        .ok_or_else(|| Error::Config(format!("label {external} is outside the vocabulary {{0, 1, 2, 4}}")))
}

pub fn numel(dims: [usize; 3]) -> usize {
    dims.iter().product()
}

/// Integer labels over an `(H, W, D)` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if numel(dims) != data.len() {
            return Err(Error::shape(
                "SegmentationMask::new",
                format!("grid {dims:?} holds {} voxels, buffer has {}", numel(dims), data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: [usize; 3], label: u8) -> Self {
        Self {
            dims,
            data: vec![label; numel(dims)],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn index(&self, [h, w, d]: [usize; 3]) -> usize {
        (h * self.dims[1] + w) * self.dims[2] + d
    }

    pub fn get(&self, at: [usize; 3]) -> u8 {
        self.data[self.index(at)]
    }

    /// Voxel counts per label value `0..=255`.
    pub fn histogram(&self) -> [usize; 256] {
        let mut h = [0; 256];
        for &v in &self.data {
            h[v as usize] += 1;
        }
        h
    }

    pub fn to_external(&self) -> Result<Self> {
        let data = self.data.iter().map(|&v| to_external(v)).collect::<Result<_>>()?;
        Ok(Self { dims: self.dims, data })
    }

    pub fn to_internal(&self) -> Result<Self> {
        let data = self.data.iter().map(|&v| to_internal(v)).collect::<Result<_>>()?;
        Ok(Self { dims: self.dims, data })
    }

    /// Checks every label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v as usize >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn crop(&self, offset: [usize; 3], size: [usize; 3]) -> Result<Self> {
        let data = crop_grid(&self.data, self.dims, 1, offset, size)?;
        Ok(Self { dims: size, data })
    }

    pub fn reversed(&self, axes: [bool; 3]) -> Self {
        let mut out = self.clone();
        for (i, slot) in out.data.iter_mut().enumerate() {
            *slot = self.data[reflect_index(i, self.dims, axes)];
        }
        out
    }
}

/// Per-class probabilities over a grid, shape `(K, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    tensor: Tensor,
}

impl ProbabilityMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 4 || tensor.shape()[0] == 0 {
            return Err(Error::shape(
                "ProbabilityMap::new",
                format!("expected (K, H, W, D), got {:?}", tensor.shape()),
            ));
        }
        Ok(Self { tensor })
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.tensor.shape();
        [s[1], s[2], s[3]]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn get(&self, class: usize, voxel: usize) -> f64 {
        self.tensor.data()[class * numel(self.dims()) + voxel]
    }

    /// Per-voxel argmax; the lowest class wins ties.
    pub fn argmax(&self) -> SegmentationMask {
        let n = numel(self.dims());
        let data = (0..n)
            .map(|j| {
                let mut best = 0;
                for k in 1..self.classes() {
                    if self.get(k, j) > self.get(best, j) {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        SegmentationMask { dims: self.dims(), data }
    }

    /// Largest deviation of a per-voxel class sum from 1.
    pub fn max_sum_deviation(&self) -> f64 {
        let n = numel(self.dims());
        (0..n)
            .map(|j| ((0..self.classes()).map(|k| self.get(k, j)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Flat index of the voxel that lands on `i` after reversing `axes`.
pub(crate) fn reflect_index(i: usize, dims: [usize; 3], axes: [bool; 3]) -> usize {
    let (h, w, d) = (i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]);
    let r = |v: usize, n: usize, on: bool| if on { n - 1 - v } else { v };
    (r(h, dims[0], axes[0]) * dims[1] + r(w, dims[1], axes[1])) * dims[2] + r(d, dims[2], axes[2])
}

/// Copies a `size` window at `offset` out of `channels` stacked grids.
pub(crate) fn crop_grid<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    channels: usize,
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<T>> {
    for a in 0..3 {
        if offset[a] + size[a] > dims[a] {
            return Err(Error::shape(
                "crop",
                format!("window {size:?} at {offset:?} exceeds grid {dims:?}"),
            ));
        }
    }
    let mut out = Vec::with_capacity(channels * numel(size));
    for c in 0..channels {
        for h in 0..size[0] {
            for w in 0..size[1] {
                let start = ((c * dims[0] + offset[0] + h) * dims[1] + offset[1] + w) * dims[2] + offset[2];
                out.extend_from_slice(&data[start..start + size[2]]);
            }
        }
    }
    Ok(out)
}

/// Places `channels` stacked grids of `dims` into a zero-filled `target`
/// grid at `offset`.
pub(crate) fn embed_grid<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    channels: usize,
    offset: [usize; 3],
    target: [usize; 3],
    fill: T,
) -> Vec<T> {
    let mut out = vec![fill; channels * numel(target)];
    for c in 0..channels {
        for h in 0..dims[0] {
            for w in 0..dims[1] {
                let src = ((c * dims[0] + h) * dims[1] + w) * dims[2];
                let dst = ((c * target[0] + offset[0] + h) * target[1] + offset[1] + w) * target[2] + offset[2];
                out[dst..dst + dims[2]].copy_from_slice(&data[src..src + dims[2]]);
            }
        }
    }
    out
}

/// Symmetric zero padding from `dims` up to `target` on each axis: the
/// extra `target - dims` voxels are split with the odd one after.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub dims: [usize; 3],
    pub target: [usize; 3],
}

impl Padding {
    pub fn new(dims: [usize; 3], target: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| target[a] < dims[a]) {
            return Err(Error::shape(
                "pad",
                format!("grid {dims:?} does not fit inside {target:?}"),
            ));
        }
        Ok(Self { dims, target })
    }

    /// Smallest multiple of `m` on each axis.
    pub fn to_multiple(dims: [usize; 3], m: usize) -> Self {
        Self {
            dims,
            target: dims.map(|n| n.div_ceil(m).max(1) * m),
        }
    }

    pub fn before(&self) -> [usize; 3] {
        std::array::from_fn(|a| (self.target[a] - self.dims[a]) / 2)
    }

    /// Pads a `(C, H, W, D)` tensor.
    pub fn pad(&self, x: &Tensor) -> Result<Tensor> {
        let c = check_grid("pad", x, self.dims)?;
        let data = embed_grid(x.data(), self.dims, c, self.before(), self.target, 0.0);
        Tensor::new([c, self.target[0], self.target[1], self.target[2]], data)
    }

    /// Crops a padded `(C, H, W, D)` tensor back to the original grid.
    pub fn unpad(&self, x: &Tensor) -> Result<Tensor> {
        let c = check_grid("unpad", x, self.target)?;
        let data = crop_grid(x.data(), self.target, c, self.before(), self.dims)?;
        Tensor::new([c, self.dims[0], self.dims[1], self.dims[2]], data)
    }

    pub fn pad_mask(&self, m: &SegmentationMask) -> Result<SegmentationMask> {
        if m.dims() != self.dims {
            return Err(Error::shape("pad", format!("mask grid {:?}, expected {:?}", m.dims(), self.dims)));
        }
        SegmentationMask::new(self.target, embed_grid(m.data(), self.dims, 1, self.before(), self.target, 0))
    }
}

fn check_grid(op: &'static str, x: &Tensor, dims: [usize; 3]) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != dims {
        return Err(Error::shape(op, format!("expected (C, {}, {}, {}), got {s:?}", dims[0], dims[1], dims[2])));
    }
    Ok(s[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_bijection() {
        for i in 0..4u8 {
            assert_eq!(to_internal(to_external(i).unwrap()).unwrap(), i);
        }
        assert_eq!(to_external(3).unwrap(), 4);
        assert!(to_external(4).is_err());
        assert!(to_internal(3).is_err());
    }

    #[test]
    fn pad_unpad_roundtrip() {
        let x = Tensor::from_fn([2, 3, 5, 4], |i| i as f64);
        let p = Padding::to_multiple([3, 5, 4], 4);
        assert_eq!(p.target, [4, 8, 4]);
        assert_eq!(p.before(), [0, 1, 0]);
        let padded = p.pad(&x).unwrap();
        assert_eq!(padded.sum(), x.sum());
        assert_eq!(p.unpad(&padded).unwrap(), x);
    }

    #[test]
    fn reversal_is_involution() {
        let m = SegmentationMask::new([2, 3, 2], (0..12).collect()).unwrap();
        let r = m.reversed([true, false, true]);
        assert_eq!(r.get([0, 0, 0]), m.get([1, 0, 1]));
        assert_eq!(r.reversed([true, false, true]), m);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        let p = ProbabilityMap::new(Tensor::new([2, 1, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap()).unwrap();
        assert_eq!(p.argmax().data(), &[0, 1]);
    }
}
