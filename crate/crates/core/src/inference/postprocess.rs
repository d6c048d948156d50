use std::str::FromStr;

use crate::error::{Error, Result};
use crate::volume::SegmentationMask;

/// What happens to a foreground region below its class threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Set to background.
    Remove,
    /// Set to the given internal class.
    Relabel(u8),
}

impl FromStr for Strategy {
    type Err = Error;

    /// `remove` or `relabel:K` with `K` an internal class.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "remove" => Ok(Strategy::Remove),
            Some(("relabel", k)) => k
                .parse()
                .map(Strategy::Relabel)
                .map_err(|_| Error::Config(format!("bad relabel target `{k}`"))),
            _ => Err(Error::Config(format!(
                "unknown postprocessing strategy `{s}` (expected remove or relabel:K)"
            ))),
        }
    }
}

/// Unit a threshold is compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Each 26-connected component separately.
    #[default]
    Component,
    /// The total voxel count of the class.
    ClassTotal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostprocConfig {
    /// Minimum voxel count per internal class; index 0 is ignored.
    pub thresholds: Vec<usize>,
    pub strategy: Strategy,
    pub mode: ThresholdMode,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0, 0, 0, 50],
            strategy: Strategy::Remove,
            mode: ThresholdMode::Component,
        }
    }
}

impl PostprocConfig {
    /// Only the enhancing-tumour class (internal 3) gets a threshold.
    pub fn enhancing(threshold: usize) -> Self {
        Self {
            thresholds: vec![0, 0, 0, threshold],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Relabel(k) = self.strategy {
            let k = k as usize;
            if k >= self.thresholds.len() {
                return Err(Error::Config(format!(
                    "relabel target {k} outside the {} configured classes",
                    self.thresholds.len()
                )));
            }
            if k != 0 && self.thresholds[k] != 0 {
                return Err(Error::Config(format!("relabel target {k} must have threshold 0")));
            }
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect() }
    }

    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let up = self.parent[self.parent[i as usize] as usize];
            self.parent[i as usize] = up;
            i = up;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// 26-connected components of equal nonzero label. Returns a component id
/// per voxel (`u32::MAX` for background) and the size of each component.
/// Ids are numbered by first voxel in memory order.
pub fn components(mask: &SegmentationMask) -> (Vec<u32>, Vec<usize>) {
    let [h, w, d] = mask.dims();
    let data = mask.data();
    let n = data.len();
    let mut uf = UnionFind::new(n);
    // Half of the 26-neighbourhood: offsets that precede a voxel in memory order.
    let mut back = Vec::with_capacity(13);
    for dh in -1i64..=1 {
        for dw in -1i64..=1 {
            for dd in -1i64..=1 {
                if (dh, dw, dd) < (0, 0, 0) {
                    back.push((dh, dw, dd));
                }
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let v = (i * w + j) * d + k;
                if data[v] == 0 {
                    continue;
                }
                for &(dh, dw, dd) in &back {
                    let (ni, nj, nk) = (i as i64 + dh, j as i64 + dw, k as i64 + dd);
                    if ni < 0 || nj < 0 || nk < 0 || nj >= w as i64 || nk >= d as i64 {
                        continue;
                    }
                    let u = (ni as usize * w + nj as usize) * d + nk as usize;
                    if data[u] == data[v] {
                        uf.union(u as u32, v as u32);
                    }
                }
            }
        }
    }
    let mut ids = vec![u32::MAX; n];
    let mut sizes = Vec::new();
    let mut root_id = vec![u32::MAX; n];
    for v in 0..n {
        if data[v] == 0 {
            continue;
        }
        let r = uf.find(v as u32) as usize;
        if root_id[r] == u32::MAX {
            root_id[r] = sizes.len() as u32;
            sizes.push(0);
        }
        ids[v] = root_id[r];
        sizes[root_id[r] as usize] += 1;
    }
    (ids, sizes)
}

/// Removes or relabels foreground regions smaller than their class
/// threshold. Decisions are made on the input mask, so the result is a
/// fixed point.
pub fn volume_threshold_postprocess(mask: &SegmentationMask, cfg: &PostprocConfig) -> Result<SegmentationMask> {
    cfg.validate()?;
    mask.check_classes(cfg.thresholds.len().max(1))?;
    let replacement = match cfg.strategy {
        Strategy::Remove => 0,
        Strategy::Relabel(k) => k,
    };
    let threshold = |label: u8| cfg.thresholds[label as usize];
    let mut out = mask.clone();
    match cfg.mode {
        ThresholdMode::Component => {
            let (ids, sizes) = components(mask);
            for (v, slot) in out.data_mut().iter_mut().enumerate() {
                if *slot != 0 && sizes[ids[v] as usize] < threshold(*slot) {
                    *slot = replacement;
                }
            }
        }
        ThresholdMode::ClassTotal => {
            let hist = mask.histogram();
            for slot in out.data_mut() {
                if *slot != 0 && hist[*slot as usize] < threshold(*slot) {
                    *slot = replacement;
                }
            }
        }
    }
    Ok(out)
}
