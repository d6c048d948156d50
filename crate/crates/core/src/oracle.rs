//! Brute-force reference implementations and the randomized self-test that
//! compares them against the fast paths.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::inference::{majority_vote, volume_threshold_postprocess, PostprocConfig, Strategy, ThresholdMode};
use crate::metrics::{dice, hd95, BinaryMask, Hd95Config, Hd95Mode, HD95_SENTINEL};
use crate::tensor::Tensor;
use crate::volume::{numel, ProbabilityMap, SegmentationMask};

fn coords(i: usize, [_, w, d]: [usize; 3]) -> [usize; 3] {
    [i / (w * d), i / d % w, i % d]
}

fn neighbours(at: [usize; 3], dims: [usize; 3]) -> Vec<usize> {
    let mut out = Vec::new();
    for dh in -1i64..=1 {
        for dw in -1i64..=1 {
            for dd in -1i64..=1 {
                if (dh, dw, dd) == (0, 0, 0) {
                    continue;
                }
                let p = [at[0] as i64 + dh, at[1] as i64 + dw, at[2] as i64 + dd];
                if (0..3).all(|a| p[a] >= 0 && p[a] < dims[a] as i64) {
                    out.push((p[0] as usize * dims[1] + p[1] as usize) * dims[2] + p[2] as usize);
                }
            }
        }
    }
    out
}

/// Per voxel: rank every class by (votes, summed probability / n, −class)
/// and take the best.
pub fn brute_vote(masks: &[SegmentationMask], probs: &[ProbabilityMap]) -> SegmentationMask {
    let dims = masks[0].dims();
    let k = probs[0].classes();
    let n = masks.len() as f64;
    let data = (0..numel(dims))
        .map(|j| {
            let mut ranked: Vec<(usize, f64, usize)> = (0..k)
                .map(|c| {
                    let votes = masks.iter().filter(|m| m.data()[j] as usize == c).count();
                    let mut total = 0.0;
                    for p in probs {
                        total += p.get(c, j);
                    }
                    (votes, total / n, c)
                })
                .collect();
            ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
            ranked[0].2 as u8
        })
        .collect();
    SegmentationMask::new(dims, data).expect("same grid")
}

pub fn brute_dice(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        both += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    }
}

fn brute_surface(m: &BinaryMask) -> Vec<[usize; 3]> {
    let dims = m.dims();
    (0..m.data().len())
        .filter(|&i| m.data()[i])
        .map(|i| coords(i, dims))
        .filter(|&p| {
            let face = [[1i64, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
            face.iter().any(|o| {
                let q: Vec<i64> = (0..3).map(|a| p[a] as i64 + o[a]).collect();
                (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64)
                    || !m.data()[(q[0] as usize * dims[1] + q[1] as usize) * dims[2] + q[2] as usize]
            })
        })
        .collect()
}

fn interpolated_percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() as f64 - 1.0);
    let below = rank.floor();
    let i = below as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (rank - below)) + v[i + 1] * (rank - below)
}

/// All-pairs surface distances, pooled over both directions.
pub fn brute_hd95(a: &BinaryMask, b: &BinaryMask, spacing: [f64; 3], sentinel: f64) -> f64 {
    let (sa, sb) = (brute_surface(a), brute_surface(b));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 0.0,
        (true, false) | (false, true) => return sentinel,
        _ => {}
    }
    let dist = |p: [usize; 3], q: [usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let nearest = |from: &[[usize; 3]], to: &[[usize; 3]]| -> Vec<f64> {
        from.iter().map(|&p| to.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut all = nearest(&sa, &sb);
    all.extend(nearest(&sb, &sa));
    interpolated_percentile(all, 95.0)
}

/// Breadth-first flood fill over 26-neighbours, then the threshold rule.
pub fn brute_postprocess(mask: &SegmentationMask, cfg: &PostprocConfig) -> SegmentationMask {
    let dims = mask.dims();
    let data = mask.data();
    let replacement = match cfg.strategy {
        Strategy::Remove => 0,
        Strategy::Relabel(k) => k,
    };
    let mut out = data.to_vec();
    let mut seen = vec![false; data.len()];
    for start in 0..data.len() {
        let label = data[start];
        if label == 0 || seen[start] {
            continue;
        }
        let mut members = vec![start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(v) = queue.pop_front() {
            for u in neighbours(coords(v, dims), dims) {
                if !seen[u] && data[u] == label {
                    seen[u] = true;
                    members.push(u);
                    queue.push_back(u);
                }
            }
        }
        let size = match cfg.mode {
            ThresholdMode::Component => members.len(),
            ThresholdMode::ClassTotal => data.iter().filter(|&&l| l == label).count(),
        };
        if size < cfg.thresholds[label as usize] {
            for v in members {
                out[v] = replacement;
            }
        }
    }
    SegmentationMask::new(dims, out).expect("same grid")
}

/// Random labels below `classes`, smoothed once so that components of many
/// sizes appear.
pub fn random_mask(rng: &mut impl Rng, dims: [usize; 3], classes: u8, fill: f64) -> SegmentationMask {
    let n = numel(dims);
    let mut data = vec![0u8; n];
    for v in data.iter_mut() {
        if rng.random_bool(fill) {
            *v = rng.random_range(1..classes.max(2));
        }
    }
    // Smooth once so blobs form: each voxel copies a random neighbour.
    let copy = data.clone();
    for (i, v) in data.iter_mut().enumerate() {
        let nb = neighbours(coords(i, dims), dims);
        if !nb.is_empty() && rng.random_bool(0.5) {
            *v = copy[nb[rng.random_range(0..nb.len())]];
        }
    }
    SegmentationMask::new(dims, data).expect("sized")
}

pub fn random_binary(rng: &mut impl Rng, dims: [usize; 3]) -> BinaryMask {
    let fill = match rng.random_range(0..10) {
        0 => 0.0,
        1 => 0.02,
        _ => rng.random_range(0.05..0.6),
    };
    let data = random_mask(rng, dims, 2, fill).data().iter().map(|&l| l != 0).collect();
    BinaryMask::new(dims, data).expect("sized")
}

pub fn random_probs(rng: &mut impl Rng, dims: [usize; 3], k: usize) -> ProbabilityMap {
    let n = numel(dims);
    let mut data = vec![0.0; k * n];
    for j in 0..n {
        // Coarse values make exact ties in the mean likely.
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(1..4) as f64).collect();
        let total: f64 = raw.iter().sum();
        for c in 0..k {
            data[c * n + j] = raw[c] / total;
        }
    }
    ProbabilityMap::new(Tensor::new([k, dims[0], dims[1], dims[2]], data).expect("sized")).expect("rank 4")
}

/// Outcome of one randomized comparison family.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    /// Largest numeric deviation seen (0 for exact checks).
    pub max_error: f64,
}

impl OracleCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.instances > 0
    }
}

pub fn check_vote(instances: usize, seed: u64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..instances {
        let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
        let n = rng.random_range(1..=5);
        let masks: Vec<SegmentationMask> = (0..n).map(|_| random_mask(&mut rng, dims, 4, 0.7)).collect();
        let probs: Vec<ProbabilityMap> = (0..n).map(|_| random_probs(&mut rng, dims, 4)).collect();
        if majority_vote(&masks, &probs)? != brute_vote(&masks, &probs) {
            failures += 1;
        }
    }
    Ok(OracleCheck { name: "majority vote", instances, failures, max_error: 0.0 })
}

pub fn check_metrics(instances: usize, seed: u64) -> Result<(OracleCheck, OracleCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dice_fail, mut hd_fail, mut max_err) = (0, 0, 0.0f64);
    for i in 0..instances {
        let dims = [8; 3];
        let a = random_binary(&mut rng, dims);
        let b = random_binary(&mut rng, dims);
        if dice(&a, &b)? != brute_dice(&a, &b) {
            dice_fail += 1;
        }
        let spacing = if i % 2 == 0 { [1.0; 3] } else { [rng.random_range(0.5..2.0), 1.0, rng.random_range(0.5..2.0)] };
        let cfg = Hd95Config { spacing, sentinel: HD95_SENTINEL, mode: Hd95Mode::Pooled };
        let err = (hd95(&a, &b, &cfg)? - brute_hd95(&a, &b, spacing, HD95_SENTINEL)).abs();
        max_err = max_err.max(err);
        if !(err <= 1e-9) {
            hd_fail += 1;
        }
    }
    Ok((
        OracleCheck { name: "dice", instances, failures: dice_fail, max_error: 0.0 },
        OracleCheck { name: "hd95", instances, failures: hd_fail, max_error: max_err },
    ))
}

/// Compares against flood fill and checks idempotence.
pub fn check_postprocess(instances: usize, seed: u64) -> Result<(OracleCheck, OracleCheck)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ref_fail, mut idem_fail) = (0, 0);
    for i in 0..instances {
        let fill = rng.random_range(0.05..0.5);
        let mask = random_mask(&mut rng, [8; 3], 4, fill);
        let thresholds = (0..4).map(|c| if c == 0 { 0 } else { rng.random_range(0..12) }).collect::<Vec<_>>();
        let strategy = if i % 3 == 2 { Strategy::Relabel(2) } else { Strategy::Remove };
        let mut thresholds = thresholds;
        if strategy == Strategy::Relabel(2) {
            thresholds[2] = 0;
        }
        let mode = if i % 4 == 3 { ThresholdMode::ClassTotal } else { ThresholdMode::Component };
        let cfg = PostprocConfig { thresholds, strategy, mode };
        let once = volume_threshold_postprocess(&mask, &cfg)?;
        if once != brute_postprocess(&mask, &cfg) {
            ref_fail += 1;
        }
        if volume_threshold_postprocess(&once, &cfg)? != once {
            idem_fail += 1;
        }
    }
    Ok((
        OracleCheck { name: "postprocess vs flood fill", instances, failures: ref_fail, max_error: 0.0 },
        OracleCheck { name: "postprocess idempotence", instances, failures: idem_fail, max_error: 0.0 },
    ))
}

/// Every oracle family at `instances` random cases each.
pub fn run_selftest(instances: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    let vote = check_vote(instances, seed)?;
    let (d, h) = check_metrics(instances, seed.wrapping_add(1))?;
    let (p, i) = check_postprocess(instances, seed.wrapping_add(2))?;
    Ok(vec![vote, d, h, p, i])
}
