//! Surface extraction and exact Euclidean distance transforms.

use super::BinaryMask;

/// Foreground voxels with a 6-neighbour in the background or on the grid
/// border.
pub fn surface(m: &BinaryMask) -> BinaryMask {
    let [h, w, d] = m.dims();
    let on = m.data();
    let at = |i: usize, j: usize, k: usize| on[(i * w + j) * d + k];
    let data = (0..on.len())
        .map(|idx| {
            if !on[idx] {
                return false;
            }
            let (i, j, k) = (idx / (w * d), (idx / d) % w, idx % d);
            i == 0
                || j == 0
                || k == 0
                || i + 1 == h
                || j + 1 == w
                || k + 1 == d
                || !at(i - 1, j, k)
                || !at(i + 1, j, k)
                || !at(i, j - 1, k)
                || !at(i, j + 1, k)
                || !at(i, j, k - 1)
                || !at(i, j, k + 1)
        })
        .collect();
    BinaryMask { dims: m.dims(), data }
}

/// Lower envelope of parabolas `s²(q − p)² + f(p)` along one line
/// (Felzenszwalb and Huttenlocher). Infinite samples are skipped.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let s2 = s * s;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let x = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if x <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while j + 1 < v.len() && z[j + 1] < q as f64 {
            j += 1;
        }
        let p = v[j];
        let dq = q as f64 - p as f64;
        *o = s2 * dq * dq + f[p];
    }
}

/// Squared Euclidean distance (with voxel `spacing`) from every voxel to the
/// nearest voxel of `m`; infinite everywhere when `m` is empty.
pub fn squared_distance_transform(m: &BinaryMask, spacing: [f64; 3]) -> Vec<f64> {
    let dims = m.dims();
    let mut g: Vec<f64> = m.data().iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut line, mut out) = (Vec::new(), Vec::new());
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in (0..3).rev() {
        let n = dims[axis];
        let st = strides[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in 0..g.len() {
            if !(start / st).is_multiple_of(n) {
                continue;
            }
            for (q, l) in line.iter_mut().enumerate() {
                *l = g[start + q * st];
            }
            envelope_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for (q, &o) in out.iter().enumerate() {
                g[start + q * st] = o;
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_cube_surface_is_shell() {
        let m = BinaryMask::new([3, 3, 3], vec![true; 27]).unwrap();
        let s = surface(&m);
        assert_eq!(s.count(), 26);
        assert!(!s.data()[13]);
    }

    #[test]
    fn transform_matches_brute_force() {
        let dims = [5, 4, 6];
        let on = [3usize, 40, 77, 100];
        let mut data = vec![false; 120];
        on.iter().for_each(|&i| data[i] = true);
        let m = BinaryMask::new(dims, data).unwrap();
        let spacing = [1.5, 1.0, 0.5];
        let dt = squared_distance_transform(&m, spacing);
        let coord = |i: usize| [i / 24, (i / 6) % 4, i % 6];
        for (i, &d) in dt.iter().enumerate() {
            let expect = on
                .iter()
                .map(|&j| (0..3).map(|a| ((coord(i)[a] as f64 - coord(j)[a] as f64) * spacing[a]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!((d - expect).abs() < 1e-12, "{i}: {d} vs {expect}");
        }
    }
}
