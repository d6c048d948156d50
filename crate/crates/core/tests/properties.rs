use bitrunet::inference::{
    components, majority_vote, tta_predict, volume_threshold_postprocess, FlipCombo, PostprocConfig, Segmenter,
    Strategy as Rewrite,
};
use bitrunet::metrics::{dice, hd95, sensitivity, specificity, BinaryMask, Hd95Config};
use bitrunet::nifti::{decode_case, decode_nifti, encode_case, encode_nifti, normalize, CaseRecord, Datatype, NiftiHeader, Volume4D};
use bitrunet::tensor::kernels::{conv3d, conv_transpose3d, flip, softmax, ConvSpec};
use bitrunet::tensor::Tensor;
use bitrunet::training::{poly_lr, LrSchedule};
use bitrunet::volume::{to_external, to_internal, ProbabilityMap, SegmentationMask};
use proptest::prelude::*;

fn grid() -> impl Strategy<Value = [usize; 3]> {
    [1usize..6, 1usize..6, 1usize..6]
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-4.0f64..4.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn mask(dims: [usize; 3], classes: u8) -> impl Strategy<Value = SegmentationMask> {
    let n: usize = dims.iter().product();
    prop::collection::vec(0..classes, n).prop_map(move |d| SegmentationMask::new(dims, d).unwrap())
}

fn binary(dims: [usize; 3]) -> impl Strategy<Value = BinaryMask> {
    let n: usize = dims.iter().product();
    prop::collection::vec(prop::bool::weighted(0.3), n).prop_map(move |d| BinaryMask::new(dims, d).unwrap())
}

fn pair(dims: [usize; 3]) -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (binary(dims), binary(dims))
}

fn probs(dims: [usize; 3], k: usize) -> impl Strategy<Value = ProbabilityMap> {
    let n: usize = dims.iter().product();
    prop::collection::vec(0.01f64..1.0, n * k).prop_map(move |raw| {
        let mut d = raw.clone();
        for v in 0..n {
            let s: f64 = (0..k).map(|c| raw[c * n + v]).sum();
            for c in 0..k {
                d[c * n + v] = raw[c * n + v] / s;
            }
        }
        ProbabilityMap::new(Tensor::new(vec![k, dims[0], dims[1], dims[2]], d).unwrap()).unwrap()
    })
}

/// Position-dependent stub so that flips change the output.
struct Ramp;

impl Segmenter for Ramp {
    fn num_classes(&self) -> usize {
        3
    }

    fn input_size(&self) -> Option<[usize; 3]> {
        None
    }

    fn scores(&self, x: &Tensor) -> bitrunet::Result<Tensor> {
        let s = x.shape();
        let [h, w, d] = [s[2], s[3], s[4]];
        let v = h * w * d;
        Tensor::new(
            vec![1, 3, h, w, d],
            (0..3 * v)
                .map(|i| {
                    let (c, p) = (i / v, i % v);
                    x.data()[p] * (c as f64 + 1.0) + (p / (w * d)) as f64 * 0.1 * c as f64 - ((p % d) as f64) * 0.05
                })
                .collect(),
        )
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_is_an_involution(t in grid().prop_flat_map(|g| tensor(vec![2, g[0], g[1], g[2]])), axes in prop::sample::subsequence(vec![0usize, 1, 2, 3], 0..=4)) {
        let once = flip(&t, &axes).unwrap();
        prop_assert_eq!(flip(&once, &axes).unwrap(), t);
    }

    #[test]
    fn softmax_columns_are_distributions(t in grid().prop_flat_map(|g| tensor(vec![3, g[0], g[1], g[2]]))) {
        let p = softmax(&t, 0).unwrap();
        let v = p.numel() / 3;
        for i in 0..v {
            let s: f64 = (0..3).map(|c| p.data()[c * v + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!((0..3).all(|c| p.data()[c * v + i] > 0.0));
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint(
        x in tensor(vec![1, 2, 4, 4, 4]),
        y in tensor(vec![1, 3, 2, 2, 2]),
        w in tensor(vec![3, 2, 3, 3, 3]),
    ) {
        // <conv(x), y> = <x, conv_transpose(y)> for a stride-2 forward conv with padding 1.
        let spec = ConvSpec::cube3(2, 3, 2);
        let fwd = conv3d(&x, &w, None, &spec).unwrap();
        let t_spec = ConvSpec::transposed3(3, 2, 2);
        let back = conv_transpose3d(&y, &w, None, &t_spec).unwrap();
        let lhs = fwd.dot(&y);
        let rhs = x.dot(&back);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn label_mapping_roundtrips(l in 0u8..4) {
        prop_assert_eq!(to_internal(to_external(l).unwrap()).unwrap(), l);
    }

    #[test]
    fn dice_bounds_and_symmetry((a, b) in grid().prop_flat_map(pair)) {
        let ab = dice(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert!((0.0..=1.0).contains(&sensitivity(&a, &b).unwrap()));
        prop_assert!((0.0..=1.0).contains(&specificity(&a, &b).unwrap()));
    }

    #[test]
    fn hd95_symmetric_and_zero_on_self((a, b) in grid().prop_flat_map(pair)) {
        let cfg = Hd95Config::default();
        let ab = hd95(&a, &b, &cfg).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, hd95(&b, &a, &cfg).unwrap());
        prop_assert_eq!(hd95(&a, &a, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn postprocess_is_idempotent_and_local(m in grid().prop_flat_map(|g| mask(g, 4)), t in 0usize..12, relabel in any::<bool>()) {
        let cfg = PostprocConfig {
            strategy: if relabel { Rewrite::Relabel(1) } else { Rewrite::Remove },
            ..PostprocConfig::enhancing(t)
        };
        let once = volume_threshold_postprocess(&m, &cfg).unwrap();
        prop_assert_eq!(&volume_threshold_postprocess(&once, &cfg).unwrap(), &once);
        for (before, after) in m.data().iter().zip(once.data()) {
            // Only the enhancing class is ever rewritten.
            prop_assert!(before == after || *before == 3);
        }
        let zero = volume_threshold_postprocess(&m, &PostprocConfig::enhancing(0)).unwrap();
        prop_assert_eq!(zero, m);
    }

    #[test]
    fn component_sizes_cover_the_foreground(m in grid().prop_flat_map(|g| mask(g, 3))) {
        let (ids, sizes) = components(&m);
        let fg = m.data().iter().filter(|&&l| l != 0).count();
        prop_assert_eq!(sizes.iter().sum::<usize>(), fg);
        for (l, id) in m.data().iter().zip(&ids) {
            prop_assert_eq!(*l == 0, *id == u32::MAX);
        }
    }

    #[test]
    fn unanimous_vote_is_identity(m in grid().prop_flat_map(|g| mask(g, 4)), n in 1usize..5) {
        let dims = m.dims();
        let p = ProbabilityMap::new(Tensor::full(vec![4, dims[0], dims[1], dims[2]], 0.25)).unwrap();
        let masks = vec![m.clone(); n];
        let ps = vec![p; n];
        prop_assert_eq!(majority_vote(&masks, &ps).unwrap(), m);
    }

    #[test]
    fn single_model_vote_is_argmax(p in grid().prop_flat_map(|g| probs(g, 4))) {
        let m = p.argmax();
        prop_assert_eq!(majority_vote(std::slice::from_ref(&m), std::slice::from_ref(&p)).unwrap(), m);
    }

    #[test]
    fn tta_commutes_with_flips(x in grid().prop_flat_map(|g| tensor(vec![1, g[0], g[1], g[2]])), i in 0usize..8) {
        let combo = FlipCombo::all()[i];
        let lhs = tta_predict(&Ramp, &combo.apply(&x).unwrap()).unwrap();
        let rhs = combo.apply(tta_predict(&Ramp, &x).unwrap().tensor()).unwrap();
        prop_assert!(lhs.tensor().max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn poly_lr_is_monotone_and_bounded(total in 1usize..2000, a in 0usize..2000, b in 0usize..2000) {
        let s = LrSchedule::new(total);
        let (a, b) = (a.min(total), b.min(total));
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (poly_lr(lo, &s).unwrap(), poly_lr(hi, &s).unwrap());
        prop_assert!(x >= y && y >= 0.0 && x <= 2e-4);
        prop_assert!(poly_lr(total + 1, &s).is_err());
    }

    #[test]
    fn nifti_float32_roundtrip(dims in grid(), spacing in [0.1f64..4.0, 0.1f64..4.0, 0.1f64..4.0], seed in any::<u32>()) {
        let n: usize = dims.iter().product();
        let data = Tensor::new(vec![1, dims[0], dims[1], dims[2]], (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 40503) & 0x7f7f_ffff) as f64).collect()).unwrap();
        let spacing = spacing.map(|s| s as f32 as f64);
        let h = NiftiHeader::new(dims, spacing, Datatype::F32);
        let bytes = encode_nifti(&h, &data, Datatype::F32).unwrap();
        let back = decode_nifti(&bytes).unwrap();
        prop_assert_eq!(&back.data, &data);
        prop_assert_eq!(back.header.spacing(), spacing);
        prop_assert_eq!(encode_nifti(&back.header, &back.data, Datatype::F32).unwrap(), bytes);
    }

    #[test]
    fn cache_roundtrip_and_corruption(dims in grid(), img in grid().prop_flat_map(|_| prop::collection::vec(-10.0f32..10.0, 2 * 125)), flip_at in any::<prop::sample::Index>()) {
        let n: usize = dims.iter().product();
        let image = Tensor::new(vec![2, dims[0], dims[1], dims[2]], img[..2 * n].iter().map(|&v| v as f64).collect()).unwrap();
        let label = SegmentationMask::new(dims, (0..n).map(|i| [0, 1, 2, 4][i % 4]).collect()).unwrap();
        let record = CaseRecord::new("c", Volume4D::new(image, [1.0, 1.0, 2.0]).unwrap(), Some(label)).unwrap();
        let bytes = encode_case(&record);
        prop_assert_eq!(&decode_case(&bytes).unwrap(), &record);
        let mut bad = bytes.clone();
        let at = flip_at.index(bad.len());
        bad[at] ^= 0x10;
        prop_assert!(decode_case(&bad).is_err());
    }

    #[test]
    fn normalization_centres_nonzero_voxels(vals in prop::collection::vec(prop_oneof![Just(0.0f64), 1.0f64..100.0], 27)) {
        let image = Tensor::new(vec![1, 3, 3, 3], vals.iter().map(|&v| v as f32 as f64).collect()).unwrap();
        let v = normalize(&Volume4D::new(image.clone(), [1.0; 3]).unwrap());
        let nz: Vec<f64> = image.data().iter().zip(v.image.data()).filter(|(a, _)| **a != 0.0).map(|(_, b)| *b).collect();
        for (a, b) in image.data().iter().zip(v.image.data()) {
            prop_assert_eq!(*a == 0.0, *b == 0.0 || nz.iter().all(|x| x.abs() < 1e-6));
        }
        if !nz.is_empty() {
            let mean = nz.iter().sum::<f64>() / nz.len() as f64;
            prop_assert!(mean.abs() < 1e-5, "{}", mean);
        }
    }
}
