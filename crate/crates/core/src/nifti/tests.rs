use super::*;
use crate::volume::SegmentationMask;

fn random(shape: [usize; 4], seed: u64) -> Tensor {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        ((s >> 11) as f64 / (1u64 << 53) as f64 * 200.0 - 100.0) as f32 as f64
    })
}

fn set_i16(b: &mut [u8], at: usize, v: i16) {
    b[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

#[test]
fn float32_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let data = random([1, 4, 4, 4], 1);
    let header = NiftiHeader::new([4, 4, 4], [1.0, 1.5, 2.0], Datatype::F32);
    for name in ["v.nii", "v.nii.gz"] {
        let path = dir.path().join(name);
        write_nifti(&path, &header, &data, Datatype::F32).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.header.spacing(), [1.0, 1.5, 2.0]);
        assert_eq!(back.header.srow, header.srow);
    }
    let raw = std::fs::read(dir.path().join("v.nii.gz")).unwrap();
    assert_eq!(&raw[..2], &[0x1f, 0x8b]);
}

#[test]
fn file_order_is_x_fastest() {
    let data = Tensor::from_fn([2, 3, 1], |i| i as f64);
    let bytes = encode_nifti(&NiftiHeader::new([2, 3, 1], [1.0; 3], Datatype::U8), &data, Datatype::U8).unwrap();
    // Internal (x, y) = (i, j) holds i·3 + j; the file walks x first.
    assert_eq!(&bytes[DATA_OFFSET..], &[0, 3, 1, 4, 2, 5]);
    assert_eq!(decode_nifti(&bytes).unwrap().data.reshape([2, 3, 1]).unwrap(), data);
}

#[test]
fn bad_magic_and_datatype_and_truncation() {
    let data = random([1, 2, 2, 2], 2);
    let good = encode_nifti(&NiftiHeader::new([2, 2, 2], [1.0; 3], Datatype::F32), &data, Datatype::F32).unwrap();

    let mut b = good.clone();
    b[344..348].copy_from_slice(b"bad!");
    assert!(matches!(decode_nifti(&b), Err(Error::BadMagic { offset: 344, .. })));

    let mut b = good.clone();
    set_i16(&mut b, 70, 64);
    assert!(matches!(decode_nifti(&b), Err(Error::UnsupportedDatatype { code: 64, offset: 70 })));

    let b = &good[..good.len() - 1];
    assert!(matches!(decode_nifti(b), Err(Error::Truncated { .. })));
    assert!(matches!(decode_nifti(&good[..100]), Err(Error::Truncated { offset: 100, .. })));
}

#[test]
fn int16_scaling() {
    let data = Tensor::full([1, 1, 1, 2], 3.0);
    let mut b = encode_nifti(&NiftiHeader::new([1, 1, 2], [1.0; 3], Datatype::I16), &data, Datatype::I16).unwrap();
    b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
    b[116..120].copy_from_slice(&1.0f32.to_le_bytes());
    assert_eq!(decode_nifti(&b).unwrap().data.data(), &[7.0, 7.0]);
    assert!(encode_nifti(&NiftiHeader::new([1, 1, 2], [1.0; 3], Datatype::U8), &Tensor::full([1, 1, 2], 1.5), Datatype::U8).is_err());
}

#[test]
fn big_endian_header() {
    let le = encode_nifti(
        &NiftiHeader::new([2, 1, 1], [0.5, 1.0, 1.0], Datatype::I16),
        &Tensor::new([2, 1, 1], vec![-2.0, 300.0]).unwrap(),
        Datatype::I16,
    )
    .unwrap();
    let mut be = le.clone();
    let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
    swap(&mut be, 0, 4);
    for i in 0..8 {
        swap(&mut be, 40 + 2 * i, 2);
        swap(&mut be, 76 + 4 * i, 4);
    }
    for at in [70, 72, 252, 254] {
        swap(&mut be, at, 2);
    }
    for at in (108..120).step_by(4).chain((256..344).step_by(4)) {
        swap(&mut be, at, 4);
    }
    swap(&mut be, 352, 2);
    swap(&mut be, 354, 2);
    let a = decode_nifti(&le).unwrap();
    let b = decode_nifti(&be).unwrap();
    assert_eq!(a, b);
    assert_eq!(b.data.data(), &[-2.0, 300.0]);
    assert_eq!(b.header.spacing(), [0.5, 1.0, 1.0]);
}

#[test]
fn stacking_and_normalization() {
    let dir = tempfile::tempdir().unwrap();
    let case = dir.path().join("case7");
    std::fs::create_dir(&case).unwrap();
    let h = NiftiHeader::new([2, 2, 2], [1.0; 3], Datatype::F32);
    let vol = Tensor::new([2, 2, 2], vec![0.0, 2.0, 4.0, 2.0, 4.0, 0.0, 2.0, 4.0]).unwrap();
    for m in MODALITIES {
        write_nifti(case.join(format!("case7_{m}.nii.gz")), &h, &vol, Datatype::F32).unwrap();
    }
    let seg = Tensor::from_fn([2, 2, 2], |i| [0.0, 1.0, 2.0, 4.0][i % 4]);
    write_nifti(case.join("case7_seg.nii.gz"), &h, &seg, Datatype::U8).unwrap();

    let (paths, _) = find_modalities(&case).unwrap();
    let (stacked, _) = stack_modalities(&paths).unwrap();
    assert_eq!(stacked.image.shape(), &[4, 2, 2, 2]);

    let (record, _) = CaseRecord::from_dir(&case).unwrap();
    assert_eq!(record.id, "case7");
    assert_eq!(record.sources.len(), 5);
    assert_eq!(&record.volume.image.data()[..8], &[0.0, -1.0, 1.0, -1.0, 1.0, 0.0, -1.0, 1.0]);
    assert_eq!(record.volume.normalization[2], Normalization { mean: 3.0, sd: 1.0 });
    assert_eq!(record.label.as_ref().unwrap().data(), &[0, 1, 2, 4, 0, 1, 2, 4]);

    // Idempotent on already-normalized data.
    let again = normalize(&record.volume);
    assert!(again.image.max_abs_diff(&record.volume.image) < 1e-5);

    let zeros = Volume4D::new(Tensor::zeros([1, 2, 2, 2]), [1.0; 3]).unwrap();
    assert_eq!(normalize(&zeros), zeros);

    std::fs::remove_file(case.join("case7_t2.nii.gz")).unwrap();
    assert!(matches!(find_modalities(&case), Err(Error::Io { .. })));
}

#[test]
fn mismatched_modalities_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, m) in MODALITIES.iter().enumerate() {
        let n = if i == 3 { 3 } else { 2 };
        let p = dir.path().join(format!("x_{m}.nii"));
        write_nifti(&p, &NiftiHeader::new([n, 2, 2], [1.0; 3], Datatype::F32), &Tensor::ones([n, 2, 2]), Datatype::F32).unwrap();
        paths.push(p);
    }
    let paths: [std::path::PathBuf; 4] = paths.try_into().unwrap();
    assert!(matches!(stack_modalities(&paths), Err(Error::Shape { .. })));
}

fn sample_record() -> CaseRecord {
    let volume = Volume4D {
        image: random([4, 16, 16, 16], 5),
        spacing: [1.0, 1.0, 1.2],
        normalization: vec![Normalization { mean: 1.5, sd: 0.25 }; 4],
    };
    let label = SegmentationMask::new([16; 3], (0..4096).map(|i| [0, 1, 2, 4][i % 4]).collect()).unwrap();
    let mut r = CaseRecord::new("BraTS_0001", volume, Some(label)).unwrap();
    r.sources = vec!["a/t1.nii.gz".into()];
    r
}

#[test]
fn cache_roundtrip_and_size() {
    let r = sample_record();
    let bytes = encode_case(&r);
    assert_eq!(decode_case(&bytes).unwrap(), r);
    let payload = 4 * 16usize.pow(3) * 4 + 16usize.pow(3);
    assert!(bytes.len() > payload && bytes.len() - payload < 1024, "{}", bytes.len());

    let mut unlabeled = r.clone();
    unlabeled.label = None;
    assert_eq!(decode_case(&encode_case(&unlabeled)).unwrap(), unlabeled);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.btrc");
    save_case(&r, &path).unwrap();
    assert_eq!(load_case(&path).unwrap(), r);
}

#[test]
fn cache_corruption_detected() {
    let bytes = encode_case(&sample_record());
    let mut b = bytes.clone();
    let last = b.len() - 1;
    b[last] ^= 0x01;
    assert!(matches!(decode_case(&b), Err(Error::Checksum { .. })));
    let mut b = bytes.clone();
    b[100] ^= 0x80;
    assert!(matches!(decode_case(&b), Err(Error::Checksum { .. })));
    let mut b = bytes.clone();
    b[0] = b'X';
    assert!(matches!(decode_case(&b), Err(Error::BadMagic { .. })));
    let mut b = bytes;
    b[4] = 2;
    assert!(matches!(decode_case(&b), Err(Error::Version { found: 2, .. })));
}
