use std::path::Path;
use std::process::{Command, Output};

use bitrunet::nifti::{read_nifti, write_nifti, Datatype, NiftiHeader, MODALITIES};
use bitrunet::tensor::Tensor;
use bitrunet::training::synthetic::{nested_spheres, SphereSpec};
use bitrunet::volume::to_external;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitrunet")).args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A 16³ four-modality case directory with a segmentation.
fn write_case(root: &Path, id: &str, seed: u64) {
    let dir = root.join(id);
    std::fs::create_dir_all(&dir).unwrap();
    let spec = SphereSpec {
        classes: 4,
        jitter: true,
        ..SphereSpec::binary(16, 4, 0.1)
    };
    let sample = nested_spheres(&spec, seed).unwrap();
    let header = NiftiHeader::new([16; 3], [1.0, 1.0, 1.0], Datatype::F32);
    for (c, m) in MODALITIES.iter().enumerate() {
        let channel = Tensor::new([16, 16, 16], sample.image.data()[c * 4096..(c + 1) * 4096].iter().map(|v| v + 2.0).collect()).unwrap();
        write_nifti(dir.join(format!("{id}_{m}.nii.gz")), &header, &channel, Datatype::F32).unwrap();
    }
    let seg = Tensor::new([16, 16, 16], sample.label.data().iter().map(|&l| to_external(l).unwrap() as f64).collect()).unwrap();
    write_nifti(dir.join(format!("{id}_seg.nii.gz")), &header, &seg, Datatype::U8).unwrap();
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let raw = tmp.path().join("raw");
    write_case(&raw, "case_a", 1);
    write_case(&raw, "case_b", 2);

    let cache = tmp.path().join("cache");
    let out = bin(&["preprocess", "--input", s(&raw), "--out", s(&cache)]);
    assert_code(&out, 0);
    assert!(cache.join("case_a.btrc").exists() && cache.join("case_b.btrc").exists());

    let cfg = tmp.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# tiny run\nbase_width = 4\nembed_dim = 16\nvit_layers = 1\nheads = 2\nffn_hidden = 32\ncbam_reduction = 2\ninput_size = 16\nepochs = 2\nseed = 4\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = bin(&["train", "--cache-dir", s(&cache), "--config", s(&cfg), "--out", s(&run)]);
    assert_code(&out, 0);
    let loss = std::fs::read_to_string(run.join("loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 4, "{loss}");
    let mut ckpts: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "btru"))
        .collect();
    ckpts.sort();
    let last = ckpts.last().unwrap().clone();

    let pred_dir = tmp.path().join("pred");
    std::fs::create_dir(&pred_dir).unwrap();
    let probs = tmp.path().join("probs");
    let seg = pred_dir.join("case_a.nii.gz");
    let out = bin(&[
        "predict", "--models", s(&last), s(&ckpts[0]), "--input", s(&raw.join("case_a")), "--out", s(&seg), "--tta",
        "--dump-probs", s(&probs),
    ]);
    assert_code(&out, 0);
    let mask = read_nifti(&seg).unwrap();
    assert_eq!(mask.header.dims(), [16; 3]);
    assert!(mask.data.data().iter().all(|v| [0.0, 1.0, 2.0, 4.0].contains(v)));

    let ens = tmp.path().join("ens.nii");
    let out = bin(&[
        "ensemble", "--runs", s(&probs.join("model_0.f32")), s(&probs.join("model_1.f32")), "--out", s(&ens),
        "--reference", s(&raw.join("case_a/case_a_t1.nii.gz")),
    ]);
    assert_code(&out, 0);
    assert_eq!(read_nifti(&ens).unwrap().data, mask.data);

    let truth_dir = tmp.path().join("truth");
    std::fs::create_dir(&truth_dir).unwrap();
    std::fs::copy(raw.join("case_a/case_a_seg.nii.gz"), truth_dir.join("case_a.nii.gz")).unwrap();
    let report = tmp.path().join("report.tsv");
    let out = bin(&["evaluate", "--pred", s(&pred_dir), "--truth", s(&truth_dir), "--out", s(&report)]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("case\tregion\tdice\thd95\tsensitivity\tspecificity\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("case_a\t")).count(), 3);
    assert!(text.lines().any(|l| l.starts_with("Median\tWT\t")));

    // Evaluating the truth against itself gives perfect scores.
    let out = bin(&["evaluate", "--pred", s(&truth_dir), "--truth", s(&truth_dir), "--out", s(&report)]);
    assert_code(&out, 0);
    let text = std::fs::read_to_string(&report).unwrap();
    for line in text.lines().filter(|l| l.starts_with("case_a\t")) {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(&f[2..], ["1.000000", "0.000000", "1.000000", "1.000000"], "{line}");
    }

    // Prediction straight from the cache file.
    let seg2 = tmp.path().join("from_cache.nii");
    let out = bin(&["predict", "--models", s(&last), "--input", s(&cache.join("case_b.btrc")), "--out", s(&seg2)]);
    assert_code(&out, 0);
}

#[test]
fn exit_codes() {
    assert_code(&bin(&["--help"]), 0);
    assert_code(&bin(&["--version"]), 0);
    assert_code(&bin(&[]), 1);
    assert_code(&bin(&["frobnicate"]), 1);
    assert_code(&bin(&["selftest", "--instances", "many"]), 1);
    assert_code(&bin(&["predict", "--models", "m", "--input", "x", "--out", "y", "--postproc-strategy", "bogus"]), 1);

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.btru");
    let out = bin(&["predict", "--models", s(&missing), "--input", s(tmp.path()), "--out", s(&tmp.path().join("o.nii"))]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.btru"));

    let bad = tmp.path().join("bad.btrc");
    std::fs::write(&bad, b"NOPE0000").unwrap();
    let cfg = tmp.path().join("c.cfg");
    std::fs::write(&cfg, "epochs = 1\nunknown_key = 3\n").unwrap();
    let out = bin(&["train", "--cache-dir", s(tmp.path()), "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_code(&out, 2);
    std::fs::write(&cfg, "epochs = 1\n").unwrap();
    let out = bin(&["train", "--cache-dir", s(tmp.path()), "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]);
    assert_code(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn selftest_subcommand() {
    let out = bin(&["selftest", "--instances", "20", "--seed", "3"]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}
