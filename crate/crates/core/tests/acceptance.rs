//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=3,9` restricts the run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use bitrunet::inference::{tta_predict, FlipCombo};
use bitrunet::metrics::HD95_SENTINEL;
use bitrunet::model::checkpoint::{decode, encode};
use bitrunet::model::gradcheck::{gradcheck_config, model_gradcheck};
use bitrunet::model::{BiTrUnet, ModelConfig, ParamStore};
use bitrunet::nifti::{
    decode_case, decode_nifti, encode_case, encode_nifti, CaseRecord, Datatype, NiftiHeader, Normalization, Volume4D,
};
use bitrunet::oracle::{check_metrics, check_postprocess, check_vote};
use bitrunet::tensor::gradcheck::run_op_suite;
use bitrunet::tensor::{Tensor, Var};
use bitrunet::training::synthetic::{nested_spheres, SphereSpec};
use bitrunet::training::{evaluate_soft_dice, poly_lr, train_loop, IntensityAugment, LrSchedule, TrainConfig};
use bitrunet::volume::SegmentationMask;
use bitrunet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: Error) -> String {
    err.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn within(limit: Duration, started: Instant) -> Result<Duration, String> {
    let t = started.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut min_instances = usize::MAX;
    for r in run_op_suite(20, 1, 1e-6).map_err(e)? {
        min_instances = min_instances.min(r.instances);
        if r.max_rel_error > worst.1 {
            worst = (r.name, r.max_rel_error);
        }
    }
    ensure(min_instances >= 20, || format!("only {min_instances} instances for some op"))?;
    ensure(worst.1 < 1e-4, || format!("op {} rel error {:.3e}", worst.0, worst.1))?;
    let cfg = gradcheck_config();
    ensure(
        cfg.in_channels == 2 && cfg.input_size == [16; 3] && cfg.base_width == 4 && cfg.embed_dim == 16,
        || format!("unexpected gradcheck config {cfg:?}"),
    )?;
    ensure(cfg.vit_layers == 1 && cfg.heads == 2, || "unexpected transformer config".into())?;
    let model = model_gradcheck(cfg, 64, 1, 1e-6).map_err(e)?;
    ensure(model.max_rel_error < 1e-3, || format!("model rel error {:.3e} ({:?})", model.max_rel_error, model.worst))?;
    let t = within(Duration::from_secs(300), started)?;
    Ok(format!(
        "ops max {:.2e} ({}), model max {:.2e} over {} coords ({} kink-refined), {t:.1?}",
        worst.1, worst.0, model.max_rel_error, model.coordinates, model.refined
    ))
}

fn shape_contract() -> Outcome {
    let sizes = [16, 32, 48];
    let mut checked = 0;
    for &h in &sizes {
        for &w in &sizes {
            for &d in &sizes {
                let cfg = ModelConfig::tiny(4, [h, w, d]);
                let model = BiTrUnet::new(cfg.clone(), 0).map_err(e)?;
                let x = Tensor::randn([1, 4, h, w, d], 1.0, &mut rng(checked));
                let (out, trace) = model
                    .forward_traced(&model.params().bind(None), &Var::constant(x))
                    .map_err(e)?;
                ensure(out.shape() == [1, 4, h, w, d], || format!("{:?} gave {:?}", [h, w, d], out.shape()))?;
                let c = cfg.base_width / 4;
                for (i, stage) in ["initial", "encoder1", "encoder2", "encoder3", "encoder4"].iter().enumerate() {
                    let s = trace.shape(stage).ok_or_else(|| format!("missing stage {stage}"))?;
                    ensure(s[1] == (4 * c) << i, || format!("{stage} width {} at {:?}", s[1], [h, w, d]))?;
                }
                let bottleneck = trace.shape("vit_bottleneck").ok_or("missing bottleneck")?;
                ensure(bottleneck[2..] == [h / 16, w / 16, d / 16], || format!("bottleneck {bottleneck:?}"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} grids, widths [4C..64C], bottleneck H/16"))
}

fn residual_identity() -> Outcome {
    let cfg = ModelConfig {
        vit_layers: 2,
        ..ModelConfig::tiny(4, [32, 32, 32])
    };
    let mut model = BiTrUnet::new(cfg, 5).map_err(e)?;
    let mut r = rng(5);
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let store: &mut ParamStore = model.params_mut();
    for n in &names {
        let id = store.id(n).expect("registered");
        let shape = store.get(id).shape().to_vec();
        if n.contains(".attn.") || n.contains(".ffn.") {
            *store.get_mut(id) = Tensor::zeros(shape);
        } else if n.contains(".ln_") {
            *store.get_mut(id) = Tensor::randn(shape, 1.0, &mut r);
        }
    }
    let params = model.params().bind(None);
    let mut worst: f64 = 0.0;
    let mut layers = 0;
    for block in [&model.vit_skip, &model.vit_bottleneck] {
        for layer in &block.layers {
            let z = Tensor::randn([2, block.tokens(), block.dim], 1.0, &mut r);
            let out = layer.forward(&params, &Var::constant(z.clone())).map_err(e)?;
            worst = worst.max(out.value().max_abs_diff(&z));
            layers += 1;
        }
    }
    ensure(worst == 0.0, || format!("max abs deviation {worst:e}"))?;
    Ok(format!("{layers} layers, max abs deviation 0"))
}

fn overfit() -> Outcome {
    let started = Instant::now();
    let model_cfg = ModelConfig {
        base_width: 16,
        num_classes: 2,
        ..ModelConfig::tiny(4, [32, 32, 32])
    };
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        epochs: 300,
        intensity: IntensityAugment {
            enabled: false,
            ..IntensityAugment::default()
        },
        ..TrainConfig::default()
    };
    ensure(cfg.base_lr == 2e-4 && cfg.lr_power == 0.9, || "schedule is not lr 2e-4, power 0.9".into())?;
    let sample = nested_spheres(&SphereSpec::binary(32, 4, 0.1), 1).map_err(e)?;
    let mut model = BiTrUnet::new(model_cfg, 0).map_err(e)?;
    let before = evaluate_soft_dice(&model, &sample).map_err(e)?;
    let report = train_loop(&mut model, std::slice::from_ref(&sample), &cfg, None).map_err(e)?;
    ensure(report.total_iters() <= 300, || format!("{} iterations", report.total_iters()))?;
    let after = evaluate_soft_dice(&model, &sample).map_err(e)?;
    let t = started.elapsed();
    ensure(after > 0.95, || format!("soft Dice {before:.4} -> {after:.4} after {} iterations", report.total_iters()))?;
    within(Duration::from_secs(900), started)?;
    Ok(format!("soft Dice {before:.4} -> {after:.4} in {} iterations, {t:.1?}", report.total_iters()))
}

fn tta_equivariance() -> Outcome {
    let model_cfg = ModelConfig::tiny(4, [16, 16, 16]);
    let cfg = TrainConfig {
        model: model_cfg.clone(),
        epochs: 5,
        ..TrainConfig::default()
    };
    let spec = SphereSpec {
        classes: 4,
        jitter: true,
        ..SphereSpec::binary(16, 4, 0.2)
    };
    let data = vec![nested_spheres(&spec, 2).map_err(e)?];
    let mut model = BiTrUnet::new(model_cfg, 2).map_err(e)?;
    let initial = model.params().clone();
    train_loop(&mut model, &data, &cfg, None).map_err(e)?;
    ensure(model.params() != &initial, || "training left parameters unchanged".into())?;

    // Asymmetric input so that equivariance is not trivially satisfied.
    let x = Tensor::randn([4, 16, 16, 16], 1.0, &mut rng(3));
    let base = tta_predict(&model, &x).map_err(e)?;
    let mut worst: f64 = 0.0;
    for combo in FlipCombo::all() {
        let lhs = tta_predict(&model, &combo.apply(&x).map_err(e)?).map_err(e)?;
        let rhs = combo.apply(base.tensor()).map_err(e)?;
        worst = worst.max(lhs.tensor().max_abs_diff(&rhs));
    }
    ensure(worst < 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("8 combos, max deviation {worst:.2e}"))
}

fn oracle_line(checks: &[&bitrunet::oracle::OracleCheck]) -> Outcome {
    let mut parts = Vec::new();
    for c in checks {
        ensure(c.instances >= 100, || format!("{}: only {} instances", c.name, c.instances))?;
        ensure(c.passed(), || format!("{}: {} of {} mismatched, max error {:e}", c.name, c.failures, c.instances, c.max_error))?;
        parts.push(format!("{} {} ok (max err {:.1e})", c.name, c.instances, c.max_error));
    }
    Ok(parts.join(", "))
}

fn vote_oracle() -> Outcome {
    let c = check_vote(200, 6).map_err(e)?;
    oracle_line(&[&c])
}

fn metrics_oracle() -> Outcome {
    let (dice, hd) = check_metrics(200, 7).map_err(e)?;
    ensure(dice.max_error == 0.0, || format!("dice deviation {:e}", dice.max_error))?;
    ensure(hd.max_error <= 1e-9, || format!("hd95 deviation {:e}", hd.max_error))?;
    // Empty-set conventions.
    use bitrunet::metrics::{dice as dice_fn, hd95, BinaryMask, Hd95Config};
    let empty = BinaryMask::new([8; 3], vec![false; 512]).map_err(e)?;
    let mut one = vec![false; 512];
    one[100] = true;
    let one = BinaryMask::new([8; 3], one).map_err(e)?;
    let cfg = Hd95Config::default();
    ensure(dice_fn(&empty, &empty).map_err(e)? == 1.0, || "dice(∅, ∅) != 1".into())?;
    ensure(dice_fn(&one, &empty).map_err(e)? == 0.0, || "dice(A, ∅) != 0".into())?;
    ensure(hd95(&empty, &empty, &cfg).map_err(e)? == 0.0, || "hd95(∅, ∅) != 0".into())?;
    ensure(hd95(&one, &empty, &cfg).map_err(e)? == HD95_SENTINEL, || "hd95(A, ∅) != sentinel".into())?;
    ensure(hd95(&empty, &one, &cfg).map_err(e)? == HD95_SENTINEL, || "hd95(∅, A) != sentinel".into())?;
    oracle_line(&[&dice, &hd])
}

fn postprocess_oracle() -> Outcome {
    let (reference, idempotent) = check_postprocess(200, 8).map_err(e)?;
    oracle_line(&[&reference, &idempotent])
}

fn format_roundtrips() -> Outcome {
    let mut r = rng(9);
    // NIfTI float32, plain and gzip.
    let data = Tensor::randn([1, 5, 6, 7], 10.0, &mut r).map(|v| v as f32 as f64);
    let header = NiftiHeader::new([5, 6, 7], [0.9, 1.0, 1.2], Datatype::F32);
    let bytes = encode_nifti(&header, &data, Datatype::F32).map_err(e)?;
    let back = decode_nifti(&bytes).map_err(e)?;
    ensure(back.data == data, || "NIfTI data differs".into())?;
    ensure(encode_nifti(&back.header, &back.data, Datatype::F32).map_err(e)? == bytes, || "NIfTI re-encode differs".into())?;
    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let gz = dir.path().join("v.nii.gz");
    bitrunet::nifti::write_nifti(&gz, &header, &data, Datatype::F32).map_err(e)?;
    ensure(bitrunet::nifti::read_nifti(&gz).map_err(e)?.data == data, || "gzip NIfTI differs".into())?;
    let mut bad = bytes.clone();
    bad[344] = b'x';
    ensure(matches!(decode_nifti(&bad), Err(Error::BadMagic { offset: 344, .. })), || "NIfTI bad magic accepted".into())?;

    // Cache.
    let image = Tensor::randn([4, 8, 8, 8], 1.0, &mut r).map(|v| v as f32 as f64);
    let label = SegmentationMask::new([8; 3], (0..512).map(|i| [0, 1, 2, 4][(i * 7) % 4]).collect()).map_err(e)?;
    let volume = Volume4D {
        image,
        spacing: [1.0, 1.0, 1.5],
        normalization: vec![Normalization { mean: 0.5, sd: 2.0 }; 4],
    };
    let record = CaseRecord::new("case_001", volume, Some(label)).map_err(e)?;
    let bytes = encode_case(&record);
    ensure(decode_case(&bytes).map_err(e)? == record, || "cache record differs".into())?;
    ensure(encode_case(&decode_case(&bytes).map_err(e)?) == bytes, || "cache re-encode differs".into())?;
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0xff;
    ensure(matches!(decode_case(&bad), Err(Error::Checksum { .. })), || "cache bad CRC accepted".into())?;
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 0x01;
    ensure(matches!(decode_case(&bad), Err(Error::Checksum { .. })), || "cache corrupted payload accepted".into())?;
    let mut bad = bytes;
    bad[1] = b'?';
    ensure(matches!(decode_case(&bad), Err(Error::BadMagic { .. })), || "cache bad magic accepted".into())?;

    // Checkpoint, default 32-bit payload.
    let cfg = ModelConfig {
        precision: bitrunet::model::Precision::F32,
        ..ModelConfig::tiny(4, [16, 16, 16])
    };
    let model = BiTrUnet::new(cfg, 9).map_err(e)?;
    let bytes = encode(&model);
    let loaded = decode(&bytes).map_err(e)?;
    ensure(loaded.params() == model.params() && loaded.config() == model.config(), || "checkpoint differs".into())?;
    ensure(encode(&loaded) == bytes, || "checkpoint re-encode differs".into())?;
    let mut bad = bytes;
    bad[0] = b'b';
    ensure(matches!(decode(&bad), Err(Error::BadMagic { .. })), || "checkpoint bad magic accepted".into())?;
    Ok("NIfTI f32 (raw, gzip), cache and checkpoint bit-exact; bad CRC and magic rejected".into())
}

fn schedule_endpoints() -> Outcome {
    let s = LrSchedule::new(300);
    let start = poly_lr(0, &s).map_err(e)?;
    let end = poly_lr(300, &s).map_err(e)?;
    let mid = poly_lr(150, &s).map_err(e)?;
    ensure(start == 2e-4, || format!("poly_lr(0) = {start:e}"))?;
    ensure(end == 0.0, || format!("poly_lr(T) = {end:e}"))?;
    let expected = 2e-4 * 0.5f64.powf(0.9);
    ensure((mid - expected).abs() < 1e-12, || format!("midpoint {mid:e}, expected {expected:e}"))?;
    ensure(poly_lr(301, &s).is_err(), || "iter > T accepted".into())?;
    Ok(format!("lr(0) = {start:e}, lr(T) = 0, lr(T/2) = {mid:.6e}"))
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("shape contract", shape_contract),
        ("residual identity", residual_identity),
        ("overfit smoke test", overfit),
        ("TTA equivariance", tta_equivariance),
        ("voting oracle", vote_oracle),
        ("metrics oracle", metrics_oracle),
        ("postprocessing oracle", postprocess_oracle),
        ("format roundtrips", format_roundtrips),
        ("schedule endpoints", schedule_endpoints),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {n:>2}. {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {n:>2}. {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
