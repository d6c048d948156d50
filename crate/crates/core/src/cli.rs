//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or runtime error (including
//! a failed gradient check or self-test).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::inference::{
    majority_vote, predict_case, read_probs, volume_threshold_postprocess, write_probs, PostprocConfig,
    PredictConfig, Segmenter, Strategy, ThresholdMode,
};
use crate::metrics::{evaluate_case, report, Hd95Config, Hd95Mode, HD95_SENTINEL};
use crate::model::checkpoint::load_checkpoint;
use crate::model::gradcheck::{gradcheck_config, model_gradcheck};
use crate::model::BiTrUnet;
use crate::nifti::{load_case, read_nifti, save_case, write_nifti, CaseRecord, Datatype, NiftiHeader};
use crate::oracle::run_selftest;
use crate::tensor::gradcheck::run_op_suite;
use crate::tensor::Tensor;
use crate::training::{train_loop, Sample, TrainConfig};
use crate::volume::{ProbabilityMap, SegmentationMask};

#[derive(Parser, Debug)]
#[command(name = "bitrunet", version, about = "3D brain tumour segmentation: preprocessing, training, inference and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert case directories of modality NIfTIs into cache files
    Preprocess(PreprocessArgs),
    /// Train a model on cached cases
    Train(TrainArgs),
    /// Segment one case with one or more checkpoints
    Predict(PredictArgs),
    /// Majority-vote several probability dumps into one mask
    Ensemble(EnsembleArgs),
    /// Score predicted masks against ground truth
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient suite
    Gradcheck(GradcheckArgs),
    /// Compare fast paths against brute-force references
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// A case directory, or a directory of case directories
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `<id>.btrc` files
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of `.btrc` cases with labels
    #[arg(long)]
    cache_dir: PathBuf,
    /// key = value configuration file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and `loss.tsv`
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PostprocArgs {
    /// Minimum component size in voxels for the enhancing tumour label
    #[arg(long, default_value_t = 50)]
    postproc_threshold: usize,
    /// `remove` or `relabel:K` with K an internal class
    #[arg(long, default_value = "remove", value_parser = parse_strategy)]
    postproc_strategy: Strategy,
    #[arg(long, value_enum, default_value_t = ModeArg::Component)]
    postproc_mode: ModeArg,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Component,
    ClassTotal,
}

impl PostprocArgs {
    fn config(&self) -> PostprocConfig {
        PostprocConfig {
            strategy: self.postproc_strategy,
            mode: match self.postproc_mode {
                ModeArg::Component => ThresholdMode::Component,
                ModeArg::ClassTotal => ThresholdMode::ClassTotal,
            },
            ..PostprocConfig::enhancing(self.postproc_threshold)
        }
    }
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// One or more `.btru` checkpoints
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    /// Case directory of modality NIfTIs, or a `.btrc` cache file
    #[arg(long)]
    input: PathBuf,
    /// Output mask (`.nii` or `.nii.gz`)
    #[arg(long)]
    out: PathBuf,
    /// Average over the eight axis flips
    #[arg(long)]
    tta: bool,
    #[command(flatten)]
    postproc: PostprocArgs,
    /// Directory for per-model probability dumps
    #[arg(long)]
    dump_probs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    /// Probability dumps written by `predict --dump-probs`
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    /// Output mask (`.nii` or `.nii.gz`)
    #[arg(long)]
    out: PathBuf,
    /// NIfTI whose header (spacing, affine) the output copies
    #[arg(long)]
    reference: Option<PathBuf>,
    #[command(flatten)]
    postproc: PostprocArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Hd95Arg {
    Pooled,
    MaxDirected,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted masks
    #[arg(long)]
    pred: PathBuf,
    /// Directory of reference masks with the same file names
    #[arg(long)]
    truth: PathBuf,
    /// Tab-separated report
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Hd95Arg::Pooled)]
    hd95_mode: Hd95Arg,
    /// HD95 when exactly one of the two masks is empty
    #[arg(long, default_value_t = HD95_SENTINEL)]
    sentinel: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per op
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Sampled parameter coordinates for the whole-model check
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Random instances per check
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Preprocess(a) => preprocess(&a),
        Command::Train(a) => train(&a),
        Command::Predict(a) => predict(&a),
        Command::Ensemble(a) => ensemble(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::Selftest(a) => selftest(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            2
        }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn is_case_dir(dir: &Path) -> Result<bool> {
    Ok(sorted_entries(dir)?.iter().any(|p| {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        name.ends_with("_flair.nii.gz") || name.ends_with("_flair.nii")
    }))
}

fn preprocess(a: &PreprocessArgs) -> Result<()> {
    let cases = if is_case_dir(&a.input)? {
        vec![a.input.clone()]
    } else {
        sorted_entries(&a.input)?.into_iter().filter(|p| p.is_dir()).collect()
    };
    if cases.is_empty() {
        return Err(Error::Empty("case directories"));
    }
    create_dir(&a.out)?;
    for dir in &cases {
        let (record, _) = CaseRecord::from_dir(dir)?;
        let path = a.out.join(format!("{}.btrc", record.id));
        save_case(&record, &path)?;
        println!(
            "{}\t{:?}\tlabel={}",
            path.display(),
            record.volume.dims(),
            if record.label.is_some() { "yes" } else { "no" }
        );
    }
    println!("preprocessed {} case(s)", cases.len());
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let mut data = Vec::new();
    for path in sorted_entries(&a.cache_dir)? {
        if path.extension().is_none_or(|e| e != "btrc") {
            continue;
        }
        let record = load_case(&path)?;
        let label = record.label.ok_or_else(|| Error::Config(format!("{}: case has no label", path.display())))?;
        data.push(Sample {
            image: record.volume.image,
            label: label.to_internal()?,
        });
    }
    if data.is_empty() {
        return Err(Error::Empty("cached training cases"));
    }
    create_dir(&a.out)?;
    let cfg_path = a.out.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut model = BiTrUnet::new(cfg.model.clone(), cfg.seed)?;
    let report = train_loop(&mut model, &data, &cfg, Some(&a.out))?;
    if let Some(last) = report.records.last() {
        println!("iterations\t{}\nfinal_loss\t{:.6}", report.total_iters(), last.total);
    }
    for p in &report.checkpoints {
        println!("checkpoint\t{}", p.display());
    }
    Ok(())
}

fn mask_tensor(mask: &SegmentationMask) -> Tensor {
    let [x, y, z] = mask.dims();
    Tensor::new([x, y, z], mask.data().iter().map(|&l| l as f64).collect()).expect("mask grid")
}

fn label_counts(mask: &SegmentationMask) -> String {
    let h = mask.histogram();
    [0u8, 1, 2, 4].iter().map(|&l| format!("{l}:{}", h[l as usize])).collect::<Vec<_>>().join(" ")
}

fn predict(a: &PredictArgs) -> Result<()> {
    let models = a.models.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    let (image, header) = if a.input.is_dir() {
        let (record, header) = CaseRecord::from_dir(&a.input)?;
        (record.volume.image, header)
    } else {
        let record = load_case(&a.input)?;
        let header = NiftiHeader::new(record.volume.dims(), record.volume.spacing, Datatype::U8);
        (record.volume.image, header)
    };
    let cfg = PredictConfig {
        tta: a.tta,
        postproc: a.postproc.config(),
    };
    let refs: Vec<&dyn Segmenter> = models.iter().map(|m| m as &dyn Segmenter).collect();
    let prediction = predict_case(&refs, &image, &cfg)?;
    if let Some(dir) = &a.dump_probs {
        create_dir(dir)?;
        for (i, p) in prediction.probs.iter().enumerate() {
            let path = dir.join(format!("model_{i}.f32"));
            write_probs(&path, p, header.spacing())?;
            println!("probabilities\t{}", path.display());
        }
    }
    write_nifti(&a.out, &header, &mask_tensor(&prediction.mask), Datatype::U8)?;
    println!("wrote {}\t{}", a.out.display(), label_counts(&prediction.mask));
    Ok(())
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let mut probs: Vec<ProbabilityMap> = Vec::with_capacity(a.runs.len());
    let mut spacing = [1.0; 3];
    for path in &a.runs {
        let (p, s) = read_probs(path)?;
        spacing = s;
        probs.push(p);
    }
    let masks: Vec<SegmentationMask> = probs.iter().map(ProbabilityMap::argmax).collect();
    let voted = majority_vote(&masks, &probs)?;
    let mask = volume_threshold_postprocess(&voted, &a.postproc.config())?.to_external()?;
    let header = match &a.reference {
        Some(p) => read_nifti(p)?.header,
        None => NiftiHeader::new(mask.dims(), spacing, Datatype::U8),
    };
    if header.dims() != mask.dims() {
        return Err(Error::shape(
            "ensemble",
            format!("reference grid {:?}, predictions {:?}", header.dims(), mask.dims()),
        ));
    }
    write_nifti(&a.out, &header, &mask_tensor(&mask), Datatype::U8)?;
    println!("wrote {}\t{}", a.out.display(), label_counts(&mask));
    Ok(())
}

fn nifti_stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_string_lossy().into_owned();
    name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii")).map(str::to_string)
}

fn read_mask(path: &Path) -> Result<(SegmentationMask, [f64; 3])> {
    let img = read_nifti(path)?;
    if img.header.frames() != 1 {
        return Err(Error::shape("read_mask", format!("{}: expected a 3D volume", path.display())));
    }
    let data = img
        .data
        .data()
        .iter()
        .map(|&v| match v {
            0.0 | 1.0 | 2.0 | 4.0 => Ok(v as u8),
            _ => Err(Error::Config(format!("{}: value {v} is not a label in {{0, 1, 2, 4}}", path.display()))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok((SegmentationMask::new(img.header.dims(), data)?, img.header.spacing()))
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut cases = Vec::new();
    for pred_path in sorted_entries(&a.pred)? {
        let Some(id) = nifti_stem(&pred_path) else { continue };
        let name = pred_path.file_name().expect("file");
        let truth_path = a.truth.join(name);
        let (pred, _) = read_mask(&pred_path)?;
        let (truth, spacing) = read_mask(&truth_path)?;
        let cfg = Hd95Config {
            spacing,
            sentinel: a.sentinel,
            mode: match a.hd95_mode {
                Hd95Arg::Pooled => Hd95Mode::Pooled,
                Hd95Arg::MaxDirected => Hd95Mode::MaxDirected,
            },
        };
        cases.push(evaluate_case(&id, &pred, &truth, &cfg)?);
    }
    if cases.is_empty() {
        return Err(Error::Empty("predicted masks"));
    }
    let text = report::to_tsv(&cases)?;
    fs::write(&a.out, &text).map_err(|e| Error::io(&a.out, e))?;
    for (region, stats) in report::summarize_cases(&cases)? {
        println!(
            "{}\tmedian dice {:.4}\tmedian hd95 {:.4}",
            region.name(),
            stats[0].median,
            stats[1].median
        );
    }
    println!("evaluated {} case(s); report at {}", cases.len(), a.out.display());
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut worst_op: f64 = 0.0;
    for r in run_op_suite(a.instances, a.seed, 1e-6)? {
        println!("{:<24}{:>4} instances  max rel error {:.3e}", r.name, r.instances, r.max_rel_error);
        worst_op = worst_op.max(r.max_rel_error);
    }
    let model = model_gradcheck(gradcheck_config(), a.samples, a.seed, 1e-6)?;
    println!(
        "{:<24}{:>4} coordinates  max rel error {:.3e}  ({} kink-refined)",
        "whole model", model.coordinates, model.max_rel_error, model.refined
    );
    println!("max relative error (ops) {worst_op:.3e}");
    println!("max relative error (model) {:.3e}", model.max_rel_error);
    if worst_op < 1e-4 && model.max_rel_error < 1e-3 {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradcheck failed: ops {worst_op:.3e} (limit 1e-4), model {:.3e} (limit 1e-3)",
            model.max_rel_error
        )))
    }
}

fn selftest(a: &SelftestArgs) -> Result<()> {
    let checks = run_selftest(a.instances, a.seed)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{}\t{:<28}{} instances, {} mismatches, max error {:.2e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.instances,
            c.failures,
            c.max_error
        );
        failed += usize::from(!c.passed());
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{failed} self-test check(s) failed")))
    }
}
