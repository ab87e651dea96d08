//! Command-line front end.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use csunet_core::battery::{run_battery, BatteryOptions};
use csunet_core::engine::Fault;
use csunet_core::losses::{argmax_labels, LossConfig, Metrics};
use csunet_core::phantom::{generate_phantom, PhantomSpec, GROUND_GLASS_CONTRAST, SOLID_CONTRAST};
use csunet_core::train::{cross_validate_with, evaluate, fit, kfold_split, mean_std, CvReport, EpochRecord, FoldResult, Sample};
use csunet_core::{parallel, CsuNet3d};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::fsutil::write_json;
use crate::manifest::{load_samples, save_manifest, DatasetManifest, ManifestEntry, IMAGE_SUFFIX, MASK_SUFFIX};
use crate::volume::{read_volume, write_volume, Volume};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Worker-count variable; 0 or unset selects the deterministic single-thread path.
pub const THREADS_ENV: &str = "CSUNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "csunet", version, about = "Volumetric nodule segmentation with channel-residual U-structures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic nodule phantoms and their manifest.
    Synth(SynthArgs),
    /// Train with cross-validation, on one fold, or on the whole dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the predicted mask of one volume.
    Predict(PredictArgs),
    /// Run the gradient-check battery.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub extent: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0)]
    pub ground_glass_fraction: f64,
    /// Fixed nodule radius in voxels; drawn per sample when omitted.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = SOLID_CONTRAST)]
    pub solid_contrast: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory or manifest; overrides `data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train on a single cross-validation split.
    #[arg(long, conflicts_with = "fit_all")]
    pub fold: Option<usize>,
    /// Train and validate on every sample.
    #[arg(long)]
    pub fit_all: bool,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FaultName {
    Conv3d,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Skip the end-to-end network item.
    #[arg(long)]
    pub skip_network: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: Option<FaultName>,
}

/// A command failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(e: impl Display) -> Self {
        Self { code: EXIT_USAGE, message: e.to_string() }
    }

    fn runtime(e: impl Display) -> Self {
        Self { code: EXIT_FAILURE, message: e.to_string() }
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match threads_from_env() {
        Ok(n) => parallel::set_threads(n),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    }
    let result = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Predict(a) => predict(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn threads_from_env() -> Result<usize, String> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) if v.trim().is_empty() => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got `{v}`")),
    }
}

fn synth(a: &SynthArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    if !(0.0..=1.0).contains(&a.ground_glass_fraction) {
        return Err(Failure::usage("--ground-glass-fraction must lie in [0, 1]"));
    }
    if a.extent < 8 {
        return Err(Failure::usage("--extent must be at least 8"));
    }
    let max_r = a.extent as f64 / 4.0;
    if let Some(r) = a.radius {
        if !(2.0..=max_r).contains(&r) {
            return Err(Failure::usage(format!("--radius must lie in [2, {max_r}]")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let glass = (a.ground_glass_fraction * a.count as f64).round() as usize;
    let mut order: Vec<usize> = (0..a.count).collect();
    order.shuffle(&mut rng);
    let mut is_glass = vec![false; a.count];
    order[..glass].iter().for_each(|&i| is_glass[i] = true);

    let hi = (a.extent as f64 / 5.0).clamp(2.0, max_r);
    let mut specs = Vec::with_capacity(a.count);
    for &glass in &is_glass {
        specs.push(PhantomSpec {
            extent: a.extent,
            nodule_radius_vox: a.radius.unwrap_or_else(|| rng.gen_range(2.0..=hi)),
            nodule_center: None,
            contrast: if glass { GROUND_GLASS_CONTRAST } else { a.solid_contrast },
            noise_sigma: a.noise,
            seed: rng.gen(),
        });
    }
    for s in &specs {
        s.validate().map_err(Failure::usage)?;
    }

    std::fs::create_dir_all(&a.out).map_err(Failure::runtime)?;
    let mut entries = Vec::with_capacity(a.count);
    for (i, spec) in specs.iter().enumerate() {
        let id = format!("case{i:04}");
        let p = generate_phantom(spec).map_err(Failure::runtime)?;
        let (image, mask) = (format!("{id}{IMAGE_SUFFIX}"), format!("{id}{MASK_SUFFIX}"));
        write_volume(&a.out.join(&image), &Volume::F32(p.image)).map_err(Failure::runtime)?;
        write_volume(&a.out.join(&mask), &Volume::U8(p.mask)).map_err(Failure::runtime)?;
        entries.push(ManifestEntry {
            id,
            image,
            mask,
            fold: None,
            contrast: Some(spec.contrast),
            radius: Some(spec.nodule_radius_vox),
        });
    }
    let manifest = DatasetManifest {
        samples: entries,
        screening: format!(
            "synthetic phantoms: extent {}, seed {}, ground-glass fraction {}",
            a.extent, a.seed, a.ground_glass_fraction
        ),
    };
    save_manifest(&a.out, &manifest).map_err(Failure::runtime)?;
    println!("wrote {} phantoms to {}", a.count, a.out.display());
    Ok(EXIT_OK)
}

/// Written next to a checkpoint.
#[derive(Serialize)]
struct History<'a> {
    fold: Option<usize>,
    best_epoch: usize,
    best: Metrics,
    stopped_early: bool,
    epochs: &'a [EpochRecord],
}

fn train(a: &TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config).map_err(Failure::usage)?;
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate().map_err(Failure::usage)?;
    let data = cfg.data.clone().ok_or_else(|| Failure::usage("no dataset: pass --data or set `data` in the config"))?;
    let out = cfg.out.clone().ok_or_else(|| Failure::usage("no output directory: pass --out or set `out` in the config"))?;
    if let Some(k) = a.fold {
        if k >= cfg.train.folds {
            return Err(Failure::usage(format!("--fold {k} out of range for {} folds", cfg.train.folds)));
        }
    }
    let (_, samples) = load_samples(&data).map_err(Failure::usage)?;
    if samples[0].image.shape()[1..].iter().any(|&e| e != cfg.network.input_extent) {
        return Err(Failure::usage(format!(
            "dataset volumes are {:?}, network.input_extent is {}",
            &samples[0].image.shape()[1..],
            cfg.network.input_extent
        )));
    }
    std::fs::create_dir_all(&out).map_err(Failure::runtime)?;
    write_json(&out.join("config.json"), &cfg).map_err(Failure::runtime)?;

    let report = if a.fit_all || a.fold.is_some() {
        let (train_set, val_set, fold) = match a.fold {
            None => (samples.clone(), samples, None),
            Some(k) => {
                let ids: Vec<usize> = (0..samples.len()).collect();
                let folds = kfold_split(&ids, cfg.train.folds, cfg.train.seed).map_err(Failure::usage)?;
                let pick = |ix: &[usize]| ix.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
                (pick(&folds[k].train), pick(&folds[k].val), Some(k))
            }
        };
        single_run(&cfg, &out, &train_set, &val_set, fold)?
    } else {
        cross_validate_with::<f32>(&samples, &cfg.network, &cfg.train, &cfg.loss, |f, net, outcome| {
            persist_run(&out, Some(f), net, outcome.best_epoch, outcome.best_metrics, outcome.stopped_early, &outcome.history)
                .map_err(|e| csunet_core::Error::InvalidConfig(e.message))
        })
        .map_err(Failure::runtime)?
    };
    write_json(&out.join("report.json"), &report).map_err(Failure::runtime)?;
    print_table(&report);
    Ok(EXIT_OK)
}

fn single_run(cfg: &RunConfig, out: &Path, train: &[Sample], val: &[Sample], fold: Option<usize>) -> Result<CvReport, Failure> {
    let mut net = CsuNet3d::<f32>::build(&cfg.network).map_err(Failure::usage)?;
    let outcome = fit(&mut net, train, val, &cfg.train, &cfg.loss).map_err(Failure::runtime)?;
    persist_run(out, fold, &net, outcome.best_epoch, outcome.best_metrics, outcome.stopped_early, &outcome.history)?;
    let eval = evaluate(&mut net, val, &cfg.loss).map_err(Failure::runtime)?;
    let (mean, std) = mean_std(&[eval.metrics]);
    Ok(CvReport {
        folds: vec![FoldResult {
            fold: fold.unwrap_or(0),
            metrics: eval.metrics,
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            val_ids: val.iter().map(|s| s.id.clone()).collect(),
        }],
        mean,
        std,
        config: cfg.report_config(),
    })
}

fn persist_run(
    out: &Path,
    fold: Option<usize>,
    net: &CsuNet3d<f32>,
    best_epoch: usize,
    best: Metrics,
    stopped_early: bool,
    epochs: &[EpochRecord],
) -> Result<(), Failure> {
    let stem = fold.map_or_else(|| "model".to_string(), |f| format!("fold{f}"));
    save_checkpoint(net, &out.join(format!("{stem}.csuc"))).map_err(Failure::runtime)?;
    let history = History { fold, best_epoch, best, stopped_early, epochs };
    write_json(&out.join(format!("{stem}.history.json")), &history).map_err(Failure::runtime)
}

fn print_metrics(label: &str, m: &Metrics) {
    println!(
        "{label:<6} SEN {:.4}  DSC {:.4}  PRE {:.4}  mIoU {:.4}",
        m.sen, m.dsc, m.pre, m.miou
    );
}

fn print_table(r: &CvReport) {
    for f in &r.folds {
        print_metrics(&format!("fold{}", f.fold), &f.metrics);
    }
    print_metrics("mean", &r.mean);
    print_metrics("std", &r.std);
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    #[serde(flatten)]
    metrics: Metrics,
    per_sample: Vec<(String, Metrics)>,
}

fn eval(a: &EvalArgs) -> CmdResult {
    let mut net = load_checkpoint(&a.model, None).map_err(Failure::usage)?;
    let (_, samples) = load_samples(&a.data).map_err(Failure::usage)?;
    let loss = LossConfig {
        class_count: net.config.num_classes,
        ..Default::default()
    };
    let result = evaluate(&mut net, &samples, &loss).map_err(Failure::usage)?;
    print_metrics("eval", &result.metrics);
    if let Some(path) = &a.report {
        let report = EvalReport {
            samples: samples.len(),
            metrics: result.metrics,
            per_sample: samples.iter().map(|s| s.id.clone()).zip(result.per_sample).collect(),
        };
        write_json(path, &report).map_err(Failure::runtime)?;
    }
    Ok(EXIT_OK)
}

fn predict(a: &PredictArgs) -> CmdResult {
    let mut net = load_checkpoint(&a.model, None).map_err(Failure::usage)?;
    let image = read_volume(&a.input).and_then(Volume::into_f32).map_err(Failure::usage)?;
    let shape = image.shape().to_vec();
    let x = image.unsqueeze0().map(f32::from);
    let logits = net.predict(&x).map_err(Failure::usage)?;
    let labels = argmax_labels(&logits).map_err(Failure::runtime)?;
    let mut mask_shape = shape.clone();
    mask_shape[0] = 1;
    let mask = labels.reshape(mask_shape).map_err(Failure::runtime)?;
    let fg = mask.data().iter().filter(|&&v| v != 0).count();
    write_volume(&a.output, &Volume::U8(mask)).map_err(Failure::runtime)?;
    println!(
        "wrote {} ({} foreground voxels of {})",
        a.output.display(),
        fg,
        shape[1..].iter().product::<usize>()
    );
    Ok(EXIT_OK)
}

fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    if !(a.tol > 0.0) {
        return Err(Failure::usage("--tol must be positive"));
    }
    let opts = BatteryOptions {
        tol: a.tol,
        fault: a.inject_fault.map(|FaultName::Conv3d| Fault::ConvBackwardSignFlip),
        network: !a.skip_network,
    };
    let report = run_battery(&opts).map_err(Failure::runtime)?;
    for item in &report.items {
        println!(
            "{:<22} {:<7} max_rel_err {:.3e}  tol {:.0e}  checked {:>4}  kinks {:>2}  {}",
            item.name,
            format!("{:?}", item.group).to_lowercase(),
            item.max_rel_err,
            item.tol,
            item.checked,
            item.kinks,
            if item.pass { "PASS" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.report {
        write_json(path, &report).map_err(Failure::runtime)?;
    }
    let failed: Vec<&str> = report.failures().map(|i| i.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} items passed", report.items.len());
        Ok(EXIT_OK)
    } else {
        println!("FAILED: {}", failed.join(", "));
        Ok(EXIT_FAILURE)
    }
}
