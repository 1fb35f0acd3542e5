//! Command-line interface. Exit codes: 0 success, 1 failed check or runtime
//! error, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{bench_core, BenchShape};
use crate::blocks::{CoreMode, GcMode};
use crate::config::{Precision, RunConfig};
use crate::convert::{convert_to_sac, is_converted, ConvertOptions};
use crate::detector::{preset, BBox, Detection, Detector, PostprocessOptions, PRESETS};
use crate::error::{Result, SacError};
use crate::geometry::{geometry, GeometryQuery, DEFAULT_RATE};
use crate::gradcheck::{run_block, BLOCKS};
use crate::params::seeded_rng;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::train::{evaluate_detector, evaluate_map, load_dataset, synth_generate, train, Dataset, SynthConfig, TrainError};
use crate::weights::{load_weights, save_weights};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAIL: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Tolerance for `convert --verify`.
pub const CONVERT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "sacnet", version, about = "Switchable atrous convolution toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective kernel size and padding of an atrous convolution.
    Geometry(GeometryArgs),
    /// Compare analytic and finite-difference gradients of a block (64-bit).
    Gradcheck(GradcheckArgs),
    /// Write randomly initialized weights for a preset.
    Init(InitArgs),
    /// Convert plain depthwise cores of a weight file to switchable atrous cores.
    Convert(ConvertArgs),
    /// Generate a synthetic detection dataset.
    Synth(SynthArgs),
    /// Train a detector from a JSON run configuration.
    Train(TrainArgs),
    /// Score weights or a detections file against a dataset.
    Eval(EvalArgs),
    /// Report multiply counts and throughput of a depthwise core.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    #[arg(long)]
    pub kernel: usize,
    #[arg(long)]
    pub rate: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Input extent along the axis; only matters for stride > 1.
    #[arg(long, default_value_t = 64)]
    pub input: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(BLOCKS))]
    pub block: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, default_value = "toy-d0", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = CoreArg::Plain)]
    pub core: CoreArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CoreArg {
    Plain,
    Dsac,
    Dapsc,
}

impl From<CoreArg> for CoreMode {
    fn from(c: CoreArg) -> Self {
        match c {
            CoreArg::Plain => CoreMode::Plain,
            CoreArg::Dsac => CoreMode::Dsac,
            CoreArg::Dapsc => CoreMode::Dapsc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ConvertMode {
    Dsac,
    Dapsc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ContextArg {
    None,
    Global,
    Local,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ConvertMode,
    /// Architecture the weights belong to.
    #[arg(long, default_value = "toy-d0", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    pub preset: String,
    #[arg(long, default_value_t = DEFAULT_RATE)]
    pub rate: usize,
    #[arg(long, value_enum, default_value_t = ContextArg::Global)]
    pub context: ContextArg,
    /// Run both models on 16 random inputs and fail if outputs differ by more than 1e-6.
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value_t = 0)]
    pub verify_seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for config echo, metrics.jsonl, checkpoints and final.sacw.
    #[arg(long)]
    pub out: PathBuf,
    /// Print one line per step to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory; defaults to the validation set described by the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    pub weights: Option<PathBuf>,
    /// Detections JSON (`{"images":[{"id":..,"detections":[{"class","bbox","score"}]}]}`);
    /// an annotation file is accepted with every score taken as 1.
    #[arg(long)]
    pub detections: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchBlock {
    Plain,
    Dsac,
    Dapsc,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    pub block: BenchBlock,
    #[arg(long, default_value_t = 10)]
    pub iterations: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<SacError> for Failure {
    fn from(e: SacError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CmdResult = std::result::Result<u8, Failure>;

pub fn run(cli: Cli) -> u8 {
    let res = match cli.command {
        Command::Geometry(a) => cmd_geometry(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Init(a) => cmd_init(a),
        Command::Convert(a) => cmd_convert(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match res {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_FAIL
        }
    }
}

fn print_json<S: Serialize>(v: &S) {
    println!("{}", serde_json::to_string(v).expect("report serializes"));
}

fn cmd_geometry(a: GeometryArgs) -> CmdResult {
    let q = GeometryQuery::new(a.kernel, a.rate, a.stride, a.input).map_err(|e| Failure::Usage(e.to_string()))?;
    let r = geometry(&q).map_err(|e| Failure::Usage(e.to_string()))?;
    print_json(&r);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let report = run_block(&a.block, a.seed)?;
    let passed = report.passed();
    print_json(&json!({ "report": report, "passed": passed }));
    Ok(if passed { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let cfg = preset(&a.preset)?.with_core(a.core.into());
    let model = Detector::<f32>::new(cfg, a.seed)?;
    save_weights(&a.out, &model.store)?;
    print_json(&json!({ "tensors": model.store.len(), "scalars": model.store.num_scalars() }));
    Ok(EXIT_OK)
}

/// Max abs difference of both head outputs over `count` random inputs.
pub fn max_output_diff<T: Real>(a: &Detector<T>, b: &Detector<T>, count: usize, seed: u64) -> Result<f64> {
    let c = &a.config;
    let mut rng = seeded_rng(seed, 11);
    let mut worst = 0f64;
    for _ in 0..count {
        let x = Tensor::<T>::randn([1, c.in_channels, c.input_size, c.input_size], 1.0, &mut rng);
        let (ca, ba) = a.predict(&x)?;
        let (cb, bb) = b.predict(&x)?;
        worst = worst.max(ca.max_abs_diff(&cb)).max(ba.max_abs_diff(&bb));
    }
    Ok(worst)
}

fn cmd_convert(a: ConvertArgs) -> CmdResult {
    let store = load_weights::<f32>(&a.input)?;
    if is_converted(&store) {
        return Err(Failure::Runtime(format!(
            "{}: weights are already converted (switch or global-context tensors present); convert a plain baseline",
            a.input.display()
        )));
    }
    let cfg = preset(&a.preset)?;
    let baseline = Detector::from_store(cfg, store).map_err(|e| Failure::Runtime(format!("{}: {e}", a.input.display())))?;
    let mut opts = ConvertOptions::new(match a.mode {
        ConvertMode::Dsac => CoreMode::Dsac,
        ConvertMode::Dapsc => CoreMode::Dapsc,
    });
    opts.rate = a.rate;
    opts.context = match a.context {
        ContextArg::None => None,
        ContextArg::Global => Some(GcMode::Global),
        ContextArg::Local => Some(GcMode::Local),
    };
    let converted = convert_to_sac(&baseline, opts)?;
    save_weights(&a.out, &converted.store)?;
    if !a.verify {
        print_json(&json!({ "tensors": converted.store.len() }));
        return Ok(EXIT_OK);
    }
    let diff = max_output_diff(&baseline, &converted, 16, a.verify_seed)?;
    let passed = diff <= CONVERT_TOLERANCE;
    print_json(&json!({ "tensors": converted.store.len(), "max_abs_diff": diff, "inputs": 16, "passed": passed }));
    Ok(if passed { EXIT_OK } else { EXIT_FAIL })
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let ds = synth_generate(&a.out, a.seed, a.count, &SynthConfig::default())?;
    let objects: usize = ds.records.iter().map(|r| r.objects.len()).sum();
    print_json(&json!({ "images": ds.len(), "objects": objects, "path": a.out }));
    Ok(EXIT_OK)
}

fn load_config(path: Option<&Path>) -> std::result::Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(RunConfig::default()),
    }
}

/// Training images described by the config.
pub fn training_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(p),
        None => Ok(Dataset::synthesize(cfg.data.seed, 0, cfg.data.count, &cfg.data.synth)),
    }
}

/// Validation images: rendered after the training indices unless a path is given.
pub fn validation_set(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.val_path {
        Some(p) => load_dataset(p),
        None => Ok(Dataset::synthesize(
            cfg.data.seed,
            cfg.data.count as u64,
            cfg.data.val_count,
            &cfg.data.synth,
        )),
    }
}

pub fn postprocess_options(cfg: &RunConfig) -> PostprocessOptions {
    PostprocessOptions {
        score_threshold: cfg.eval.score_threshold,
        nms_iou: cfg.eval.nms_iou,
        max_detections: cfg.eval.max_detections,
    }
}

fn train_and_report<T: Real>(cfg: &RunConfig, out: &Path, verbose: bool) -> CmdResult {
    let ds = training_set(cfg)?;
    let outcome = train::<T>(cfg, &ds, Some(out), |r| {
        if verbose {
            eprintln!(
                "step {} epoch {} loss {:.5} focal {:.5} box {:.5} lr {:.5}",
                r.step, r.epoch, r.loss, r.focal, r.box_loss, r.lr
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ TrainError::Diverged { .. }) => return Err(Failure::Runtime(e.to_string())),
        Err(TrainError::Other(e)) => return Err(e.into()),
    };
    let first = outcome.records.first().map(|r| r.loss);
    let last = outcome.records.last().map(|r| r.loss);
    let mut summary = json!({ "steps": outcome.records.len(), "initial_loss": first, "final_loss": last });
    if cfg.data.val_count > 0 || cfg.data.val_path.is_some() {
        let val = validation_set(cfg)?;
        let (report, _) = evaluate_detector(&outcome.model, &val, &postprocess_options(cfg), &cfg.eval.iou_thresholds, 32)?;
        let path = out.join("eval.json");
        fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| SacError::io(&path, e))?;
        summary["val"] = serde_json::to_value(&report).expect("report serializes");
    }
    print_json(&summary);
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    match cfg.precision {
        Precision::F32 => train_and_report::<f32>(&cfg, &a.out, a.verbose),
        Precision::F64 => train_and_report::<f64>(&cfg, &a.out, a.verbose),
    }
}

fn default_score() -> f64 {
    1.0
}

#[derive(Deserialize)]
struct DetectionEntry {
    class: usize,
    bbox: BBox,
    #[serde(default = "default_score")]
    score: f64,
}

#[derive(Deserialize)]
struct DetectionImage {
    id: u64,
    #[serde(alias = "objects")]
    detections: Vec<DetectionEntry>,
}

#[derive(Deserialize)]
struct DetectionFile {
    images: Vec<DetectionImage>,
}

fn read_detections(path: &Path, ds: &Dataset) -> Result<Vec<Vec<Detection>>> {
    let text = fs::read_to_string(path).map_err(|e| SacError::io(path, e))?;
    let file: DetectionFile = serde_json::from_str(&text).map_err(|e| SacError::format(path, e.to_string()))?;
    let mut out = vec![Vec::new(); ds.len()];
    for img in file.images {
        let slot = ds
            .records
            .iter()
            .position(|r| r.id == img.id)
            .ok_or_else(|| SacError::format(path, format!("image id {} not in the dataset", img.id)))?;
        out[slot].extend(img.detections.into_iter().map(|d| Detection {
            bbox: d.bbox,
            class: d.class,
            score: d.score,
        }));
    }
    Ok(out)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    let ds = match &a.data {
        Some(p) => load_dataset(p)?,
        None => validation_set(&cfg)?,
    };
    let report = if let Some(det_path) = &a.detections {
        let dets = read_detections(det_path, &ds)?;
        let gts: Vec<_> = ds.records.iter().map(|r| r.objects.clone()).collect();
        evaluate_map(&dets, &gts, &cfg.eval.iou_thresholds, 3)
    } else {
        let wpath = a.weights.as_ref().expect("clap requires weights or detections");
        let store = load_weights::<f32>(wpath)?;
        let model = Detector::from_store(cfg.model_config()?, store)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", wpath.display())))?;
        evaluate_detector(&model, &ds, &postprocess_options(&cfg), &cfg.eval.iou_thresholds, 32)?.0
    };
    print_json(&report);
    Ok(EXIT_OK)
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let mode = match a.block {
        BenchBlock::Plain => CoreMode::Plain,
        BenchBlock::Dsac => CoreMode::Dsac,
        BenchBlock::Dapsc => CoreMode::Dapsc,
    };
    let shape = BenchShape {
        batch: a.batch,
        channels: a.channels,
        size: a.size,
        kernel: a.kernel,
        stride: 1,
    };
    let report = bench_core(mode, shape, a.iterations).map_err(|e| Failure::Usage(e.to_string()))?;
    print_json(&report);
    Ok(EXIT_OK)
}
