//! Command-line front end.
//!
//! Every command that writes a directory also writes `run_config.json`
//! holding the exact flag values it ran with.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::ablate::{ablate, AblationConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, split_segments, synth_generate, Dataset, SplitAssignment, SynthConfig, BACKGROUND};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_map, write_map_png};
use crate::gradcheck::run_suite;
use crate::net::{AvailabilityMask, NetworkSpec};
use crate::train::{resume, train, write_trace, CheckpointSink, TrainingConfig, TrainingSet};

#[derive(Debug, Parser)]
#[command(name = "mtcn", version, about = "Multi-temporal ConvNet for pixel classification over image time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phenology dataset.
    Synth(SynthArgs),
    /// Train a network and write checkpoints plus a loss trace.
    Train(TrainArgs),
    /// Write a predicted label map and a per-pixel CSV.
    Predict(PredictArgs),
    /// Score a checkpoint on one side of the split.
    Evaluate(EvaluateArgs),
    /// Rank timestamps and select low-correlation subsets.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 12)]
    pub segments_per_class: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 12)]
    pub timestamps: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 2.5)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 4.0)]
    pub radius_max: f64,
    /// Timestamp at which every class gets its own color.
    #[arg(long)]
    pub separable_timestamp: Option<usize>,
    /// Timestamps marked unavailable, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub missing: Vec<usize>,
    /// `SOURCE,COPY`: make timestamp COPY an exact copy of SOURCE.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    pub duplicate: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Architecture flags shared by `train` and `ablate`. Widths default to the
/// published network.
#[derive(Debug, Clone, Args, Serialize)]
pub struct NetworkArgs {
    #[arg(long, default_value_t = 64)]
    pub branch_filters: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [128, 256])]
    pub trunk_filters: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1024, 1024])]
    pub fc_sizes: Vec<usize>,
    /// Single-branch baseline over all timestamps stacked channel-wise.
    #[arg(long)]
    pub two_d_cnn: bool,
    /// One set of branch weights shared by every timestamp.
    #[arg(long)]
    pub shared_branches: bool,
}

impl NetworkArgs {
    fn spec(&self, dataset: &Dataset) -> Result<NetworkSpec> {
        let (t, c, k) = (dataset.stack.len(), dataset.stack.channels, dataset.num_classes());
        let base = if self.two_d_cnn { NetworkSpec::two_d_cnn(t, c, k) } else { NetworkSpec::paper(t, c, k) };
        if self.trunk_filters.len() != base.trunk.len() {
            return Err(Error::config(format!("--trunk-filters needs {} values", base.trunk.len())));
        }
        let mut spec = base.with_widths(self.branch_filters, &self.trunk_filters, &self.fc_sizes);
        spec.share_branch_params = self.shared_branches;
        spec.validate()?;
        Ok(spec)
    }
}

/// Optimizer flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 5000)]
    pub iters: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 50_000)]
    pub decay_interval: u64,
    #[arg(long, default_value_t = 0.5)]
    pub decay_rate: f64,
    /// Draw batches uniformly over classes instead of over pixels.
    #[arg(long)]
    pub class_balanced: bool,
    /// Fraction of each class's segments used for training.
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64, missing_data: bool) -> TrainingConfig {
        TrainingConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            max_iterations: self.iters,
            decay_interval: self.decay_interval,
            decay_rate: self.decay_rate,
            batch_size: self.batch_size,
            seed,
            missing_data_mode: missing_data,
            class_balanced: self.class_balanced,
            ..TrainingConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Train with branch dropout so the model tolerates missing timestamps.
    #[arg(long)]
    pub missing_data: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub network: NetworkArgs,
    #[arg(long, default_value_t = 100)]
    pub trace_interval: u64,
    /// Also write `checkpoint_<iter>.mtcn` every this many iterations.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_interval: u64,
    /// Continue from a checkpoint written with the same flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MaskArgs {
    /// Restrict inference to these timestamps, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub available: Option<Vec<usize>>,
}

impl MaskArgs {
    fn mask(&self, t: usize) -> Result<AvailabilityMask> {
        match &self.available {
            None => Ok(AvailabilityMask::all(t)),
            Some(list) => {
                if let Some(&bad) = list.iter().find(|&&j| j >= t) {
                    return Err(Error::config(format!("--available names timestamp {bad} of {t}")));
                }
                Ok(AvailabilityMask::only(t, list))
            }
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "prediction")]
    pub out: PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSide {
    Train,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSide::Test)]
    pub split: SplitSide,
    /// Split written by `train`; defaults to `split.json` beside the
    /// checkpoint, else the split is recomputed from the seed.
    #[arg(long)]
    pub split_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub train_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "evaluation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub mask: MaskArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "ablation")]
    pub out: PathBuf,
    /// Subset sizes; every size from 2 up when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Only select subsets; skip retraining on them.
    #[arg(long)]
    pub no_retrain: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub network: NetworkArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Optional directory for a JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunConfig<'a, A: Serialize> {
    command: &'static str,
    version: &'static str,
    args: &'a A,
}

fn write_run_config<A: Serialize>(dir: &Path, command: &'static str, args: &A) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = RunConfig { command, version: env!("CARGO_PKG_VERSION"), args };
    write_json(&dir.join("run_config.json"), &cfg)
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 usage, 2 data, 3 numeric.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let duplicate = match a.duplicate.as_deref() {
        None => None,
        Some(&[src, copy]) => Some((src, copy)),
        Some(_) => return Err(Error::config("--duplicate takes SOURCE,COPY")),
    };
    let cfg = SynthConfig {
        classes: a.classes,
        segments_per_class: a.segments_per_class,
        size: a.size,
        timestamps: a.timestamps,
        channels: a.channels,
        noise: a.noise,
        seed: a.seed,
        radius: (a.radius_min, a.radius_max),
        separable_timestamp: a.separable_timestamp,
        missing: a.missing.clone(),
        duplicate,
    };
    fs::create_dir_all(&a.out)?;
    let manifest = synth_generate(&cfg, &a.out)?;
    write_run_config(&a.out, "synth", a)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.manifest)?;
    let spec = a.network.spec(&dataset)?;
    let config = TrainingConfig {
        trace_interval: a.trace_interval,
        checkpoint_interval: a.checkpoint_interval,
        ..a.optim.config(a.seed, a.missing_data)
    };
    config.validate()?;
    let split = split_segments(&dataset.labels, a.optim.train_ratio, a.seed)?;
    let samples = split.train_samples(&dataset.labels);
    write_run_config(&a.out, "train", a)?;
    write_json(&a.out.join("split.json"), &split)?;

    let data = TrainingSet { stack: &dataset.stack, samples: &samples };
    let sink = CheckpointSink { dir: Some(a.out.clone()) };
    let outcome = match &a.resume {
        Some(path) => resume(Checkpoint::load(path)?, data, &config, &sink)?,
        None => train(&spec, data, &config, &sink)?,
    };
    write_trace(&a.out.join("trace.csv"), &outcome.trace)?;
    if let Some(last) = outcome.trace.last() {
        log::info!("iteration {} loss {:.4} batch accuracy {:.3}", last.iteration, last.loss, last.batch_accuracy);
    }
    println!("{}", a.out.join("final.mtcn").display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let dataset = load_dataset(&a.manifest)?;
    let mask = a.mask.mask(dataset.stack.len())?;
    let map = predict_map(&checkpoint.params, &dataset.stack, &dataset.labels, &mask)?;
    write_run_config(&a.out, "predict", a)?;

    let (w, h) = (dataset.labels.width, dataset.labels.height);
    write_map_png(&a.out.join("prediction.png"), &map, w, h, &dataset.manifest.class_colors())?;
    crate::data::manifest::write_png8(&a.out.join("labels.png"), w, h, 1, &map)?;
    let names = &dataset.manifest.classes;
    let mut csv = String::from("x,y,class,name\n");
    for y in 0..h {
        for x in 0..w {
            let c = map[y * w + x];
            if c != BACKGROUND {
                let name = names.get(c as usize).map_or("", String::as_str);
                csv.push_str(&format!("{x},{y},{c},{name}\n"));
            }
        }
    }
    fs::write(a.out.join("predictions.csv"), csv)?;
    Ok(())
}

fn load_split(a: &EvaluateArgs, dataset: &Dataset) -> Result<SplitAssignment> {
    let beside = a.checkpoint.parent().map(|p| p.join("split.json"));
    let path = a.split_file.clone().or_else(|| beside.filter(|p| p.exists()));
    match path {
        Some(p) => {
            let file =
                fs::File::open(&p).map_err(|e| Error::data(format!("cannot open split {}: {e}", p.display())))?;
            Ok(serde_json::from_reader(file)?)
        }
        None => split_segments(&dataset.labels, a.train_ratio, a.seed),
    }
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.checkpoint)?;
    let dataset = load_dataset(&a.manifest)?;
    let mask = a.mask.mask(dataset.stack.len())?;
    let samples = match a.split {
        SplitSide::All => dataset.labels.annotated(),
        side => {
            let split = load_split(a, &dataset)?;
            if side == SplitSide::Test {
                split.test_samples(&dataset.labels)
            } else {
                split.train_samples(&dataset.labels)
            }
        }
    };
    if samples.is_empty() {
        return Err(Error::input("no labeled pixel on the requested side of the split"));
    }
    let (report, _) = evaluate(&checkpoint.params, &dataset.stack, &samples, &mask, &dataset.manifest.classes)?;
    write_run_config(&a.out, "evaluate", a)?;
    write_json(&a.out.join("report.json"), &report)?;
    fs::write(a.out.join("confusion.csv"), report.confusion.to_csv(&dataset.manifest.classes))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    println!("average_accuracy {:.2}", report.average_accuracy);
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let dataset = load_dataset(&a.manifest)?;
    let spec = a.network.spec(&dataset)?;
    let mut config = AblationConfig::new(spec, a.optim.config(a.seed, false));
    config.sizes = a.sizes.clone();
    config.validation_fraction = a.validation_fraction;
    config.retrain = !a.no_retrain;
    let split = split_segments(&dataset.labels, a.optim.train_ratio, a.seed)?;
    write_run_config(&a.out, "ablate", a)?;
    let report = ablate(&dataset, &split, &config)?;
    write_json(&a.out.join("ablation.json"), &report)?;
    let table = report.table();
    fs::write(a.out.join("subsets.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let checks = run_suite(a.seed)?;
    for c in &checks {
        let status = if c.passed() { "ok" } else { "FAILED" };
        println!(
            "{:<28} {:>6} values  max rel err {:.3e} (< {:.0e})  {status}",
            c.name, c.checked, c.max_relative_error, c.tolerance
        );
    }
    if let Some(dir) = &a.out {
        write_run_config(dir, "gradcheck", a)?;
        write_json(&dir.join("gradcheck.json"), &checks)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
