//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on I/O failure, 2 on invalid input or usage.
//!
//! Every subcommand accepts `--config FILE`, a flat `key = value` file whose
//! keys are the subcommand's long flag names. Values from the file are
//! applied first, so flags given on the command line win.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::anno::{self, Loaded};
use crate::error::{Error, Result};
use crate::frechet::{self, FeatureFormat, FidFilterOptions, FidFilterReport};
use crate::layout::{self, LayoutStats, SampleOptions};
use crate::metrics;
use crate::prfilter::{self, PrFilterConfig, PrFilterReport};
use crate::report::fmt6;
use crate::toyxfer::{self, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "detcurate",
    version,
    about = "Detection metrics and curation tools for generated training data",
    args_override_self = true
)]
struct Cli {
    /// Read default flag values from a `key = value` file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate detections against ground truth (precision, recall, F1, mAP).
    Eval(EvalArgs),
    /// Fréchet distance between two feature sets.
    Fid(FidArgs),
    /// Greedy leave-one-out FID filter over a generated feature set.
    FidFilter(FidFilterArgs),
    /// Keep generated images whose layout a filtering detector recovers.
    PrFilter(PrFilterArgs),
    /// Layout statistics and grounding-instruction sampling.
    #[command(subcommand)]
    Layout(LayoutCommand),
    /// Synthetic pretrain / fine-tune experiment.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Debug, Subcommand)]
enum LayoutCommand {
    /// Fit per-image box statistics from a ground-truth file.
    Fit(LayoutFitArgs),
    /// Sample grounding instructions from fitted statistics.
    Sample(LayoutSampleArgs),
}

#[derive(Debug, Subcommand)]
enum ToyCommand {
    /// Run the experiment grid.
    Run(ToyRunArgs),
}

#[derive(Debug, clap::Args)]
struct EvalArgs {
    /// Ground-truth file (COCO-style JSON).
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Detections file (JSON list).
    #[arg(long, value_name = "FILE")]
    dets: PathBuf,
    /// IoU needed for a detection to match a ground-truth box.
    #[arg(long, default_value_t = metrics::DEFAULT_IOU_THRESHOLD)]
    iou_threshold: f64,
    /// Confidence cut for the precision, recall and F1 figures.
    #[arg(long, default_value_t = metrics::DEFAULT_CONFIDENCE_CUT)]
    confidence_cut: f64,
    /// Also report mAP averaged over IoU 0.50:0.05:0.95.
    #[arg(long)]
    iou_range: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    /// `.csv` files are read as CSV, everything else as FETv1.
    Auto,
    Fet,
    Csv,
}

impl FormatArg {
    fn resolve(self, path: &Path) -> FeatureFormat {
        match self {
            FormatArg::Fet => FeatureFormat::Fet,
            FormatArg::Csv => FeatureFormat::Csv,
            FormatArg::Auto => {
                if path
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
                {
                    FeatureFormat::Csv
                } else {
                    FeatureFormat::Fet
                }
            }
        }
    }
}

#[derive(Debug, clap::Args)]
struct FidArgs {
    /// Real-image feature file.
    #[arg(long, value_name = "FILE")]
    real: PathBuf,
    /// Generated-image feature file.
    #[arg(long, value_name = "FILE")]
    generated: PathBuf,
    /// Feature file format.
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    format: FormatArg,
}

#[derive(Debug, clap::Args)]
struct FidFilterArgs {
    /// Real-image feature file.
    #[arg(long, value_name = "FILE")]
    real: PathBuf,
    /// Generated-image feature file to filter.
    #[arg(long, value_name = "FILE")]
    generated: PathBuf,
    /// Feature file format (input and output).
    #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
    format: FormatArg,
    /// Maximum number of passes over the generated set.
    #[arg(long, default_value_t = 1)]
    passes: usize,
    /// Stop as soon as the FID reaches this value.
    #[arg(long)]
    target_fid: Option<f64>,
    /// Write the kept feature records here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct PrFilterArgs {
    /// Ground truth of the generated images (the layouts they were asked for).
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Filtering detector's detections on the generated images.
    #[arg(long, value_name = "FILE")]
    dets: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    precision_threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    recall_threshold: f64,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Ignore detections below this confidence.
    #[arg(long, default_value_t = 0.0)]
    min_confidence: f64,
    /// Write the kept images as a ground-truth file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct LayoutFitArgs {
    /// Ground-truth file to fit.
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Write the statistics here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct LayoutSampleArgs {
    /// Statistics written by `layout fit`.
    #[arg(long, value_name = "FILE")]
    stats: PathBuf,
    #[arg(long, env = "DETCURATE_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of instructions to sample.
    #[arg(long, default_value_t = 1)]
    n_images: usize,
    /// Entity phrase attached to every box.
    #[arg(long, default_value = "car")]
    phrase: String,
    /// Prompt template; `{n}` is the box count and `{phrase}` the phrase.
    #[arg(
        long,
        default_value = "{n} {phrase}s in an urban environment, highly photorealistic"
    )]
    template: String,
    /// Upper bound on boxes per image.
    #[arg(long, default_value_t = 30)]
    k_max: usize,
    /// Style reference image, assigned round-robin (repeatable).
    #[arg(long = "style-ref", value_name = "PATH")]
    style_refs: Vec<String>,
    /// Write the instructions here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Also write the intended layouts as a ground-truth file.
    #[arg(long, value_name = "FILE")]
    gt_out: Option<PathBuf>,
    /// Canvas width for `--gt-out`.
    #[arg(long, default_value_t = 512)]
    width: u32,
    /// Canvas height for `--gt-out`.
    #[arg(long, default_value_t = 512)]
    height: u32,
    /// Category id for `--gt-out`; the phrase is its name.
    #[arg(long, default_value_t = 1)]
    category_id: i64,
}

#[derive(Debug, clap::Args)]
struct ToyRunArgs {
    /// First seed; the experiment uses `--seeds` consecutive seeds.
    #[arg(long, env = "DETCURATE_SEED", default_value_t = 0)]
    seed: u64,
    /// Number of seeds.
    #[arg(long, default_value_t = 10)]
    seeds: usize,
    /// Generated-scene counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ExperimentConfig::default().n_generated)]
    n_generated: Vec<usize>,
    /// Real-scene counts, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = ExperimentConfig::default().n_real)]
    n_real: Vec<usize>,
    /// Include the precision/recall-filtered pretraining arm.
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    pr_filter: bool,
    #[arg(long, default_value_t = ExperimentConfig::default().corruption.p_miss)]
    p_miss: f64,
    #[arg(long, default_value_t = ExperimentConfig::default().corruption.p_spur)]
    p_spur: f64,
    /// Offset added to every feature dimension of generated scenes.
    #[arg(long, default_value_t = ExperimentConfig::default().corruption.domain_shift[0])]
    domain_shift: f64,
    /// Extra feature noise on generated scenes.
    #[arg(long, default_value_t = 0.0)]
    extra_noise: f64,
    /// Feature noise of every scene.
    #[arg(long, default_value_t = ExperimentConfig::default().noise_sigma)]
    noise_sigma: f64,
    /// Object signal strength.
    #[arg(long, default_value_t = ExperimentConfig::default().signal)]
    signal: f64,
    /// Anchor grid side.
    #[arg(long, default_value_t = ExperimentConfig::default().grid)]
    grid: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = ExperimentConfig::default().feature_dim)]
    feature_dim: usize,
    /// Real test scenes per seed.
    #[arg(long, default_value_t = ExperimentConfig::default().n_test)]
    n_test: usize,
    #[arg(long, default_value_t = ExperimentConfig::default().pretrain.learning_rate)]
    pretrain_lr: f64,
    #[arg(long, default_value_t = ExperimentConfig::default().finetune.learning_rate)]
    finetune_lr: f64,
    /// Worker threads (seeds run in parallel; results do not depend on it).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the per-seed CSV here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write the aggregate JSON here.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Write an SVG plot of mean mAP against generated-scene count.
    #[arg(long, value_name = "FILE")]
    plot: Option<PathBuf>,
}

impl ToyRunArgs {
    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            n_generated: self.n_generated.clone(),
            n_real: self.n_real.clone(),
            seeds: (0..self.seeds as u64).map(|i| self.seed + i).collect(),
            use_pr_filter: self.pr_filter,
            grid: self.grid,
            feature_dim: self.feature_dim,
            signal: self.signal,
            noise_sigma: self.noise_sigma,
            n_test: self.n_test,
            ..Default::default()
        };
        c.corruption.p_miss = self.p_miss;
        c.corruption.p_spur = self.p_spur;
        c.corruption.domain_shift = vec![self.domain_shift; self.feature_dim];
        c.corruption.noise_sigma = self.extra_noise;
        c.pretrain.learning_rate = self.pretrain_lr;
        c.finetune.learning_rate = self.finetune_lr;
        c
    }
}

/// Failure of a CLI run, already mapped to its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_io() { EXIT_IO } else { EXIT_INVALID },
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: message.into(),
    }
}

/// Runs the CLI with `args` (including the program name) and returns the
/// exit code. Reports go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match apply_config_file(args) {
        Ok(a) => a,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().ansi().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_INVALID
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

/// Removes `--config FILE` from `args` and splices the file's entries in as
/// flags right after the subcommand path, ahead of any flag given on the
/// command line.
fn apply_config_file(args: Vec<OsString>) -> Result<Vec<OsString>, Failure> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            match it.next() {
                Some(p) => config = Some(PathBuf::from(p)),
                None => return Err(usage("--config needs a file")),
            }
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };

    let text = fs::read_to_string(&path).map_err(|e| Failure::from(Error::io(&path, e)))?;
    let root = Cli::command();
    let mut cmd = &root;
    let mut split = 1;
    while let Some(sub) = rest
        .get(split)
        .and_then(|a| cmd.find_subcommand(a.to_string_lossy().as_ref()))
    {
        cmd = sub;
        split += 1;
    }
    if cmd.has_subcommands() {
        return Err(usage("--config needs a subcommand"));
    }

    let mut injected: Vec<OsString> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| usage(format!("{}:{}: {m}", path.display(), lineno + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad("expected `key = value`"))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        let arg = cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| bad(&format!("unknown key `{key}` for `{}`", cmd.get_name())))?;
        let flag = format!("--{key}");
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => injected.push(flag.into()),
                "false" => {}
                _ => return Err(bad(&format!("`{key}` takes true or false"))),
            }
        } else if matches!(arg.get_action(), ArgAction::Append) {
            for v in value.split(',').map(str::trim).filter(|v| !v.is_empty()) {
                injected.push(flag.clone().into());
                injected.push(v.into());
            }
        } else {
            injected.push(flag.into());
            injected.push(value.into());
        }
    }
    let tail = rest.split_off(split);
    rest.extend(injected);
    rest.extend(tail);
    Ok(rest)
}

fn warn_all<T>(loaded: Loaded<T>, what: &Path, err: &mut dyn Write) -> T {
    for w in &loaded.warnings {
        let _ = writeln!(err, "warning: {}: {w}", what.display());
    }
    loaded.value
}

fn emit(text: &str, path: Option<&Path>, out: &mut dyn Write) -> Result<(), Failure> {
    match path {
        Some(p) => write_file(p, text),
        None => out
            .write_all(text.as_bytes())
            .and_then(|()| out.write_all(b"\n"))
            .map_err(|e| Failure::from(Error::io("<stdout>", e))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    match command {
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Fid(a) => cmd_fid(a, out, err),
        Command::FidFilter(a) => cmd_fid_filter(a, out, err),
        Command::PrFilter(a) => cmd_pr_filter(a, out, err),
        Command::Layout(LayoutCommand::Fit(a)) => cmd_layout_fit(a, out, err),
        Command::Layout(LayoutCommand::Sample(a)) => cmd_layout_sample(a, out),
        Command::Toy(ToyCommand::Run(a)) => cmd_toy_run(a, out),
    }
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let gt = warn_all(anno::load_ground_truth(&a.gt)?, &a.gt, err);
    let dets = anno::load_detections(&a.dets, &gt)?;
    let mut report = metrics::evaluate(&dets, &gt, a.iou_threshold, a.confidence_cut)?;
    if a.iou_range {
        report.map_coco = Some(metrics::map_over_iou_thresholds(
            &dets,
            &gt,
            &metrics::coco_iou_thresholds(),
        )?);
    }
    emit(&report.to_json_string(), a.out.as_deref(), out)
}

fn load_features(
    path: &Path,
    format: FormatArg,
    err: &mut dyn Write,
) -> Result<frechet::FeatureSet, Failure> {
    Ok(warn_all(
        frechet::load_features(path, format.resolve(path))?,
        path,
        err,
    ))
}

fn cmd_fid(a: FidArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let real = load_features(&a.real, a.format, err)?;
    let generated = load_features(&a.generated, a.format, err)?;
    if real.dim() != generated.dim() {
        return Err(Error::DimensionMismatch(real.dim(), generated.dim()).into());
    }
    let d2 = frechet::frechet_distance(
        &frechet::fit_stats(&real)?,
        &frechet::fit_stats(&generated)?,
    )?;
    emit(&fmt6(d2), None, out)
}

fn cmd_fid_filter(a: FidFilterArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    if a.passes == 0 {
        return Err(usage("--passes must be at least 1"));
    }
    let real = load_features(&a.real, a.format, err)?;
    let generated = load_features(&a.generated, a.format, err)?;
    let outcome = frechet::fid_filter(
        &generated,
        &real,
        FidFilterOptions {
            passes: a.passes,
            target_fid: a.target_fid,
        },
    )?;
    if let Some(p) = &a.out {
        outcome.kept.write(p, a.format.resolve(p))?;
    }
    let report = FidFilterReport::from(&outcome);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    emit(&text, a.report.as_deref(), out)
}

fn cmd_pr_filter(a: PrFilterArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let gt = warn_all(anno::load_ground_truth(&a.gt)?, &a.gt, err);
    let mut dets = anno::load_detections(&a.dets, &gt)?;
    dets.retain(|d| d.confidence >= a.min_confidence);
    let cfg = PrFilterConfig {
        precision_threshold: a.precision_threshold,
        recall_threshold: a.recall_threshold,
        iou_threshold: a.iou_threshold,
    };
    let (kept, decisions) = prfilter::pr_filter(&gt, &dets, &cfg)?;
    if let Some(p) = &a.out {
        kept.write(p)?;
    }
    let report = PrFilterReport::new(&cfg, decisions);
    emit(&report.to_json_string(), a.report.as_deref(), out)
}

fn cmd_layout_fit(a: LayoutFitArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let gt = warn_all(anno::load_ground_truth(&a.gt)?, &a.gt, err);
    let stats = layout::fit_layout(&gt)?;
    emit(&stats.to_json_string(), a.out.as_deref(), out)
}

fn cmd_layout_sample(a: LayoutSampleArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let stats = LayoutStats::load(&a.stats)?;
    let opts = SampleOptions {
        k_max: a.k_max,
        style_refs: a.style_refs.clone(),
        ..Default::default()
    };
    let instructions =
        layout::sample_layout(&stats, a.seed, a.n_images, &a.phrase, &a.template, &opts)?;
    if let Some(p) = &a.gt_out {
        layout::render_dataset(&instructions, a.width, a.height, (a.category_id, &a.phrase))?
            .write(p)?;
    }
    emit(
        &layout::instructions_to_json_string(&instructions),
        a.out.as_deref(),
        out,
    )
}

fn cmd_toy_run(a: ToyRunArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let config = a.config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| usage(e.to_string()))?;
    let results = pool.install(|| toyxfer::run_experiment(&config))?;
    if let Some(p) = &a.json {
        write_file(p, &results.to_json_string())?;
    }
    if let Some(p) = &a.plot {
        write_file(p, &results.to_svg())?;
    }
    let csv = results.to_csv();
    match &a.out {
        Some(p) => write_file(p, &csv),
        None => out
            .write_all(csv.as_bytes())
            .map_err(|e| Failure::from(Error::io("<stdout>", e))),
    }
}
