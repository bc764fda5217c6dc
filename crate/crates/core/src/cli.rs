//! The `spss` command line: dataset preparation, annotation, degradation,
//! training, evaluation, prediction, sweeps and report collation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::annotate::{
    annotate_dataset_keypoints, degrade_sp_clustering, degrade_sp_set_noise, extract_dataset_sp, train_sp_set,
    ClusterDegradeSpec, KeypointPlan, NoiseSpec, Renorm,
};
use crate::error::{Error, Result};
use crate::evaluate::{
    aggregate_reports, confusion_for, compute_metrics, predict_maps, render_markdown, resolve_excluded, write_report,
    MetricsReport,
};
use crate::ingest::{
    em_default_tiling, generate_synthetic, load_aerial_dubai_with, load_electron_microscopy, EdgePolicy, SyntheticSpec,
    TilingSpec,
};
use crate::io::{
    load_dataset, read_json, read_sp_csv, save_dataset, write_json, write_keypoint_csv, write_sp_csv,
    KEYPOINT_FILE, MANIFEST_FILE, SP_FILE,
};
use crate::nn::checkpoint::{self, AnyModel};
use crate::nn::export::{write_mask_preview, write_score_pngs};
use crate::nn::{gap, predict_masks, MaskRule, ModelState, Real};
use crate::sweeps::{run_sweep, trend_check_table, write_sweep_outputs, SweepKind, SweepSpec};
use crate::train::{run_repeated, train, write_run, Precision, TrainConfig, TrainMode, ValidationMode};
use crate::types::{split_dataset, validate_dataset, AnnotatedDataset, LabelMode};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SPSS_OUTPUT_ROOT";

/// Class left out of the scores unless `--exclude` says otherwise.
const UNLABELED: &str = "unlabeled";

#[derive(Parser, Debug)]
#[command(name = "spss", version, about = "Semantic segmentation trained from class proportions")]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON file with defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (defaults to $SPSS_OUTPUT_ROOT/<command>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a dataset from a raw corpus or the synthetic generator.
    Prepare(PrepareArgs),
    /// Extract proportions from masks and optionally sample keypoints.
    Annotate(AnnotateArgs),
    /// Write a degraded copy of the train-split proportions.
    Degrade(DegradeArgs),
    /// Train SPSS, SPSS+ or the mask-supervised benchmark.
    Train(TrainArgs),
    /// Score checkpoints on the test split.
    Eval(EvalArgs),
    /// Export score maps, masks and predicted proportions.
    Predict(PredictArgs),
    /// Run a noise or cluster degradation sweep.
    Sweep(SweepArgs),
    /// Collate report.json files into one comparison table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    /// Synthetic spec as key=value pairs, e.g. `classes=3 n=300 size=64`.
    #[arg(long, num_args = 1.., conflicts_with_all = ["dataset", "root"])]
    pub synthetic: Option<Vec<String>>,
    #[arg(long, value_enum, requires = "root")]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// Tiling overrides: `patch=256 stride=256 edge=drop_partial`.
    #[arg(long, num_args = 1..)]
    pub tile: Option<Vec<String>>,
    /// Per-channel tolerance when matching aerial mask colours.
    #[arg(long, default_value_t = 0)]
    pub colour_tolerance: u8,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum DatasetKind {
    Aerial,
    Em,
}

#[derive(Args, Debug)]
pub struct AnnotateArgs {
    /// Dataset directory; annotation files are written into it.
    #[arg(long)]
    pub data: PathBuf,
    /// Keypoint sampling: `n=3 radius=2 classes=a,b images=50`.
    #[arg(long, num_args = 1..)]
    pub keypoints: Option<Vec<String>>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `sigma=0.1 renorm=softmax_if_noisy`
    #[arg(long, num_args = 1.., conflicts_with = "cluster", required_unless_present = "cluster")]
    pub noise: Option<Vec<String>>,
    /// `k=10 max_iters=300`
    #[arg(long, num_args = 1..)]
    pub cluster: Option<Vec<String>>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub base_filters: Option<usize>,
    /// Early-stopping monitor: a held-out train subset or the test split.
    #[arg(long, value_enum)]
    pub validation: Option<ValidationKind>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ValidationKind {
    Holdout,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Spss,
    SpssPlus,
    Benchmark,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Proportion CSV replacing the dataset's own (e.g. a degraded copy).
    #[arg(long)]
    pub sp: Option<PathBuf>,
    /// Number of runs with consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// One or more checkpoints; several are aggregated as repeated runs.
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Class names left out of Mean IoU and F1. Defaults to `unlabeled`
    /// when the dataset has such a class; `--exclude none` keeps every class.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Foreground threshold for single-channel models.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Write per-class score maps and predicted masks of the test images.
    #[arg(long)]
    pub export_maps: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// `levels=0,0.1,0.3,0.5 renorm=softmax_if_noisy`
    #[arg(long, num_args = 1.., conflicts_with = "cluster", required_unless_present = "cluster")]
    pub noise: Option<Vec<String>>,
    /// `levels=N,N/3,10,5` where N is the number of train images.
    #[arg(long, num_args = 1..)]
    pub cluster: Option<Vec<String>>,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    /// As for `eval`.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    /// Continue a sweep in an existing output directory.
    #[arg(long)]
    pub resume: bool,
    /// Also report a trend check with this tolerance in Mean IoU points.
    #[arg(long)]
    pub trend_tolerance: Option<f64>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `name=dir` or `dir` entries, each holding a report.json.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<String>,
}

/// Defaults read from `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub output_root: Option<PathBuf>,
    pub train: Option<TrainConfig>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            Ok(serde_json::from_str(&text)?)
        } else {
            toml::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        }
    }
}

/// `key=value` arguments with typed lookup; leftovers are rejected.
struct Params {
    what: &'static str,
    map: BTreeMap<String, String>,
}

impl Params {
    fn parse(what: &'static str, items: &[String]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for item in items {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("--{what}: expected key=value, got {item:?}")))?;
            if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::invalid(format!("--{what}: {k} given twice")));
            }
        }
        Ok(Self { what, map })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.map
            .remove(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::invalid(format!("--{} {key}={v}: {e}", self.what)))
            })
            .transpose()
    }

    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn finish(self) -> Result<()> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::invalid(format!("--{}: unknown key {k:?}", self.what))),
        }
    }
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("expected `a-b` or `a`, got {s:?}"));
    match s.split_once('-') {
        Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
        None => {
            let v = s.parse().map_err(|_| bad())?;
            Ok((v, v))
        }
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::invalid(format!("unrecognised value {s:?}")))
}

struct Context {
    seed: u64,
    out_root: PathBuf,
    out: Option<PathBuf>,
    overwrite: bool,
    file: FileConfig,
}

impl Context {
    /// Output directory for a command, created empty; an existing non-empty
    /// directory is refused unless overwriting (or resuming).
    fn output_dir(&self, command: &str, reuse: bool) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| self.out_root.join(command));
        let non_empty = dir.is_dir() && fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
        if non_empty && !reuse {
            if !self.overwrite {
                return Err(Error::OutputExists(dir));
            }
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    fn train_config(&self, flags: &TrainFlags, mode: Option<TrainMode>) -> Result<TrainConfig> {
        let mut cfg = self.file.train.clone().unwrap_or_default();
        cfg.seed = self.seed;
        if let Some(m) = mode {
            cfg.mode = m;
        }
        if let Some(v) = flags.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = flags.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = flags.epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = flags.patience {
            cfg.patience = v;
        }
        if let Some(v) = flags.alpha {
            cfg.loss_cfg.alpha = v;
        }
        if let Some(v) = flags.base_filters {
            cfg.base_filters = v;
        }
        match (flags.validation, flags.val_fraction) {
            (Some(ValidationKind::Test), _) => cfg.validation = ValidationMode::TestSplit,
            (Some(ValidationKind::Holdout), f) => {
                cfg.validation = ValidationMode::Holdout { fraction: f.unwrap_or(0.1) }
            }
            (None, Some(f)) => cfg.validation = ValidationMode::Holdout { fraction: f },
            (None, None) => {}
        }
        if let Some(p) = flags.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        cfg.validate()?;
        log::info!("resolved training config: {}", serde_json::to_string(&cfg)?);
        Ok(cfg)
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out_root = file
        .output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("spss_out"));
    let ctx = Context {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out_root,
        out: cli.out,
        overwrite: cli.overwrite,
        file,
    };
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&ctx, a),
        Command::Annotate(a) => cmd_annotate(&ctx, a),
        Command::Degrade(a) => cmd_degrade(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Predict(a) => cmd_predict(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
    }
}

fn synthetic_spec(items: &[String], seed: u64) -> Result<SyntheticSpec> {
    let mut p = Params::parse("synthetic", items)?;
    let classes: usize = p.take("classes")?.unwrap_or(3);
    let n: usize = p.take("n")?.unwrap_or(100);
    let size: usize = p.take("size")?.unwrap_or(64);
    let seed: u64 = p.take("seed")?.unwrap_or(seed);
    let binary: bool = p.take("binary")?.unwrap_or(classes == 1);
    let ratio: Option<f64> = p.take("ratio")?;
    let mut spec = if binary {
        SyntheticSpec {
            imbalance_ratio: ratio,
            ..SyntheticSpec::binary_imbalanced(n, size, ratio.unwrap_or(1.0), seed)
        }
    } else {
        SyntheticSpec {
            imbalance_ratio: ratio,
            ..SyntheticSpec::multiclass(classes, n, size, seed)
        }
    };
    if let Some(c) = p.take("channels")? {
        spec.channels = c;
    }
    if let Some(v) = p.take("noise")? {
        spec.noise_std = v;
    }
    if let Some(r) = p.take_raw("radius") {
        spec.radius_range = parse_range(&r)?;
    }
    if let Some(r) = p.take_raw("count") {
        spec.count_range = parse_range(&r)?;
    }
    p.finish()?;
    Ok(spec)
}

fn tiling_spec(items: Option<&[String]>, default: TilingSpec) -> Result<TilingSpec> {
    let Some(items) = items else {
        return Ok(default);
    };
    let mut p = Params::parse("tile", items)?;
    let mut spec = default;
    if let Some(v) = p.take::<usize>("patch")? {
        spec.patch_m = v;
        spec.patch_h = v;
        spec.stride_m = v;
        spec.stride_h = v;
    }
    if let Some(v) = p.take::<usize>("stride")? {
        spec.stride_m = v;
        spec.stride_h = v;
    }
    if let Some(v) = p.take_raw("edge") {
        spec.edge_policy = parse_enum::<EdgePolicy>(&v)?;
    }
    p.finish()?;
    spec.validate()?;
    Ok(spec)
}

fn cmd_prepare(ctx: &Context, a: PrepareArgs) -> Result<()> {
    let (ds, provenance) = match (&a.synthetic, a.dataset, &a.root) {
        (Some(items), _, _) => {
            let spec = synthetic_spec(items, ctx.seed)?;
            (generate_synthetic(&spec)?, json!({ "source": "synthetic", "spec": spec }))
        }
        (None, Some(kind), Some(root)) => {
            if !root.is_dir() {
                return Err(Error::invalid(format!("dataset root {} does not exist", root.display())));
            }
            match kind {
                DatasetKind::Aerial => {
                    let spec = tiling_spec(a.tile.as_deref(), TilingSpec::square(224))?;
                    let ds = load_aerial_dubai_with(root, &spec, a.colour_tolerance)?;
                    (ds, json!({ "source": "aerial", "root": root, "tiling": spec, "colour_tolerance": a.colour_tolerance }))
                }
                DatasetKind::Em => {
                    let spec = tiling_spec(a.tile.as_deref(), em_default_tiling())?;
                    let ds = load_electron_microscopy(root, &spec)?;
                    (ds, json!({ "source": "em", "root": root, "tiling": spec }))
                }
            }
        }
        _ => {
            return Err(Error::invalid(
                "prepare needs --synthetic key=value... or --dataset {aerial,em} --root DIR",
            ))
        }
    };
    let mut ds = split_dataset(&ds, a.train_fraction, ctx.seed)?;
    // proportions and keypoints are written by `annotate`
    ds.sp.clear();
    ds.keypoints.clear();
    let dir = ctx.output_dir("prepare", false)?;
    let provenance = json!({ "dataset": provenance, "split_seed": ctx.seed, "train_fraction": a.train_fraction });
    let manifest = save_dataset(&dir, &ds, provenance)?;
    println!(
        "{} patches ({} train, {} test) written to {}",
        manifest.patches.len(),
        ds.train_ids().len(),
        ds.test_ids().len(),
        dir.display()
    );
    Ok(())
}

fn load_checked(dir: &Path) -> Result<AnnotatedDataset> {
    let (ds, _) = load_dataset(dir)?;
    let violations = validate_dataset(&ds);
    if let Some(v) = violations.first() {
        return Err(Error::Invariant(format!("{} dataset violations, first: {v}", violations.len())));
    }
    Ok(ds)
}

fn cmd_annotate(ctx: &Context, a: AnnotateArgs) -> Result<()> {
    let (mut ds, mut manifest) = load_dataset(&a.data)?;
    let missing: Vec<&str> = ds.patches.iter().map(|p| p.id()).filter(|id| !ds.gt_masks.contains_key(*id)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingAnnotation(format!(
            "{} images have no ground-truth mask (first: {})",
            missing.len(),
            missing[0]
        )));
    }
    let sp_path = a.data.join(SP_FILE);
    let kp_path = a.data.join(KEYPOINT_FILE);
    for path in [Some(&sp_path), a.keypoints.as_ref().map(|_| &kp_path)].into_iter().flatten() {
        if path.exists() && !ctx.overwrite {
            return Err(Error::OutputExists(path.clone()));
        }
    }
    ds.sp = extract_dataset_sp(&ds);
    write_sp_csv(&sp_path, &ds.class_names, &ds.sp)?;
    manifest.sp_file = Some(PathBuf::from(SP_FILE));
    let mut summary = format!("proportions for {} images", ds.sp.len());
    if let Some(items) = &a.keypoints {
        let mut p = Params::parse("keypoints", items)?;
        let mut plan = KeypointPlan {
            seed: ctx.seed,
            ..KeypointPlan::default()
        };
        if let Some(v) = p.take("n")? {
            plan.n_seeds = v;
        }
        if let Some(v) = p.take("radius")? {
            plan.radius = v;
        }
        if let Some(v) = p.take("images")? {
            plan.max_images = Some(v);
        }
        if let Some(v) = p.take("seed")? {
            plan.seed = v;
        }
        plan.classes = match p.take_raw("classes") {
            None => (0..ds.n_classes()).collect(),
            Some(list) => list
                .split(',')
                .map(|name| {
                    ds.class_names
                        .iter()
                        .position(|c| c == name.trim())
                        .or_else(|| name.trim().parse().ok().filter(|&j| j < ds.n_classes()))
                        .ok_or_else(|| Error::invalid(format!("unknown class {name:?}")))
                })
                .collect::<Result<_>>()?,
        };
        p.finish()?;
        ds.keypoints = annotate_dataset_keypoints(&ds, &plan)?;
        write_keypoint_csv(&kp_path, &ds.keypoints)?;
        manifest.keypoint_file = Some(PathBuf::from(KEYPOINT_FILE));
        summary.push_str(&format!(", {} keypoint annotations", ds.keypoints.len()));
        let mut prov = manifest.provenance.take();
        prov["keypoints"] = serde_json::to_value(&plan)?;
        manifest.provenance = prov;
    }
    if let Some(v) = validate_dataset(&ds).first() {
        return Err(Error::Invariant(v.to_string()));
    }
    write_json(&a.data.join(MANIFEST_FILE), &manifest)?;
    println!("{summary} written to {}", a.data.display());
    Ok(())
}

fn cmd_degrade(ctx: &Context, a: DegradeArgs) -> Result<()> {
    let ds = load_checked(&a.data)?;
    let set = train_sp_set(&ds)?;
    let (degraded, sidecar) = if let Some(items) = &a.noise {
        let mut p = Params::parse("noise", items)?;
        let spec = NoiseSpec {
            sigma: p.take("sigma")?.ok_or_else(|| Error::invalid("--noise needs sigma=<value>"))?,
            renorm: p.take_raw("renorm").map(|r| parse_enum::<Renorm>(&r)).transpose()?.unwrap_or_default(),
            seed: p.take("seed")?.unwrap_or(ctx.seed),
        };
        p.finish()?;
        let map = set.into_iter().collect();
        (degrade_sp_set_noise(&map, &spec)?, json!({ "mode": "noise", "spec": spec }))
    } else {
        let items = a.cluster.as_ref().expect("clap enforces one of --noise/--cluster");
        let mut p = Params::parse("cluster", items)?;
        let k: usize = p.take("k")?.ok_or_else(|| Error::invalid("--cluster needs k=<count>"))?;
        let mut spec = ClusterDegradeSpec::new(k, p.take("seed")?.unwrap_or(ctx.seed));
        if let Some(v) = p.take("max_iters")? {
            spec.max_iters = v;
        }
        p.finish()?;
        let (sp, clusters) = degrade_sp_clustering(&set, &spec)?;
        (sp, json!({ "mode": "cluster", "spec": spec, "clusters": clusters }))
    };
    let mut all = ds.sp.clone();
    all.extend(degraded);
    let dir = ctx.output_dir("degrade", false)?;
    write_sp_csv(&dir.join("sp_degraded.csv"), &ds.class_names, &all)?;
    let sidecar = json!({ "source": a.data, "degraded_split": "train", "degradation": sidecar });
    write_json(&dir.join("sp_degraded.json"), &sidecar)?;
    println!("degraded proportions written to {}", dir.join("sp_degraded.csv").display());
    Ok(())
}

fn mode_of(m: ModeArg) -> TrainMode {
    match m {
        ModeArg::Spss => TrainMode::Spss,
        ModeArg::SpssPlus => TrainMode::SpssPlus,
        ModeArg::Benchmark => TrainMode::Benchmark,
    }
}

fn train_runs<T: Real>(ds: &AnnotatedDataset, cfg: &TrainConfig, repeat: usize, dir: &Path, echo: &serde_json::Value) -> Result<()> {
    let runs = run_repeated::<T>(train, ds, cfg, repeat)?;
    for (k, (model, history)) in runs.iter().enumerate() {
        let run_dir = dir.join(format!("run_{k:02}"));
        write_run(&run_dir, model, history)?;
        write_json(&run_dir.join("run.json"), echo)?;
        println!(
            "run {k} (seed {}): {} epochs, best epoch {} with monitored loss {:.6}",
            history.seed, history.stopping_epoch, history.best_epoch, history.best_val_loss
        );
    }
    Ok(())
}

fn cmd_train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut ds = load_checked(&a.data)?;
    if let Some(sp) = &a.sp {
        let (names, map) = read_sp_csv(sp, ds.mode)?;
        if names != ds.class_names {
            return Err(Error::invalid(format!("{} has classes {names:?}", sp.display())));
        }
        ds.sp = map;
    }
    let cfg = ctx.train_config(&a.flags, a.mode.map(mode_of))?;
    if a.repeat == 0 {
        return Err(Error::invalid("--repeat must be at least 1"));
    }
    let dir = ctx.output_dir("train", false)?;
    let echo = json!({ "data": a.data, "sp_override": a.sp, "repeat": a.repeat, "config": cfg });
    write_json(&dir.join("resolved_config.json"), &echo)?;
    match cfg.precision {
        Precision::F32 => train_runs::<f32>(&ds, &cfg, a.repeat, &dir, &echo),
        Precision::F64 => train_runs::<f64>(&ds, &cfg, a.repeat, &dir, &echo),
    }
}

fn mask_rule(ds: &AnnotatedDataset, threshold: Option<f64>) -> Result<MaskRule> {
    match threshold {
        None => Ok(MaskRule::default_for(ds.n_classes())),
        Some(t) if ds.mode == LabelMode::Binary && (0.0..=1.0).contains(&t) => Ok(MaskRule::Threshold(t)),
        Some(_) => Err(Error::invalid("--threshold applies to binary datasets and must lie in [0, 1]")),
    }
}

fn export_maps<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, ids: &[&str], rule: MaskRule, dir: &Path) -> Result<BTreeMap<String, crate::types::ProportionVector>> {
    let maps_dir = dir.join("maps");
    let masks_dir = dir.join("masks");
    for d in [&maps_dir, &masks_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut predicted = BTreeMap::new();
    for chunk in ids.chunks(16) {
        for (id, maps) in chunk.iter().zip(predict_maps(model, ds, chunk)?) {
            let stem: String = id.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
            write_score_pngs(&maps_dir, &stem, &maps, &ds.class_names)?;
            write_mask_preview(&masks_dir.join(format!("{stem}.png")), &predict_masks(&maps, rule)?)?;
            predicted.insert(id.to_string(), gap(&maps));
        }
    }
    Ok(predicted)
}

fn eval_one<T: Real>(model: &ModelState<T>, ds: &AnnotatedDataset, rule: MaskRule, excluded: &[usize], export: Option<&Path>) -> Result<MetricsReport> {
    let ids = ds.test_ids();
    if ids.is_empty() {
        return Err(Error::Metrics("dataset has no test images".into()));
    }
    let acc = confusion_for(model, ds, &ids, rule)?;
    if let Some(dir) = export {
        export_maps(model, ds, &ids, rule, dir)?;
    }
    compute_metrics(&acc, &ds.eval_class_names(), excluded)
}

/// Class names to leave out of the scores: the explicit list, or the
/// `unlabeled` class when the dataset has one.
fn excluded_names(ds: &AnnotatedDataset, explicit: &[String]) -> Vec<String> {
    match explicit {
        [] => ds.eval_class_names().into_iter().filter(|c| c == UNLABELED).collect(),
        [only] if only == "none" => Vec::new(),
        _ => explicit.to_vec(),
    }
}

fn cmd_eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let ds = load_checked(&a.data)?;
    let test = ds.test_ids();
    if let Some(id) = test.iter().find(|id| !ds.gt_masks.contains_key(**id)) {
        return Err(Error::MissingAnnotation(format!("test image {id} has no ground-truth mask")));
    }
    let excluded = resolve_excluded(&ds, &excluded_names(&ds, &a.exclude))?;
    let rule = mask_rule(&ds, a.threshold)?;
    let dir = ctx.output_dir("eval", false)?;
    let mut reports = Vec::new();
    for (k, path) in a.checkpoint.iter().enumerate() {
        let export = a.export_maps.then(|| dir.join(format!("run_{k:02}")));
        let report = match checkpoint::load_any(path)? {
            AnyModel::F32(m) => eval_one(&m, &ds, rule, &excluded, export.as_deref())?,
            AnyModel::F64(m) => eval_one(&m, &ds, rule, &excluded, export.as_deref())?,
        };
        reports.push(report);
    }
    let report = aggregate_reports(&reports)?;
    let context = json!({
        "data": a.data,
        "checkpoints": a.checkpoint,
        "mask_rule": rule,
        "runs": reports,
    });
    write_report(&dir, "model", &report, &context)?;
    println!(
        "Mean IoU {:.4}, mean accuracy {:.4} over {} run(s); report in {}",
        report.mean_iou.mean,
        report.mean_accuracy.mean,
        report.n_runs,
        dir.display()
    );
    Ok(())
}

fn cmd_predict(ctx: &Context, a: PredictArgs) -> Result<()> {
    let (ds, _) = load_dataset(&a.data)?;
    let ids: Vec<&str> = match a.split {
        SplitArg::Train => ds.train_ids(),
        SplitArg::Test => ds.test_ids(),
        SplitArg::All => ds.patches.iter().map(|p| p.id()).collect(),
    };
    let rule = mask_rule(&ds, a.threshold)?;
    let dir = ctx.output_dir("predict", false)?;
    let predicted = match checkpoint::load_any(&a.checkpoint)? {
        AnyModel::F32(m) => export_maps(&m, &ds, &ids, rule, &dir)?,
        AnyModel::F64(m) => export_maps(&m, &ds, &ids, rule, &dir)?,
    };
    write_sp_csv(&dir.join("sp_predicted.csv"), &ds.class_names, &predicted)?;
    println!("predictions for {} images written to {}", ids.len(), dir.display());
    Ok(())
}

fn cluster_levels(list: &str, n_train: usize) -> Result<Vec<f64>> {
    list.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let value = if tok == "N" {
                n_train
            } else if let Some(d) = tok.strip_prefix("N/") {
                let d: usize = d.parse().map_err(|_| Error::invalid(format!("bad level {tok:?}")))?;
                if d == 0 {
                    return Err(Error::invalid("division by zero in cluster level"));
                }
                (n_train / d).max(1)
            } else {
                tok.parse().map_err(|_| Error::invalid(format!("bad level {tok:?}")))?
            };
            Ok(value as f64)
        })
        .collect()
}

fn cmd_sweep(ctx: &Context, a: SweepArgs) -> Result<()> {
    let ds = load_checked(&a.data)?;
    let (kind, items) = match (&a.noise, &a.cluster) {
        (Some(items), _) => (SweepKind::Noise, items),
        (None, Some(items)) => (SweepKind::Cluster, items),
        (None, None) => return Err(Error::invalid("sweep needs --noise or --cluster")),
    };
    let what = if kind == SweepKind::Noise { "noise" } else { "cluster" };
    let mut p = Params::parse(what, items)?;
    let list = p.take_raw("levels").ok_or_else(|| Error::invalid(format!("--{what} needs levels=a,b,...")))?;
    let levels = match kind {
        SweepKind::Noise => list
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| Error::invalid(format!("bad level {t:?}"))))
            .collect::<Result<Vec<_>>>()?,
        SweepKind::Cluster => cluster_levels(&list, ds.train_ids().len())?,
    };
    let cfg = ctx.train_config(&a.flags, Some(TrainMode::Spss))?;
    let mut spec = SweepSpec::new(kind, levels, cfg.clone(), ctx.seed);
    if let Some(r) = p.take_raw("renorm") {
        spec.renorm = parse_enum(&r)?;
    }
    if let Some(v) = p.take("max_iters")? {
        spec.cluster_max_iters = v;
    }
    p.finish()?;
    spec.n_runs = a.runs;
    spec.excluded_classes = excluded_names(&ds, &a.exclude);
    spec.validate(ds.train_ids().len())?;
    let dir = ctx.output_dir("sweep", a.resume)?;
    write_json(&dir.join("sweep_spec.json"), &json!({ "data": a.data, "spec": spec }))?;
    let table = match cfg.precision {
        Precision::F32 => run_sweep::<f32>(&ds, &spec, Some(&dir))?,
        Precision::F64 => run_sweep::<f64>(&ds, &spec, Some(&dir))?,
    };
    write_sweep_outputs(&dir, &table)?;
    for r in &table.rows {
        println!(
            "{:>12}  Mean IoU {:5.1} ± {:4.1}",
            r.label,
            100.0 * r.report.mean_iou.mean,
            100.0 * r.report.mean_iou.std
        );
    }
    if let Some(tol) = a.trend_tolerance {
        let t = trend_check_table(&table, tol);
        println!("trend check (tolerance {tol} points): {}", if t.passed { "pass" } else { "fail" });
        for (i, x, y) in t.violations {
            println!("  rise between levels {i} and {}: {x:.1} -> {y:.1}", i + 1);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct StoredReport {
    report: MetricsReport,
}

fn cmd_report(ctx: &Context, a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for item in &a.inputs {
        let (name, dir) = match item.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let d = PathBuf::from(item);
                let n = d.file_name().map_or_else(|| item.clone(), |n| n.to_string_lossy().into_owned());
                (n, d)
            }
        };
        let path = if dir.is_file() { dir } else { dir.join("report.json") };
        let stored: StoredReport = read_json(&path)?;
        rows.push((name, stored.report));
    }
    let refs: Vec<(String, &MetricsReport)> = rows.iter().map(|(n, r)| (n.clone(), r)).collect();
    let md = render_markdown(&refs);
    let dir = ctx.output_dir("report", false)?;
    let path = dir.join("report.md");
    fs::write(&path, &md).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("report.json"), &rows.iter().map(|(n, r)| json!({ "method": n, "report": r })).collect::<Vec<_>>())?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_parsing() {
        let items: Vec<String> = ["classes=3", "n=10", "size=32", "radius=2-5"].map(String::from).to_vec();
        let spec = synthetic_spec(&items, 4).unwrap();
        assert_eq!((spec.n_classes, spec.n_images, spec.m, spec.seed), (3, 10, 32, 4));
        assert_eq!(spec.radius_range, (2, 5));
        assert!(synthetic_spec(&["bogus=1".to_string()], 0).is_err());
        assert!(synthetic_spec(&["n".to_string()], 0).is_err());
    }

    #[test]
    fn cluster_level_tokens() {
        assert_eq!(cluster_levels("N,N/3,N/10,5", 240).unwrap(), vec![240.0, 80.0, 24.0, 5.0]);
        assert!(cluster_levels("N/0", 10).is_err());
    }

    #[test]
    fn flags_override_file_config() {
        let file = FileConfig {
            seed: Some(3),
            output_root: None,
            train: Some(TrainConfig {
                max_epochs: 7,
                batch_size: 4,
                ..TrainConfig::default()
            }),
        };
        let ctx = Context {
            seed: 9,
            out_root: PathBuf::from("x"),
            out: None,
            overwrite: false,
            file,
        };
        let flags = TrainFlags {
            lr: None,
            batch_size: Some(8),
            epochs: None,
            patience: None,
            alpha: None,
            base_filters: None,
            validation: None,
            val_fraction: None,
            precision: None,
        };
        let cfg = ctx.train_config(&flags, Some(TrainMode::Benchmark)).unwrap();
        assert_eq!((cfg.max_epochs, cfg.batch_size, cfg.seed), (7, 8, 9));
        assert_eq!(cfg.mode, TrainMode::Benchmark);
    }
}
