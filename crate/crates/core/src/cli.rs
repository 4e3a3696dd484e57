//! The `mmdrfuse` command line.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::data::{make_patches, save_fused, synthetic_pairs, write_dataset, Manifest, PatchSet, CROPS_PER_PAIR, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, METRIC_NAMES};
use crate::nets::{Arch, FusionNet};
use crate::refresh::{DiskStore, MemoryStore, RefreshStore};
use crate::train::{checkpoint_path, Trainer, TrainConfig};
use crate::vgg::VggWeights;

pub const VGG_ENV: &str = "MMDRFUSE_VGG";
pub const PATCH_FILE: &str = "patches.mmps";
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "mmdrfuse", version, about = "Infrared/visible fusion with a 113-parameter distilled network")]
pub struct Cli {
    /// Also report failures as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Crop a pair dataset into a patch archive and write its manifest.
    PrepareData(PrepareArgs),
    /// Train the teacher network.
    TrainTeacher(TrainArgs),
    /// Train the student against a frozen teacher.
    TrainStudent(StudentArgs),
    /// Fuse every pair of a dataset into PNGs.
    Fuse(FuseArgs),
    /// Score fused images against their sources.
    Evaluate(EvaluateArgs),
    /// Print parameter count, payload size and MACs of a weights file.
    InspectModel(InspectArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Dataset directory (with ir/ and vis/) or a manifest file.
    #[arg(long, required_unless_present = "synthetic")]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic pairs instead of reading --data.
    #[arg(long, conflicts_with = "data")]
    pub synthetic: Option<usize>,
    /// Size of synthetic pairs.
    #[arg(long, default_value = "64x64", value_parser = parse_res)]
    pub synthetic_res: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = CROPS_PER_PAIR)]
    pub crops: usize,
    #[arg(long, default_value_t = PATCH_SIZE)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Patch archive, or the directory prepare-data wrote.
    #[arg(long)]
    pub data: PathBuf,
    /// VGG-19 weight blob.
    #[arg(long, env = VGG_ENV)]
    pub vgg: PathBuf,
    /// Output directory for weights, checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file of training settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Keep refresh records on disk under OUT/refresh instead of in memory.
    #[arg(long)]
    pub disk_store: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub ablation: AblationArgs,
}

#[derive(Debug, Args)]
pub struct StudentArgs {
    /// Trained teacher weights.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Default, Args)]
pub struct AblationArgs {
    #[arg(long)]
    pub no_intensity: bool,
    #[arg(long)]
    pub no_gradient: bool,
    #[arg(long)]
    pub no_perception: bool,
    #[arg(long)]
    pub no_refresh: bool,
    #[arg(long)]
    pub no_distill: bool,
    #[arg(long)]
    pub no_digestible: bool,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset directory (with ir/ and vis/) or a manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Source pairs: dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of `{id}.png` fused images.
    #[arg(long)]
    pub fused: PathBuf,
    /// Directory for metrics.csv and metrics.json; CSV goes to stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Resolution for the MAC count, WIDTHxHEIGHT.
    #[arg(long, default_value = "1280x1024", value_parser = parse_res)]
    pub res: (usize, usize),
}

/// Parses `WxH` into `(width, height)`.
pub fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| format!("bad dimension {v:?} in {s:?}"));
    Ok((dim(w)?, dim(h)?))
}

/// Exit status of a failed command.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": e.to_string(),
        "exit_code": exit_code(e),
        "numeric": e.is_numeric(),
    })
    .to_string()
}

/// Applies `key = value` lines to `config`. Blank lines and `#` comments
/// are skipped.
pub fn apply_config_text(config: &mut TrainConfig, text: &str) -> Result<()> {
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::Config(format!("line {}: {key} expects {what}, got {value:?}", n + 1));
        let float = || value.parse::<f64>().map_err(|_| bad("a number"));
        let int = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let flag = || value.parse::<bool>().map_err(|_| bad("true or false"));
        let a = &mut config.ablation;
        match key.replace('-', "_").as_str() {
            "epochs" => config.epochs = int()?,
            "batch_size" => config.batch_size = int()?,
            "lr" => config.lr = float()?,
            "seed" => config.seed = value.parse().map_err(|_| bad("an integer"))?,
            "gamma" => config.weights.gamma = float()?,
            "delta" => config.weights.delta = float()?,
            "theta" => config.weights.theta = float()?,
            "lambda" => config.weights.lambda = float()?,
            "no_intensity" => a.no_intensity = flag()?,
            "no_gradient" => a.no_gradient = flag()?,
            "no_perception" => a.no_perception = flag()?,
            "no_refresh" => a.no_refresh = flag()?,
            "no_distill" => a.no_distill = flag()?,
            "no_digestible" => a.no_digestible = flag()?,
            other => return Err(Error::Config(format!("line {}: unknown key {other:?}", n + 1))),
        }
    }
    Ok(())
}

impl TrainArgs {
    /// Phase defaults, then the config file, then flags.
    pub fn config(&self, phase: Arch) -> Result<TrainConfig> {
        let mut c = TrainConfig::for_phase(phase);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            apply_config_text(&mut c, &text)?;
        }
        macro_rules! set {
            ($($field:ident => $target:expr),*) => {$(
                if let Some(v) = self.$field {
                    $target = v;
                }
            )*};
        }
        set!(seed => c.seed, epochs => c.epochs, batch_size => c.batch_size, lr => c.lr,
             gamma => c.weights.gamma, delta => c.weights.delta, theta => c.weights.theta, lambda => c.weights.lambda);
        let f = &self.ablation;
        let a = &mut c.ablation;
        a.no_intensity |= f.no_intensity;
        a.no_gradient |= f.no_gradient;
        a.no_perception |= f.no_perception;
        a.no_refresh |= f.no_refresh;
        a.no_distill |= f.no_distill;
        a.no_digestible |= f.no_digestible;
        if phase == Arch::Teacher && (a.no_distill || a.no_digestible) {
            return Err(Error::Config("distillation switches only apply to train-student".into()));
        }
        c.validate()?;
        Ok(c)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Missing(vec![format!("{what} {}", path.display())]))
    }
}

fn prepare_data(a: &PrepareArgs) -> Result<String> {
    create_dir(&a.out)?;
    let manifest = match (a.synthetic, &a.data) {
        (Some(n), _) => write_dataset(a.out.join("pairs"), &synthetic_pairs(n, a.synthetic_res.1, a.synthetic_res.0, a.seed))?,
        (None, Some(d)) => Manifest::open(d)?,
        (None, None) => return Err(Error::Config("--data or --synthetic is required".into())),
    };
    let patches = make_patches(&manifest, a.crops, a.patch_size, a.seed)?;
    patches.save(a.out.join(PATCH_FILE))?;
    write_file(&a.out.join(MANIFEST_FILE), manifest.to_tsv())?;
    Ok(format!(
        "pairs: {}\npatches: {} ({}x{})\nwrote {}",
        manifest.len(),
        patches.len(),
        a.patch_size,
        a.patch_size,
        a.out.display()
    ))
}

fn load_patches(path: &Path) -> Result<PatchSet> {
    let file = if path.is_dir() { path.join(PATCH_FILE) } else { path.to_path_buf() };
    require_file(&file, "patch archive")?;
    PatchSet::load(file)
}

fn train(phase: Arch, a: &TrainArgs, teacher_path: Option<&Path>) -> Result<String> {
    let config = a.config(phase)?;
    let distills = phase == Arch::Student && !config.ablation.no_distill && config.weights.theta != 0.0;
    require_file(&a.vgg, "VGG blob")?;
    if let Some(r) = &a.resume {
        require_file(r, "checkpoint")?;
    }
    let teacher = match teacher_path {
        Some(p) if distills => {
            require_file(p, "teacher weights")?;
            Some(FusionNet::from_bytes_as(Arch::Teacher, &std::fs::read(p).map_err(|e| Error::io(p, e))?)?)
        }
        None if distills => return Err(Error::Config("train-student needs --teacher unless distillation is disabled".into())),
        _ => None,
    };
    let patches = load_patches(&a.data)?;
    let vgg = VggWeights::load(&a.vgg)?;
    let ckpt_dir = a.out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let store: Box<dyn RefreshStore> = if a.disk_store {
        Box::new(DiskStore::open(a.out.join(format!("refresh-{phase}")))?)
    } else {
        Box::new(MemoryStore::new())
    };
    let mut trainer = Trainer::new(config, FusionNet::init(phase, a.seed.unwrap_or(0)), teacher.as_ref(), &vgg, store)?;
    if let Some(r) = &a.resume {
        trainer.resume(&std::fs::read(r).map_err(|e| Error::io(r, e))?)?;
    }
    let log_path = a.out.join(format!("{phase}_loss.csv"));
    let result = trainer.train(&patches, Some(&ckpt_dir));
    write_file(&log_path, trainer.log().to_csv())?;
    result?;
    let weights = a.out.join(format!("{phase}.mmdr"));
    trainer.net().save(&weights)?;
    let log = trainer.log();
    let mut lines = vec![log.header.clone()];
    for e in 0..log.epochs() {
        if let Some(m) = log.epoch_mean(e) {
            lines.push(format!("epoch {}: mean total loss {m:.6}", e + 1));
        }
    }
    lines.push(format!("wrote {}", weights.display()));
    lines.push(format!("wrote {}", log_path.display()));
    if trainer.epochs_done() > 0 {
        lines.push(format!("checkpoint {}", checkpoint_path(&ckpt_dir, phase, trainer.epochs_done()).display()));
    }
    Ok(lines.join("\n"))
}

fn fuse(a: &FuseArgs) -> Result<String> {
    require_file(&a.weights, "weights")?;
    let net = FusionNet::load(&a.weights)?;
    let manifest = Manifest::open(&a.data)?;
    create_dir(&a.out)?;
    for i in 0..manifest.len() {
        let pair = manifest.load_pair(i)?;
        let fused = net.fuse(&pair.ir, &pair.vis)?;
        save_fused(a.out.join(format!("{}.png", pair.id)), &fused, pair.chroma.as_ref())?;
    }
    Ok(format!("fused {} pairs with the {} into {}", manifest.len(), net.arch(), a.out.display()))
}

fn evaluate(a: &EvaluateArgs) -> Result<String> {
    let manifest = Manifest::open(&a.data)?;
    let report = evaluate_dataset(&manifest, &a.fused)?;
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write_file(&dir.join("metrics.csv"), report.to_csv())?;
            write_file(&dir.join("metrics.json"), report.to_json())?;
            let mean = METRIC_NAMES
                .iter()
                .zip(report.mean.values())
                .map(|(n, v)| format!("{n} {v:.4}"))
                .collect::<Vec<_>>()
                .join("  ");
            Ok(format!("{} images\nmean: {mean}\nwrote {}", report.count, dir.display()))
        }
        None => Ok(report.to_csv().trim_end().to_string()),
    }
}

/// The inspect-model report for a network.
pub fn inspect_report(net: &FusionNet, width: usize, height: usize) -> String {
    let macs = net.mac_count(height, width);
    format!(
        "arch: {}\nlayers: {}\nparams: {}\npayload: {} bytes\nmacs: {:.3} G ({macs} at {width}x{height})",
        net.arch(),
        net.layers().len(),
        net.param_count(),
        net.payload_len(),
        macs as f64 / 1e9
    )
}

fn inspect(a: &InspectArgs) -> Result<String> {
    require_file(&a.weights, "weights")?;
    let net = FusionNet::load(&a.weights)?;
    Ok(inspect_report(&net, a.res.0, a.res.1))
}

/// Runs a parsed command and returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::PrepareData(a) => prepare_data(a),
        Command::TrainTeacher(a) => train(Arch::Teacher, a, None),
        Command::TrainStudent(a) => train(Arch::Student, &a.train, a.teacher.as_deref()),
        Command::Fuse(a) => fuse(a),
        Command::Evaluate(a) => evaluate(a),
        Command::InspectModel(a) => inspect(a),
    }
}

/// Parses `std::env::args`, runs, reports and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if cli.json {
                eprintln!("{}", error_json(&e));
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
