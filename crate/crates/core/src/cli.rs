//! Command-line front end: synth, sample, train, register, evaluate,
//! landmarks and diffimg.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 non-finite loss during training.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, landmark_report, MetricReport};
use crate::infer::{plan_tiling, register, Blend};
use crate::sampler::{
    extract_records, read_patch_archive, sample_patches, specs_to_csv, write_patch_archive, SamplerConfig,
    SamplingMode,
};
use crate::synth::{make_pair, SynthConfig};
use crate::trainer::{load_checkpoint, train, PatchPool, TrainConfig, TrainOptions, TrainState};
use crate::volio::{
    read_field, read_landmarks, read_volume, write_field, write_landmarks, write_volume, Dims, DisplacementField,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NONFINITE: i32 = 3;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "patchreg", version, about = "Patch-based 3D deformable registration")]
pub struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "PATCHREG_THREADS")]
    pub threads: Option<usize>,
    /// Run single-threaded so every output is bit-reproducible.
    #[arg(long, global = true, env = "PATCHREG_DETERMINISTIC")]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair with known truth field and landmarks.
    Synth(SynthArgs),
    /// Draw intensity-weighted patch windows from a volume pair.
    Sample(SampleArgs),
    /// Train generator and discriminators on patches.
    Train(TrainArgs),
    /// Register a full volume pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Similarity (and optional landmark) metrics of a registration, as JSON.
    Evaluate(EvaluateArgs),
    /// Landmark distances after moving landmarks through a field, as CSV.
    Landmarks(LandmarksArgs),
    /// Difference (and optional overlay) PNG of one slice.
    Diffimg(DiffimgArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Volume size in voxels: one value for a cube or three for x,y,z.
    #[arg(long, num_args = 1..=3, value_delimiter = ',', env = "PATCHREG_DIMS")]
    pub dims: Option<Vec<usize>>,
    /// Voxel size in mm, x,y,z.
    #[arg(long, num_args = 3, value_delimiter = ',', env = "PATCHREG_SPACING")]
    pub spacing: Option<Vec<f32>>,
    #[arg(long, env = "PATCHREG_BLOB_COUNT")]
    pub blob_count: Option<usize>,
    /// Smallest blob sigma in voxels.
    #[arg(long, env = "PATCHREG_BLOB_SIGMA_MIN")]
    pub blob_sigma_min: Option<f64>,
    /// Largest blob sigma in voxels.
    #[arg(long, env = "PATCHREG_BLOB_SIGMA_MAX")]
    pub blob_sigma_max: Option<f64>,
    /// Largest truth displacement in voxels.
    #[arg(long, env = "PATCHREG_AMPLITUDE")]
    pub amplitude: Option<f64>,
    /// Smoothing sigma of the truth field in voxels.
    #[arg(long, env = "PATCHREG_SMOOTHNESS")]
    pub smoothness: Option<f64>,
    /// Number of landmark pairs.
    #[arg(long, env = "PATCHREG_LANDMARK_COUNT")]
    pub landmark_count: Option<usize>,
    #[arg(long, env = "PATCHREG_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SamplerFlags {
    /// Patch mean (intensity units) below which patches are never kept.
    #[arg(long, env = "PATCHREG_SAMPLER_LOW")]
    pub sampler_low: Option<f64>,
    /// Patch mean above which acceptance starts to decay.
    #[arg(long, env = "PATCHREG_SAMPLER_HIGH")]
    pub sampler_high: Option<f64>,
    /// Decay constant of the acceptance weight.
    #[arg(long, env = "PATCHREG_SAMPLER_K")]
    pub sampler_k: Option<f64>,
    /// Numerator of the decay branch.
    #[arg(long, env = "PATCHREG_SAMPLER_SCALE")]
    pub sampler_scale: Option<f64>,
    /// Draw budget before sampling gives up.
    #[arg(long, env = "PATCHREG_MAX_DRAWS")]
    pub max_draws: Option<u64>,
    /// Keep every patch whose mean exceeds this value instead of weighting.
    #[arg(long, env = "PATCHREG_FIXED_THRESHOLD")]
    pub fixed_threshold: Option<f64>,
}

impl SamplerFlags {
    fn apply(&self, cfg: &mut SamplerConfig) {
        set(&mut cfg.low, self.sampler_low);
        set(&mut cfg.high, self.sampler_high);
        set(&mut cfg.k, self.sampler_k);
        set(&mut cfg.scale, self.sampler_scale);
        set(&mut cfg.max_draws, self.max_draws);
        if let Some(t) = self.fixed_threshold {
            cfg.mode = SamplingMode::FixedThreshold(t);
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Number of accepted patches.
    #[arg(long, default_value_t = 100, env = "PATCHREG_COUNT")]
    pub count: usize,
    /// Patch edge in voxels.
    #[arg(long, env = "PATCHREG_PATCH_SIZE")]
    pub patch_size: Option<usize>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, env = "PATCHREG_SEED")]
    pub seed: Option<u64>,
    /// CSV of patch origins (i,j,k,P).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the extracted patch pairs to this archive.
    #[arg(long)]
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training volume; give at least two. Every ordered pair is used.
    #[arg(long = "volume", conflicts_with = "patches")]
    pub volumes: Vec<PathBuf>,
    /// Pre-extracted patch archive instead of volumes.
    #[arg(long)]
    pub patches: Option<PathBuf>,
    /// JSON training config used as the base before flag overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint; only --iterations and --checkpoint-every apply.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total iterations to reach.
    #[arg(long, env = "PATCHREG_ITERATIONS")]
    pub iterations: Option<u64>,
    #[arg(long, env = "PATCHREG_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    #[arg(long, env = "PATCHREG_LR_GENERATOR")]
    pub lr_generator: Option<f64>,
    #[arg(long, env = "PATCHREG_LR_DISCRIMINATOR")]
    pub lr_discriminator: Option<f64>,
    #[arg(long, env = "PATCHREG_BETA1")]
    pub beta1: Option<f64>,
    #[arg(long, env = "PATCHREG_BETA2")]
    pub beta2: Option<f64>,
    /// Sampled patch windows per ordered volume pair.
    #[arg(long, env = "PATCHREG_PATCHES_PER_PAIR")]
    pub patches_per_pair: Option<usize>,
    /// Train without discriminators.
    #[arg(long, env = "PATCHREG_NO_ADVERSARIAL")]
    pub no_adversarial: bool,
    /// Weight of the adversarial term.
    #[arg(long, env = "PATCHREG_LAMBDA_ADV")]
    pub lambda_adv: Option<f64>,
    /// Local NCC window edge in voxels (odd).
    #[arg(long, env = "PATCHREG_NCC_WINDOW")]
    pub ncc_window: Option<usize>,
    /// Local NCC variance floor.
    #[arg(long, env = "PATCHREG_NCC_EPSILON")]
    pub ncc_epsilon: Option<f64>,
    /// Checkpoint interval in iterations (0: only at the end).
    #[arg(long, env = "PATCHREG_CHECKPOINT_EVERY")]
    pub checkpoint_every: Option<u64>,
    /// Per-network gradient norm cap.
    #[arg(long, env = "PATCHREG_GRAD_CLIP")]
    pub grad_clip: Option<f64>,
    /// Patch edge in voxels (power of two, at least 16).
    #[arg(long, env = "PATCHREG_PATCH_SIZE")]
    pub patch_size: Option<usize>,
    #[arg(long, env = "PATCHREG_BASE_CHANNELS")]
    pub base_channels: Option<usize>,
    #[arg(long, env = "PATCHREG_LEAKY_SLOPE")]
    pub leaky_slope: Option<f64>,
    /// Std of the final flow layer's initial weights.
    #[arg(long, env = "PATCHREG_FLOW_INIT_STD")]
    pub flow_init_std: Option<f64>,
    #[command(flatten)]
    pub sampler: SamplerFlags,
    #[arg(long, env = "PATCHREG_SEED")]
    pub seed: Option<u64>,
    /// Output directory for checkpoints, metrics.jsonl and the manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BlendArg {
    RaisedCosine,
    Overwrite,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Checkpoint file, or a training directory (its latest checkpoint is used).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Tile overlap in voxels.
    #[arg(long, default_value_t = 16, env = "PATCHREG_OVERLAP")]
    pub overlap: usize,
    #[arg(long, value_enum, default_value_t = BlendArg::RaisedCosine, env = "PATCHREG_BLEND")]
    pub blend: BlendArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Reference volume.
    #[arg(long)]
    pub fixed: PathBuf,
    /// Volume before registration.
    #[arg(long)]
    pub moving: PathBuf,
    /// Volume after registration.
    #[arg(long)]
    pub moved: PathBuf,
    /// Field that carries moving landmarks onto fixed ones (voxel units).
    #[arg(long, requires_all = ["fixed_landmarks", "moving_landmarks"])]
    pub field: Option<PathBuf>,
    #[arg(long)]
    pub fixed_landmarks: Option<PathBuf>,
    #[arg(long)]
    pub moving_landmarks: Option<PathBuf>,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LandmarksArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Displacement field in voxel units.
    #[arg(long)]
    pub field: PathBuf,
    /// Voxel size in mm for distances (default: the field's spacing).
    #[arg(long, num_args = 3, value_delimiter = ',')]
    pub spacing: Option<Vec<f64>>,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiffimgArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    /// Axis normal to the slice: 0 = x, 1 = y, 2 = z.
    #[arg(long, default_value_t = 2)]
    pub axis: usize,
    /// Slice index in voxels (default: middle).
    #[arg(long)]
    pub index: Option<usize>,
    /// Difference PNG path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write a red/green overlay PNG (red = a, green = b).
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

/// Record written beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Resolved configuration with all defaults filled in.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub seed: Option<u64>,
    pub artifact_version: String,
    pub argv: Vec<String>,
    pub threads: usize,
    pub deterministic: bool,
    pub wall_time_s: f64,
}

struct Run {
    subcommand: &'static str,
    config: serde_json::Value,
    inputs: BTreeMap<String, PathBuf>,
    outputs: BTreeMap<String, PathBuf>,
    seed: Option<u64>,
    manifest_path: PathBuf,
}

impl Run {
    fn new(subcommand: &'static str, manifest_path: PathBuf) -> Self {
        Self {
            subcommand,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            manifest_path,
        }
    }

    fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.to_path_buf());
    }

    fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.to_path_buf());
    }

    fn config(&mut self, value: &impl Serialize) {
        self.config = serde_json::to_value(value).expect("config serializes");
    }

    /// Refuses to overwrite any input.
    fn guard(&self) -> Result<()> {
        let canon = |p: &Path| std::fs::canonicalize(p).ok();
        for out in self.outputs.values().chain([&self.manifest_path]) {
            if let Some(o) = canon(out) {
                if self.inputs.values().any(|i| canon(i).as_ref() == Some(&o)) {
                    return Err(Error::Config(format!(
                        "output {} would overwrite an input",
                        out.display()
                    )));
                }
            }
        }
        Ok(())
    }

    fn finish(self, ctx: &Context) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            seed: self.seed,
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            argv: ctx.argv.clone(),
            threads: ctx.threads,
            deterministic: ctx.deterministic,
            wall_time_s: ctx.started.elapsed().as_secs_f64(),
        };
        write_json(&self.manifest_path, &manifest)
    }
}

struct Context {
    argv: Vec<String>,
    threads: usize,
    deterministic: bool,
    started: Instant,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text)
}

/// `dir/name.ext` -> `dir/name.ext.manifest.json`
fn manifest_beside(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn parse_dims(values: &[usize]) -> Result<Dims> {
    match *values {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(Error::Config(format!(
            "--dims takes one or three values, got {}",
            values.len()
        ))),
    }
}

/// Maps a library error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite(_) => EXIT_NONFINITE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads(cli: &Cli) -> Result<usize> {
    let threads = if cli.deterministic {
        1
    } else {
        match cli.threads {
            Some(0) => return Err(Error::Config("--threads must be >= 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    };
    // The global pool can only be built once per process; later calls keep it.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(threads)
}

fn execute(cli: Cli, argv: Vec<String>) -> Result<()> {
    let threads = configure_threads(&cli)?;
    let ctx = Context {
        argv,
        threads,
        deterministic: cli.deterministic,
        started: Instant::now(),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &ctx),
        Command::Sample(a) => cmd_sample(a, &ctx),
        Command::Train(a) => cmd_train(a, &ctx),
        Command::Register(a) => cmd_register(a, &ctx),
        Command::Evaluate(a) => cmd_evaluate(a, &ctx),
        Command::Landmarks(a) => cmd_landmarks(a, &ctx),
        Command::Diffimg(a) => cmd_diffimg(a, &ctx),
    }
}

fn cmd_synth(a: &SynthArgs, ctx: &Context) -> Result<()> {
    let mut cfg = SynthConfig::default();
    if let Some(d) = &a.dims {
        cfg.dims = parse_dims(d)?;
    }
    if let Some(s) = &a.spacing {
        cfg.spacing = [s[0], s[1], s[2]];
    }
    set(&mut cfg.blob_count, a.blob_count);
    set(&mut cfg.blob_sigma_range.0, a.blob_sigma_min);
    set(&mut cfg.blob_sigma_range.1, a.blob_sigma_max);
    set(&mut cfg.field_amplitude, a.amplitude);
    set(&mut cfg.field_smoothness, a.smoothness);
    set(&mut cfg.landmark_count, a.landmark_count);
    set(&mut cfg.seed, a.seed);
    cfg.validate().map_err(as_config)?;

    let mut run = Run::new("synth", a.out.join(MANIFEST_NAME));
    run.config(&cfg);
    run.seed = Some(cfg.seed);
    let pair = make_pair(&cfg)?;
    create_dir(&a.out)?;
    let files = [
        ("source", "source.ivl"),
        ("target", "target.ivl"),
        ("truth", "truth.ivf"),
        ("landmarks", "landmarks.csv"),
        ("landmarks_target", "landmarks_target.csv"),
    ];
    for (name, file) in files {
        run.output(name, &a.out.join(file));
    }
    write_volume(&pair.source, a.out.join("source.ivl"))?;
    write_volume(&pair.target, a.out.join("target.ivl"))?;
    write_field(&pair.truth, a.out.join("truth.ivf"))?;
    write_landmarks(&pair.landmarks_src, a.out.join("landmarks.csv"))?;
    write_landmarks(&pair.landmarks_tgt, a.out.join("landmarks_target.csv"))?;
    run.finish(ctx)
}

/// Validation failures of user-supplied settings are usage errors.
fn as_config(e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Config(m),
        other => other,
    }
}

fn cmd_sample(a: &SampleArgs, ctx: &Context) -> Result<()> {
    let mut cfg = SamplerConfig::default();
    set(&mut cfg.patch_size, a.patch_size);
    set(&mut cfg.seed, a.seed);
    a.sampler.apply(&mut cfg);
    cfg.validate().map_err(as_config)?;

    let mut run = Run::new("sample", manifest_beside(&a.out));
    run.config(&cfg);
    run.seed = Some(cfg.seed);
    run.input("source", &a.source);
    run.input("target", &a.target);
    run.output("patches", &a.out);
    if let Some(p) = &a.archive {
        run.output("archive", p);
    }
    run.guard()?;
    let source = read_volume(&a.source)?;
    let target = read_volume(&a.target)?;
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch {
            left: source.dims(),
            right: target.dims(),
        });
    }
    let specs = sample_patches(&source, &target, a.count, &cfg)?;
    write_text(&a.out, &specs_to_csv(&specs))?;
    if let Some(p) = &a.archive {
        ensure_parent(p)?;
        write_patch_archive(p, &extract_records(&source, &target, &specs)?)?;
    }
    run.finish(ctx)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    set(&mut cfg.iterations, a.iterations);
    set(&mut cfg.batch_size, a.batch_size);
    set(&mut cfg.lr_generator, a.lr_generator);
    set(&mut cfg.lr_discriminator, a.lr_discriminator);
    set(&mut cfg.beta1, a.beta1);
    set(&mut cfg.beta2, a.beta2);
    set(&mut cfg.patches_per_pair, a.patches_per_pair);
    if a.no_adversarial {
        cfg.adversarial_enabled = false;
    }
    set(&mut cfg.loss.lambda_adv, a.lambda_adv);
    set(&mut cfg.loss.ncc_window, a.ncc_window);
    set(&mut cfg.loss.epsilon, a.ncc_epsilon);
    set(&mut cfg.checkpoint_every, a.checkpoint_every);
    set(&mut cfg.grad_clip, a.grad_clip);
    if let Some(p) = a.patch_size {
        cfg.model.patch_size = p;
        cfg.sampler.patch_size = p;
    }
    set(&mut cfg.model.base_channels, a.base_channels);
    set(&mut cfg.model.leaky_slope, a.leaky_slope);
    set(&mut cfg.model.flow_init_std, a.flow_init_std);
    a.sampler.apply(&mut cfg.sampler);
    if let Some(seed) = a.seed {
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.sampler.seed = seed;
    }
    cfg.validate().map_err(as_config)?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, ctx: &Context) -> Result<()> {
    let state = match &a.resume {
        Some(path) => {
            let mut state = load_checkpoint(path)?;
            set(&mut state.config.iterations, a.iterations);
            set(&mut state.config.checkpoint_every, a.checkpoint_every);
            state.config.validate().map_err(as_config)?;
            state
        }
        None => TrainState::new(&train_config(a)?)?,
    };
    let cfg = state.config.clone();

    let mut run = Run::new("train", a.out.join(MANIFEST_NAME));
    run.config(&cfg);
    run.seed = Some(cfg.seed);
    if let Some(p) = &a.resume {
        run.input("resume", p);
    }
    let metrics_path = a.out.join("metrics.jsonl");
    run.output("metrics", &metrics_path);
    let mut pool = match &a.patches {
        Some(path) => {
            run.input("patches", path);
            PatchPool::from_archive(read_patch_archive(path)?, &cfg)?
        }
        None => {
            if a.volumes.len() < 2 {
                return Err(Error::Config(format!(
                    "train needs --patches or at least two --volume files, got {}",
                    a.volumes.len()
                )));
            }
            let mut volumes = Vec::with_capacity(a.volumes.len());
            for (i, path) in a.volumes.iter().enumerate() {
                run.input(&format!("volume{i}"), path);
                volumes.push(read_volume(path)?);
            }
            if let Some(v) = volumes.iter().find(|v| v.dims() != volumes[0].dims()) {
                return Err(Error::DimsMismatch {
                    left: volumes[0].dims(),
                    right: v.dims(),
                });
            }
            PatchPool::from_volumes(volumes, &cfg)?
        }
    };
    run.guard()?;
    create_dir(&a.out)?;
    let options = TrainOptions {
        out_dir: Some(a.out.clone()),
        metrics_path: Some(metrics_path),
    };
    let outcome = train(state, &mut pool, &options)?;
    if let Some(ckpt) = &outcome.checkpoint {
        run.output("checkpoint", ckpt);
    }
    if let Some(last) = outcome.metrics.last() {
        eprintln!(
            "iteration {}: loss {:.5} (similarity {:.5}, cycle {:.5})",
            last.iteration, last.loss.total, last.loss.similarity, last.loss.cycle
        );
    }
    run.finish(ctx)
}

/// A checkpoint file, or the newest `checkpoint-*.ivc` in a directory.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if !path.is_dir() {
        return Ok(path.to_path_buf());
    }
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut found: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-") && n.ends_with(".ivc"))
        })
        .collect();
    found.sort();
    found
        .pop()
        .ok_or_else(|| Error::Validation(format!("no checkpoint-*.ivc in {}", path.display())))
}

fn cmd_register(a: &RegisterArgs, ctx: &Context) -> Result<()> {
    let ckpt = resolve_checkpoint(&a.checkpoint)?;
    let mut run = Run::new("register", a.out.join(MANIFEST_NAME));
    run.input("checkpoint", &ckpt);
    run.input("source", &a.source);
    run.input("target", &a.target);
    let names = [
        ("warped_source", "warped_source.ivl"),
        ("warped_target", "warped_target.ivl"),
        ("flow_forward", "flow_forward.ivf"),
        ("flow_backward", "flow_backward.ivf"),
        ("metrics", "metrics.json"),
    ];
    for (name, file) in names {
        run.output(name, &a.out.join(file));
    }
    run.guard()?;
    let source = read_volume(&a.source)?;
    let target = read_volume(&a.target)?;
    if source.dims() != target.dims() {
        return Err(Error::DimsMismatch {
            left: source.dims(),
            right: target.dims(),
        });
    }
    let state = load_checkpoint(&ckpt)?;
    let p = state.config.model.patch_size;
    let blend = match a.blend {
        BlendArg::RaisedCosine => Blend::RaisedCosine,
        BlendArg::Overwrite => Blend::Overwrite,
    };
    if a.overlap >= p {
        return Err(Error::Config(format!(
            "overlap {} must be smaller than the patch size {p}",
            a.overlap
        )));
    }
    let plan = plan_tiling(source.dims(), p, a.overlap)?.with_blend(blend);
    run.config(&serde_json::json!({
        "patch_size": p,
        "overlap": a.overlap,
        "blend": blend,
        "tiles": plan.tiles.len(),
        "model": state.config.model,
    }));
    run.seed = Some(state.config.seed);
    let reg = register(&state.generator, &source, &target, &plan)?;
    create_dir(&a.out)?;
    write_volume(&reg.warped_source, a.out.join("warped_source.ivl"))?;
    write_volume(&reg.warped_target, a.out.join("warped_target.ivl"))?;
    write_field(&reg.flow_forward, a.out.join("flow_forward.ivf"))?;
    write_field(&reg.flow_backward, a.out.join("flow_backward.ivf"))?;
    write_json(
        &a.out.join("metrics.json"),
        &serde_json::json!({ "forward": reg.metrics, "backward": reg.metrics_backward }),
    )?;
    run.finish(ctx)
}

fn cmd_evaluate(a: &EvaluateArgs, ctx: &Context) -> Result<()> {
    let mut run = Run::new("evaluate", manifest_beside(&a.out));
    run.input("fixed", &a.fixed);
    run.input("moving", &a.moving);
    run.input("moved", &a.moved);
    run.output("metrics", &a.out);
    let landmark_inputs = match (&a.field, &a.fixed_landmarks, &a.moving_landmarks) {
        (Some(f), Some(fl), Some(ml)) => {
            run.input("field", f);
            run.input("fixed_landmarks", fl);
            run.input("moving_landmarks", ml);
            Some((f, fl, ml))
        }
        (None, None, None) => None,
        _ => {
            return Err(Error::Config(
                "landmark evaluation needs --field, --fixed-landmarks and --moving-landmarks".into(),
            ))
        }
    };
    run.guard()?;
    let fixed = read_volume(&a.fixed)?;
    let moving = read_volume(&a.moving)?;
    let moved = read_volume(&a.moved)?;
    let mut report = MetricReport::measure(&fixed, &moving, &moved)?;
    if let Some((f, fl, ml)) = landmark_inputs {
        let field = read_field(f)?;
        if field.dims() != fixed.dims() {
            return Err(Error::DimsMismatch {
                left: field.dims(),
                right: fixed.dims(),
            });
        }
        let fixed_lm = read_landmarks(fl, Some(fixed.dims()))?;
        let moving_lm = read_landmarks(ml, Some(fixed.dims()))?;
        let spacing = fixed.spacing().map(f64::from);
        report.landmarks = Some(landmark_report(&fixed_lm, &moving_lm, &field, spacing)?);
    }
    run.config(&serde_json::json!({ "mi_bins": eval::MI_BINS }));
    write_json(&a.out, &report)?;
    run.finish(ctx)
}

fn cmd_landmarks(a: &LandmarksArgs, ctx: &Context) -> Result<()> {
    let mut run = Run::new("landmarks", manifest_beside(&a.out));
    run.input("fixed", &a.fixed);
    run.input("moving", &a.moving);
    run.input("field", &a.field);
    run.output("report", &a.out);
    run.guard()?;
    let field: DisplacementField = read_field(&a.field)?;
    let spacing = match &a.spacing {
        Some(s) => [s[0], s[1], s[2]],
        None => field.spacing().map(f64::from),
    };
    run.config(&serde_json::json!({ "spacing_mm": spacing }));
    let fixed = read_landmarks(&a.fixed, Some(field.dims()))?;
    let moving = read_landmarks(&a.moving, Some(field.dims()))?;
    let report = landmark_report(&fixed, &moving, &field, spacing)?;
    write_text(&a.out, &report.to_csv()?)?;
    run.finish(ctx)
}

fn cmd_diffimg(a: &DiffimgArgs, ctx: &Context) -> Result<()> {
    let mut run = Run::new("diffimg", manifest_beside(&a.out));
    run.input("a", &a.a);
    run.input("b", &a.b);
    run.output("difference", &a.out);
    if let Some(p) = &a.overlay {
        run.output("overlay", p);
    }
    run.guard()?;
    if a.axis > 2 {
        return Err(Error::Config(format!("--axis must be 0, 1 or 2, got {}", a.axis)));
    }
    let va = read_volume(&a.a)?;
    let vb = read_volume(&a.b)?;
    if va.dims() != vb.dims() {
        return Err(Error::DimsMismatch {
            left: va.dims(),
            right: vb.dims(),
        });
    }
    let index = a.index.unwrap_or(va.dims()[a.axis] / 2);
    run.config(&serde_json::json!({ "axis": a.axis, "index": index }));
    ensure_parent(&a.out)?;
    eval::save_png(&eval::difference_slice(&va, &vb, a.axis, index)?, &a.out)?;
    if let Some(p) = &a.overlay {
        ensure_parent(p)?;
        eval::save_png(&eval::overlay_slice(&va, &vb, a.axis, index)?, p)?;
    }
    run.finish(ctx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["patchreg", "synth", "--bogus", "--out", "x"]), EXIT_USAGE);
        assert_eq!(run(["patchreg", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["patchreg", "--help"]), EXIT_OK);
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), EXIT_NONFINITE);
        assert_eq!(exit_code(&Error::format(0, "x")), EXIT_DATA);
        assert_eq!(
            exit_code(&Error::DimsMismatch {
                left: [1; 3],
                right: [2; 3]
            }),
            EXIT_DATA
        );
    }

    #[test]
    fn dims_parsing() {
        assert_eq!(parse_dims(&[8]).unwrap(), [8; 3]);
        assert_eq!(parse_dims(&[8, 9, 10]).unwrap(), [8, 9, 10]);
        assert!(parse_dims(&[8, 9]).is_err());
    }

    #[test]
    fn manifest_name_sits_beside_file() {
        assert_eq!(
            manifest_beside(Path::new("out/m.json")),
            PathBuf::from("out/m.json.manifest.json")
        );
    }

    #[test]
    fn flags_override_train_config() {
        let cli = Cli::try_parse_from([
            "patchreg",
            "train",
            "--volume",
            "a.ivl",
            "--volume",
            "b.ivl",
            "--patch-size",
            "16",
            "--lambda-adv",
            "0",
            "--seed",
            "5",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = train_config(&a).unwrap();
        assert_eq!(cfg.model.patch_size, 16);
        assert_eq!(cfg.sampler.patch_size, 16);
        assert_eq!(cfg.loss.lambda_adv, 0.0);
        assert_eq!((cfg.seed, cfg.model.seed), (5, 5));
        assert_eq!(cfg.iterations, TrainConfig::default().iterations);
    }

    #[test]
    fn synth_writes_outputs_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("pair");
        let code = run([
            "patchreg",
            "--deterministic",
            "synth",
            "--dims",
            "16",
            "--blob-count",
            "200",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        for f in ["source.ivl", "target.ivl", "truth.ivf", "landmarks.csv", MANIFEST_NAME] {
            assert!(out.join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(out.join(MANIFEST_NAME)).unwrap();
        let m: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.subcommand, "synth");
        assert_eq!(m.seed, Some(3));
        assert_eq!(m.config["dims"], serde_json::json!([16, 16, 16]));
        assert_eq!(m.config["field_amplitude"], serde_json::json!(2.0));
    }
}
