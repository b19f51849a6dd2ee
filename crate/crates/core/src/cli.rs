//! The `gmc` command line: scene generation, feature reduction, training,
//! frame synthesis and evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate_sweep, MetricConfig, MetricReport};
use crate::motion::{export_frames, file_sha256, load_frames, MotionModel};
use crate::pointset::{load_ply, save_ply, FeaturedPointCloud, NormStats, PcaBasis, PlyFormat};
use crate::synthgen::{generate, presets, GroundTruth, SceneSpec};
use crate::trainer::{prepare_pair, TrainCloud, TrainConfig, TrainReport, Trainer};
use crate::field::UnaryField;

pub const TRUTH_FORMAT: &str = "gmc-truth";
pub const FIELDS_FORMAT: &str = "gmc-fields";
pub const ARTIFACT_VERSION: u32 = 1;

/// Files of a training run directory.
pub mod run_files {
    pub const CONFIG: &str = "config.json";
    pub const START: &str = "start.ply";
    pub const END: &str = "end.ply";
    pub const CHECKPOINT: &str = "checkpoint.json";
    pub const REPORT_JSON: &str = "train_report.json";
    pub const REPORT_CSV: &str = "train_report.csv";
    pub const TIMING: &str = "timing.json";
    pub const FIELDS: &str = "fields.json";
    pub const MOTION: &str = "motion.json";
}

#[derive(Debug, Parser)]
#[command(name = "gmc", version, about = "Global motion correspondence between two featured point clouds")]
pub struct Cli {
    /// Worker threads (1 gives bit-reproducible runs).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-state scene with ground truth.
    Gen(GenArgs),
    /// Reduce per-point features with PCA.
    Pca(PcaArgs),
    /// Train the two fields and extract the motion model.
    Train(TrainArgs),
    /// Write frames on a regular grid of timesteps.
    Interpolate(InterpolateArgs),
    /// Write frames at arbitrary timesteps, including outside [0, 1].
    Extrapolate(ExtrapolateArgs),
    /// Score a frame sweep with SI-EMD and SI-MPED.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Smoke,
    Rigid,
    CrissCross,
    Articulated,
}

impl Preset {
    pub fn spec(self) -> SceneSpec {
        match self {
            Preset::Smoke => presets::smoke(),
            Preset::Rigid => presets::rigid(2000),
            Preset::CrissCross => presets::criss_cross(1000),
            Preset::Articulated => presets::articulated_box(1200, 800, presets::ARTICULATED_GAP),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    Binary,
}

impl From<PlyEncoding> for PlyFormat {
    fn from(e: PlyEncoding) -> Self {
        match e {
            PlyEncoding::Ascii => PlyFormat::Ascii,
            PlyEncoding::Binary => PlyFormat::BinaryLittleEndian,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,
    /// Bundled scene instead of a spec file.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub out_start: PathBuf,
    #[arg(long)]
    pub out_end: PathBuf,
    #[arg(long)]
    pub out_truth: PathBuf,
    /// Overrides the seed in the spec.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: PlyEncoding,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub dims: usize,
    /// Where to write the fitted basis.
    #[arg(long)]
    pub basis_out: Option<PathBuf>,
    /// Project with an existing basis instead of fitting one.
    #[arg(long, conflicts_with = "basis_out")]
    pub basis: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    pub format: PlyEncoding,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub start: PathBuf,
    #[arg(long)]
    pub end: PathBuf,
    /// Training configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, conflicts_with = "resume")]
    pub force: bool,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// `start:stop:step`, stop inclusive.
    #[arg(long, default_value = "0:1:0.05")]
    pub steps: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long = "t", num_args = 1.., allow_negative_numbers = true, required = true)]
    pub times: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub start: PathBuf,
    #[arg(long)]
    pub end: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run directory whose config hash the frames must carry.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Evaluate even when hashes disagree.
    #[arg(long)]
    pub force: bool,
    /// EMD subsample seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::metrics::DEFAULT_SUBSAMPLE)]
    pub subsample: usize,
}

/// Ground-truth file written by `gen`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub format: String,
    pub version: u32,
    pub spec: SceneSpec,
    pub truth: GroundTruth,
}

/// Trained fields with everything needed to rebuild the motion model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldsFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub stats: NormStats,
    pub pca: Option<PcaBasis>,
    pub field0: UnaryField,
    pub field1: UnaryField,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub iterations: usize,
    pub resumed_from: usize,
    pub seconds: f64,
    pub ms_per_iteration: f64,
    pub threads: usize,
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on a usage error, 2 on a runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Installs the stderr logger. `GMC_LOG` picks the level and
/// `GMC_LOG_JSON=1` switches to one JSON object per line.
pub fn init_logging() {
    let level = std::env::var("GMC_LOG").unwrap_or_else(|_| "info".into());
    let json = std::env::var("GMC_LOG_JSON").map(|v| v == "1").unwrap_or(false);
    let mut builder = env_logger::Builder::new();
    builder.parse_filters(&level).target(env_logger::Target::Stderr);
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = builder.try_init();
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    if cli.threads == 0 {
        bail!("--threads must be at least 1");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("building the worker pool")?;
    let threads = cli.threads;
    pool.install(|| match cli.command {
        Command::Gen(a) => gen(a),
        Command::Pca(a) => pca(a),
        Command::Train(a) => train(a, threads),
        Command::Interpolate(a) => {
            let times = parse_steps(&a.steps)?;
            frames(&a.run, &times, &a.out, a.force)
        }
        Command::Extrapolate(a) => frames(&a.run, &a.times, &a.out, a.force),
        Command::Eval(a) => eval(a),
    })
}

/// Expands `a:b:c` into `a, a + c, ...` up to `b` inclusive. A last step
/// within rounding of `b` is snapped onto it.
pub fn parse_steps(s: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        bail!("--steps expects start:stop:step, got `{s}`");
    }
    let num = |p: &str| -> anyhow::Result<f64> {
        let v: f64 = p.trim().parse().with_context(|| format!("bad number `{p}` in --steps"))?;
        if !v.is_finite() {
            bail!("non-finite value in --steps");
        }
        Ok(v)
    };
    let (a, b, c) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if c <= 0.0 {
        bail!("--steps step must be positive");
    }
    if b < a {
        bail!("--steps stop is below start");
    }
    let count = ((b - a) / c + 1e-9).floor() as usize;
    if count > 100_000 {
        bail!("--steps would produce {count} frames");
    }
    let mut out: Vec<f64> = (0..=count).map(|k| a + k as f64 * c).collect();
    if let Some(last) = out.last_mut() {
        if (b - *last).abs() <= 1e-9 * c.max(1.0) {
            *last = b;
        }
    }
    Ok(out)
}

fn refuse_existing(path: &Path, force: bool) -> anyhow::Result<()> {
    if force {
        return Ok(());
    }
    let occupied = match fs::metadata(path) {
        Ok(m) if m.is_dir() => fs::read_dir(path)?.next().is_some(),
        Ok(_) => true,
        Err(_) => false,
    };
    if occupied {
        bail!("{} already exists; pass --force to overwrite", path.display());
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn gen(a: GenArgs) -> anyhow::Result<()> {
    for p in [&a.out_start, &a.out_end, &a.out_truth] {
        refuse_existing(p, a.force)?;
    }
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => read_json::<SceneSpec>(path)?.normalized()?,
        (None, Some(p)) => p.spec(),
        (None, None) => bail!("one of --spec or --preset is required"),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = generate(&spec)?;
    save_ply(&scene.start, &a.out_start, a.format.into())?;
    save_ply(&scene.end, &a.out_end, a.format.into())?;
    write_json(
        &a.out_truth,
        &TruthFile {
            format: TRUTH_FORMAT.into(),
            version: ARTIFACT_VERSION,
            spec,
            truth: scene.truth,
        },
    )?;
    log::info!("generated {} + {} points", scene.start.len(), scene.end.len());
    Ok(())
}

fn pca(a: PcaArgs) -> anyhow::Result<()> {
    refuse_existing(&a.output, a.force)?;
    if let Some(p) = &a.basis_out {
        refuse_existing(p, a.force)?;
    }
    let cloud = load_ply(&a.input)?;
    let basis = match &a.basis {
        Some(path) => {
            let b: PcaBasis = read_json(path)?;
            if b.output_dim() != a.dims {
                bail!("basis has {} components but --dims is {}", b.output_dim(), a.dims);
            }
            b
        }
        None => PcaBasis::fit(cloud.features.view(), a.dims)?,
    };
    let reduced = basis.project(cloud.features.view())?;
    let out = FeaturedPointCloud::new(cloud.positions, cloud.colors, reduced)?;
    save_ply(&out, &a.output, a.format.into())?;
    if let Some(p) = &a.basis_out {
        write_json(p, &basis)?;
    }
    if basis.rank_deficient {
        log::warn!("feature covariance has rank below {}; trailing components are zero", a.dims);
    }
    Ok(())
}

fn train(a: TrainArgs, threads: usize) -> anyhow::Result<()> {
    use run_files::*;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if a.resume {
        let saved: TrainConfig = read_json(&a.out.join(CONFIG))?;
        if saved.hash() != cfg.hash() {
            bail!("config differs from the one in {}; cannot resume", a.out.display());
        }
    } else {
        refuse_existing(&a.out, a.force)?;
    }
    let start = load_ply(&a.start)?;
    let end = load_ply(&a.end)?;
    let pair = prepare_pair(&start, &end, cfg.position_weight, cfg.joint_pca)?;
    let g0 = TrainCloud::from_normalized(&pair.start_normalized)?;
    let g1 = TrainCloud::from_normalized(&pair.end_normalized)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    if !a.resume {
        write_json(&a.out.join(CONFIG), &cfg)?;
        fs::copy(&a.start, a.out.join(START)).with_context(|| format!("copying {}", a.start.display()))?;
        fs::copy(&a.end, a.out.join(END)).with_context(|| format!("copying {}", a.end.display()))?;
        let _ = fs::remove_file(a.out.join(CHECKPOINT));
    }
    let trainer = if a.resume {
        Trainer::load_checkpoint(&a.out.join(CHECKPOINT), g0.clone(), g1.clone())?
    } else {
        Trainer::new(g0.clone(), g1.clone(), cfg.clone())?
    }
    .with_checkpoint_dir(&a.out);
    let resumed_from = trainer.iteration();
    log::info!(
        "training {} -> {} points for {} iterations (from {resumed_from})",
        g0.len(),
        g1.len(),
        cfg.iterations
    );
    let clock = Instant::now();
    let outcome = trainer.finish()?;
    let seconds = clock.elapsed().as_secs_f64();
    let hash = cfg.hash();
    let model = MotionModel::build(&outcome.field0, &outcome.field1, &g0, &g1, &start.positions, &cfg.energy, &pair.stats, &hash)?;
    model.save(&a.out.join(MOTION))?;
    write_json(
        &a.out.join(FIELDS),
        &FieldsFile {
            format: FIELDS_FORMAT.into(),
            version: ARTIFACT_VERSION,
            config_hash: hash,
            stats: pair.stats,
            pca: pair.pca,
            field0: outcome.field0,
            field1: outcome.field1,
        },
    )?;
    write_report(&a.out, &outcome.report)?;
    let done = cfg.iterations - resumed_from;
    write_json(
        &a.out.join(TIMING),
        &Timing {
            iterations: done,
            resumed_from,
            seconds,
            ms_per_iteration: if done > 0 { 1e3 * seconds / done as f64 } else { 0.0 },
            threads,
        },
    )?;
    log::info!("trained in {seconds:.1} s; run written to {}", a.out.display());
    Ok(())
}

fn write_report(dir: &Path, report: &TrainReport) -> anyhow::Result<()> {
    write_json(&dir.join(run_files::REPORT_JSON), report)?;
    let path = dir.join(run_files::REPORT_CSV);
    fs::write(&path, report.to_csv()).with_context(|| format!("writing {}", path.display()))
}

fn clear_frames(dir: &Path) -> anyhow::Result<()> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(());
    };
    for e in entries {
        let e = e?;
        let name = e.file_name().to_string_lossy().into_owned();
        let ours = (name.starts_with("frame_") && name.ends_with(".ply")) || name == "frames.json" || name == "transforms.json";
        if ours {
            fs::remove_file(e.path())?;
        }
    }
    Ok(())
}

fn frames(run: &Path, times: &[f64], out: &Path, force: bool) -> anyhow::Result<()> {
    use run_files::*;
    refuse_existing(out, force)?;
    let model = MotionModel::load(&run.join(MOTION))?;
    let start_path = run.join(START);
    let template = load_ply(&start_path)?;
    let start_sha = file_sha256(&start_path)?;
    let end_sha = file_sha256(&run.join(END))?;
    clear_frames(out)?;
    let manifest = export_frames(&model, times, &template, out, Some(start_sha), Some(end_sha))?;
    log::info!("wrote {} frames to {}", manifest.frames.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    refuse_existing(&a.out, a.force)?;
    let (manifest, files) = load_frames(&a.frames)?;
    let mut problems = Vec::new();
    let start_sha = file_sha256(&a.start)?;
    let end_sha = file_sha256(&a.end)?;
    if manifest.start_sha256.as_deref().is_some_and(|s| s != start_sha) {
        problems.push(format!("{} is not the start cloud the frames were made from", a.start.display()));
    }
    if manifest.end_sha256.as_deref().is_some_and(|s| s != end_sha) {
        problems.push(format!("{} is not the end cloud the frames were made from", a.end.display()));
    }
    for (entry, (_, path)) in manifest.frames.iter().zip(&files) {
        if file_sha256(path)? != entry.sha256 {
            problems.push(format!("{} changed since it was written", path.display()));
        }
    }
    if let Some(run) = &a.run {
        let cfg: TrainConfig = read_json(&run.join(run_files::CONFIG))?;
        if cfg.hash() != manifest.config_hash {
            problems.push(format!(
                "frames carry config hash {} but {} has {}",
                manifest.config_hash,
                run.display(),
                cfg.hash()
            ));
        }
    }
    if !problems.is_empty() {
        if !a.force {
            bail!("{}; pass --force to evaluate anyway", problems.join("; "));
        }
        for p in &problems {
            log::warn!("{p}");
        }
    }
    if files.is_empty() {
        return Err(anyhow!("{} lists no frames", a.frames.display()));
    }
    let start = load_ply(&a.start)?;
    let end = load_ply(&a.end)?;
    let times: Vec<f64> = files.iter().map(|(t, _)| *t).collect();
    let frames = files
        .iter()
        .map(|(_, p)| load_ply(p).map(|c| c.positions))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = MetricConfig {
        emd_subsample: a.subsample,
        seed: a.seed,
        ..Default::default()
    };
    let mut report: MetricReport = evaluate_sweep(&times, &frames, &start.positions, &end.positions, &cfg)?;
    report.config_hash = Some(manifest.config_hash);
    write_json(&a.out, &report)?;
    log::info!("SI-EMD {:.4} SI-MPED {:.4} (x{})", report.si_emd, report.si_mped, report.report_scale);
    Ok(())
}
