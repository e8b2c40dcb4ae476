//! Command surface: train, the four generation tasks, evaluation, and the
//! cost table. Relative output paths resolve under the MARVID_OUT
//! environment variable; every written file is content-hashed into a
//! metrics log beside it, so runs are diffable by hash alone.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::BaseAttention;
use crate::checkpoint::Checkpoint;
use crate::config::{hex, RunConfig};
use crate::cost::{cost_table, CostRow, DEFAULT_MEM_BUDGET_BYTES};
use crate::data::{read_pgm, write_pgm, Video};
use crate::error::{Error, Result};
use crate::eval::{eval_task, Conditioning, EvalTask, Sampler};
use crate::rng::{Rng, StreamId};
use crate::train::run_training;

pub const OUTPUT_ROOT_ENV: &str = "MARVID_OUT";

#[derive(Parser)]
#[command(
    name = "marvid",
    version,
    about = "Asymmetric planner/diffuser video generation on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the staged training plan from a config file.
    Train(TrainArgs),
    /// Generate the frames between a first and last frame.
    Interpolate(InterpolateArgs),
    /// Generate a video from a single first frame.
    Animate(AnimateArgs),
    /// Continue a prefix of frames to the model's full length.
    Expand(ExpandArgs),
    /// Hierarchically interpolate a sequence into slow motion.
    Slowmo(SlowmoArgs),
    /// Score a task against closed-form baselines on fresh scenes.
    Eval(EvalArgs),
    /// Print the deployment cost table for a config.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accept a checkpoint whose config digest does not match.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Config file; defaults to config.toml beside the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Accept a checkpoint whose config digest does not match.
    #[arg(long)]
    force: bool,
    /// Output directory, resolved under MARVID_OUT if relative.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Sampling seed; defaults to the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// DDIM steps.
    #[arg(long, default_value_t = 25)]
    steps: usize,
}

#[derive(Args)]
struct InterpolateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// First frame (PGM).
    #[arg(long)]
    first: PathBuf,
    /// Last frame (PGM).
    #[arg(long)]
    last: PathBuf,
}

#[derive(Args)]
struct AnimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// First frame (PGM).
    #[arg(long)]
    first: PathBuf,
    /// Guidance scale.
    #[arg(long, default_value_t = 2.5)]
    cfg: f64,
}

#[derive(Args)]
struct ExpandArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of PGM frames, sorted by name, used as the prefix.
    #[arg(long)]
    frames: PathBuf,
}

#[derive(Args)]
struct SlowmoArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory of PGM frames, sorted by name, to slow down.
    #[arg(long)]
    frames: PathBuf,
    /// Interpolation levels; 0 returns the input.
    #[arg(long)]
    levels: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Task to score: interp, i2v or expand.
    #[arg(long)]
    task: EvalTask,
    /// Number of videos.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Condition on the unconditional embedding instead of the planner.
    #[arg(long)]
    uncond: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Memory budget in bytes for the fits column.
    #[arg(long, default_value_t = DEFAULT_MEM_BUDGET_BYTES)]
    budget: u64,
}

pub fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Interpolate(a) => cmd_interpolate(a),
        Cmd::Animate(a) => cmd_animate(a),
        Cmd::Expand(a) => cmd_expand(a),
        Cmd::Slowmo(a) => cmd_slowmo(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Flops(a) => cmd_flops(a),
    }
}

/// Relative paths land under the output root; absolute paths win.
fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.output_dir = resolve_out(&cfg.output_dir);
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    // The exact trained config lives beside the checkpoints; inference
    // commands pick it up from there and re-verify its digest.
    cfg.save(&cfg.output_dir.join("config.toml"))?;
    let plan = cfg.plan()?;
    println!(
        "training {} steps across {} stages into {}",
        plan.total_steps(),
        plan.stages.len(),
        cfg.output_dir.display()
    );
    let out = run_training(cfg, a.resume.as_deref(), a.force)?;
    let last = out.losses.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "ran {} steps, final loss {last:.6}, checkpoint {}",
        out.steps_run,
        out.final_checkpoint.display()
    );
    Ok(())
}

fn load_sampler(m: &ModelArgs) -> Result<Sampler> {
    let config_path = match &m.config {
        Some(p) => p.clone(),
        None => m
            .ckpt
            .parent()
            .map(|d| d.join("config.toml"))
            .ok_or_else(|| Error::config("checkpoint path has no parent directory"))?,
    };
    let cfg = RunConfig::load(&config_path)?;
    let ckpt = Checkpoint::read(&m.ckpt)?;
    Sampler::from_checkpoint(cfg, &ckpt, m.force)
}

#[derive(Serialize)]
struct FileRecord<'a> {
    command: &'a str,
    file: String,
    sha256: String,
    seed: u64,
    steps: usize,
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex(&h.finalize()))
}

/// Writes every frame as frame_NNN.pgm and hashes it into metrics.jsonl.
fn write_frames(video: &Video, out: &Path, command: &str, seed: u64, steps: usize) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let log_path = out.join("metrics.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    for f in 0..video.frames {
        let name = format!("frame_{f:03}.pgm");
        let path = out.join(&name);
        write_pgm(&path, video.width, video.height, video.frame(f))?;
        let rec = FileRecord {
            command,
            file: name,
            sha256: hash_file(&path)?,
            seed,
            steps,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Parse(format!("metrics record: {e}")))?;
        use std::io::Write as _;
        writeln!(log, "{line}")?;
    }
    println!(
        "wrote {} frames of {}x{} to {}",
        video.frames,
        video.width,
        video.height,
        out.display()
    );
    Ok(())
}

fn read_frame(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    read_pgm(path)
}

/// All PGM files in a directory, sorted by name, as one video.
fn read_frames_dir(dir: &Path) -> Result<Video> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::config(format!(
            "no .pgm frames in {}",
            dir.display()
        )));
    }
    let (w, h, mut data) = read_pgm(&paths[0])?;
    for p in &paths[1..] {
        let (pw, ph, frame) = read_pgm(p)?;
        if (pw, ph) != (w, h) {
            return Err(Error::shape(format!(
                "{} is {pw}x{ph}, other frames are {w}x{h}",
                p.display()
            )));
        }
        data.extend(frame);
    }
    Ok(Video {
        width: w,
        height: h,
        frames: paths.len(),
        data,
    })
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    let s = load_sampler(&a.model)?;
    let (_, _, first) = read_frame(&a.first)?;
    let (_, _, last) = read_frame(&a.last)?;
    let seed = a.model.seed.unwrap_or(s.cfg.seed);
    let mut rng = Rng::new(seed, StreamId::Sample(0));
    let video = s.interpolate(&first, &last, a.model.steps, &mut rng)?;
    let out = resolve_out(&a.model.out);
    write_frames(&video, &out, "interpolate", seed, a.model.steps)
}

fn cmd_animate(a: AnimateArgs) -> Result<()> {
    let s = load_sampler(&a.model)?;
    let (_, _, first) = read_frame(&a.first)?;
    let seed = a.model.seed.unwrap_or(s.cfg.seed);
    let mut rng = Rng::new(seed, StreamId::Sample(0));
    let video = s.animate(&first, a.model.steps, a.cfg, &mut rng)?;
    let out = resolve_out(&a.model.out);
    write_frames(&video, &out, "animate", seed, a.model.steps)
}

fn cmd_expand(a: ExpandArgs) -> Result<()> {
    let s = load_sampler(&a.model)?;
    let prefix = read_frames_dir(&a.frames)?;
    let seed = a.model.seed.unwrap_or(s.cfg.seed);
    let mut rng = Rng::new(seed, StreamId::Sample(0));
    let video = s.expand(&prefix, a.model.steps, &mut rng)?;
    let out = resolve_out(&a.model.out);
    write_frames(&video, &out, "expand", seed, a.model.steps)
}

fn cmd_slowmo(a: SlowmoArgs) -> Result<()> {
    let s = load_sampler(&a.model)?;
    let seed_frames = read_frames_dir(&a.frames)?;
    let seed = a.model.seed.unwrap_or(s.cfg.seed);
    let video = s.slowmo(&seed_frames, a.levels, a.model.steps, seed)?;
    let out = resolve_out(&a.model.out);
    write_frames(&video, &out, "slowmo", seed, a.model.steps)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let s = load_sampler(&a.model)?;
    let conditioning = if a.uncond {
        Conditioning::Uncond
    } else {
        Conditioning::Planned
    };
    let report = eval_task(&s, a.task, a.n, a.model.steps, conditioning)?;
    println!("{report}");
    let out = resolve_out(&a.model.out);
    std::fs::create_dir_all(&out)?;
    let name = format!("eval_{}_{}.json", report.task, report.conditioning);
    let path = out.join(&name);
    let body = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("report: {e}")))?;
    std::fs::write(&path, body)?;
    let rec = FileRecord {
        command: "eval",
        file: name,
        sha256: hash_file(&path)?,
        seed: s.cfg.seed,
        steps: a.model.steps,
    };
    let line =
        serde_json::to_string(&rec).map_err(|e| Error::Parse(format!("metrics record: {e}")))?;
    use std::io::Write as _;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("metrics.jsonl"))?;
    writeln!(log, "{line}")?;
    println!("report written to {}", path.display());
    Ok(())
}

fn attention_name(a: BaseAttention) -> &'static str {
    match a {
        BaseAttention::FrameLocal => "frame-local",
        BaseAttention::Temporal => "temporal",
        BaseAttention::SpatioTemporal => "spatio-temporal",
    }
}

fn print_row(r: &CostRow) {
    let mmac = |v: u64| v as f64 / 1e6;
    println!(
        "{:<16} {:>3}x{:<3} {:<15} {:>10.3} {:>10.3} {:>10.3} {:>9} {:>8.2} {:>5}",
        r.name,
        r.planner_grid.0,
        r.planner_grid.1,
        attention_name(r.dm_attention),
        mmac(r.planner.total_macs() + r.generator.total_macs()),
        mmac(r.planner.total_macs()),
        mmac(r.generator.total_macs()),
        r.planner.params + r.generator.params,
        r.mem_bytes() as f64 / (1024.0 * 1024.0),
        if r.within_budget() { "yes" } else { "NO" },
    );
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let g = &cfg.geometry;
    let rows = cost_table(
        &cfg.mar_config(),
        &cfg.dm_config(),
        g.frames,
        (g.high_rows(), g.high_rows()),
        (g.low_rows(), g.low_rows()),
        a.budget,
    )?;
    println!(
        "per-generation multiply-accumulates for {} frames, budget {:.2} MiB",
        g.frames,
        a.budget as f64 / (1024.0 * 1024.0)
    );
    println!(
        "{:<16} {:<7} {:<15} {:>10} {:>10} {:>10} {:>9} {:>8} {:>5}",
        "deployment", "grid", "dm-attention", "Mmac", "plan-Mmac", "gen-Mmac", "params", "MiB", "fits"
    );
    for r in &rows {
        print_row(r);
    }
    Ok(())
}
