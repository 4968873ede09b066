//! `mvroi`: synthetic traces, RoI extraction, latency fits and pipeline
//! simulations from the command line.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 invalid trace,
//! 4 internal failure.

mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use mvroi_core::profiles::{default_profiles, fit_latency_params, load_profiles, ProfileError, ProfileSet};
use mvroi_core::roi_extract::{extract_stages, ExtractParams, RoiSource};
use mvroi_core::simulator::{compare, simulate, Policy, RunReport, SimConfig, SimError};
use mvroi_core::trace_model::{load_trace, synth_trace, write_trace_file, SynthConfig, TraceError, VideoTrace};

use crate::config::RunConfigFile;

const STAGE_NAMES: [&str; 5] = ["motion", "filtered", "opened", "components", "rois"];

#[derive(Parser, Debug)]
#[command(name = "mvroi", version, about = "Metadata-driven RoI extraction and multi-model scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic trace.
    Synth(SynthArgs),
    /// Extract RoIs from every non-reference frame of a trace.
    Extract(ExtractArgs),
    /// Simulate one policy.
    Run(RunArgs),
    /// Simulate several policies and tabulate them.
    Compare(CompareArgs),
    /// Fit latency parameters to `r,latency` samples.
    Fit(FitArgs),
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 60)]
    frames: u32,
    #[arg(long, default_value_t = 30)]
    gop: u32,
    #[arg(long, default_value_t = 2)]
    objects: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Object speed in pixels per frame.
    #[arg(long, default_value_t = 4)]
    speed: u32,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 1280)]
    width: u32,
    #[arg(long, default_value_t = 720)]
    height: u32,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Object width range in macroblocks, `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    object_cols: Option<(u32, u32)>,
    /// Object height range in macroblocks, `MIN,MAX`.
    #[arg(long, value_parser = parse_range)]
    object_rows: Option<(u32, u32)>,
    /// Cap on summed object area as a fraction of the frame.
    #[arg(long)]
    max_area: Option<f64>,
    /// Give each object its own horizontal lane.
    #[arg(long)]
    lanes: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(clap::Args, Debug)]
struct ExtractArgs {
    trace: PathBuf,
    /// Radius of the opening's structuring element, in macroblocks.
    #[arg(long, default_value_t = 1)]
    radius: usize,
    /// Write the five stage masks of every non-reference frame as PBM files here.
    #[arg(long)]
    dump_steps: Option<PathBuf>,
    /// RoI list destination; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the policy in the config file.
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    /// Overrides the output directory in the config file.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct CompareArgs {
    #[arg(short, long)]
    config: PathBuf,
    /// Comma-separated, at least two.
    #[arg(long, value_delimiter = ',', value_parser = parse_policy, default_value = "ours,whole_frame,roi_single_model")]
    policies: Vec<Policy>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct FitArgs {
    /// CSV with header `r,latency`.
    #[arg(long)]
    samples: PathBuf,
    /// Write the fitted parameters here as well as to stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(u32, u32), String> {
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let a = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((a, b))
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    Policy::parse(s).ok_or_else(|| format!("unknown policy `{s}` (expected ours, whole_frame or roi_single_model)"))
}

/// An error tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: error.into() }
    }

    fn trace(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: error.into() }
    }

    fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self { code: 4, error: error.into() }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) => Failure::config(e),
            SimError::Extract(_) => Failure::trace(e),
            _ => Failure::internal(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Fit(args) => cmd_fit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        frames: args.frames,
        gop: args.gop,
        object_count: args.objects,
        object_speed: args.speed,
        noise_rate: args.noise,
        seed: args.seed,
        width: args.width,
        height: args.height,
        fps: args.fps,
        object_cols: args.object_cols.unwrap_or(defaults.object_cols),
        object_rows: args.object_rows.unwrap_or(defaults.object_rows),
        max_area_fraction: args.max_area,
        lanes: args.lanes,
        ..defaults
    };
    let trace = synth_trace(&cfg).map_err(Failure::config)?;
    write_trace_file(&trace, &args.output)
        .with_context(|| format!("writing {}", args.output.display()))
        .map_err(Failure::internal)?;
    eprintln!("wrote {} frames to {}", trace.frames.len(), args.output.display());
    Ok(())
}

fn read_trace_file(path: &Path) -> Result<VideoTrace, Failure> {
    load_trace(path).map_err(|e| match e {
        TraceError::Validation(diags) => {
            let lines: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
            Failure::trace(anyhow!("{} is invalid:\n  {}", path.display(), lines.join("\n  ")))
        }
        other => Failure::trace(anyhow::Error::new(other).context(format!("reading {}", path.display()))),
    })
}

#[derive(Serialize)]
struct RoiLine {
    f: u32,
    i: u32,
    x: u32,
    y: u32,
    w: u32,
    h: u32,
    kbps: f64,
    source: RoiSource,
}

fn cmd_extract(args: ExtractArgs) -> CmdResult {
    let trace = read_trace_file(&args.trace)?;
    let params = ExtractParams { radius: args.radius };
    let sink: Box<dyn Write> = match &args.output {
        Some(p) => Box::new(
            File::create(p)
                .with_context(|| format!("creating {}", p.display()))
                .map_err(Failure::config)?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = BufWriter::new(sink);
    if let Some(dir) = &args.dump_steps {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(Failure::config)?;
    }

    let mut total = 0usize;
    for frame in trace.frames.iter().filter(|f| !f.meta.kind.is_reference()) {
        let stages = extract_stages(&frame.meta, &frame.mv, &frame.ctu, &trace.background, params)
            .map_err(Failure::trace)?;
        for (i, rect) in stages.rects.iter().enumerate() {
            let line = RoiLine {
                f: frame.meta.index,
                i: i as u32,
                x: rect.x,
                y: rect.y,
                w: rect.w,
                h: rect.h,
                kbps: mvroi_core::profiles::avg_ctu_bitrate(rect, &frame.ctu),
                source: RoiSource::Motion,
            };
            serde_json::to_writer(&mut out, &line).map_err(Failure::internal)?;
            writeln!(out).map_err(Failure::internal)?;
            total += 1;
        }
        if let Some(dir) = &args.dump_steps {
            for (k, mask) in stages.masks().iter().enumerate() {
                let path = dir.join(format!("f{:05}_{}_{}.pbm", frame.meta.index, k + 1, STAGE_NAMES[k]));
                fs::write(&path, mask.to_pbm())
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(Failure::internal)?;
            }
        }
    }
    out.flush().map_err(Failure::internal)?;
    eprintln!("{total} RoIs");
    Ok(())
}

struct Loaded {
    trace: VideoTrace,
    profiles: ProfileSet,
    sim: SimConfig,
    output_dir: PathBuf,
}

fn load_run_inputs(config: &Path, output_dir: Option<PathBuf>) -> Result<Loaded, Failure> {
    let cfg = RunConfigFile::load(config).map_err(Failure::config)?;
    let trace = read_trace_file(&cfg.trace)?;
    let profiles = match &cfg.profiles {
        Some(p) => load_profiles(p).map_err(|e: ProfileError| Failure::config(anyhow::Error::new(e).context(format!("loading {}", p.display()))))?,
        None => default_profiles(),
    };
    let output_dir = output_dir.unwrap_or(cfg.output_dir);
    fs::create_dir_all(&output_dir)
        .with_context(|| format!("creating {}", output_dir.display()))
        .map_err(Failure::config)?;
    Ok(Loaded {
        trace,
        profiles,
        sim: cfg.sim,
        output_dir,
    })
}

fn write_report(report: &RunReport, dir: &Path) -> anyhow::Result<()> {
    let label = report.policy.label();
    let json_path = dir.join(format!("report_{label}.json"));
    let mut w = BufWriter::new(File::create(&json_path).with_context(|| format!("creating {}", json_path.display()))?);
    serde_json::to_writer_pretty(&mut w, report)?;
    writeln!(w)?;
    w.flush()?;

    let csv_path = dir.join(format!("breakdown_{label}.csv"));
    let mut csv = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for row in report.breakdown_rows() {
        csv.serialize(row)?;
    }
    csv.flush()?;

    let log_path = dir.join(format!("assignments_{label}.jsonl"));
    let mut log = BufWriter::new(File::create(&log_path)?);
    for chunk in &report.chunks {
        for rec in &chunk.assignments {
            serde_json::to_writer(&mut log, rec)?;
            writeln!(log)?;
        }
    }
    log.flush()?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let mut input = load_run_inputs(&args.config, args.output_dir)?;
    if let Some(policy) = args.policy {
        input.sim.policy = policy;
    }
    let report = simulate(&input.trace, &input.profiles, &input.sim)?;
    write_report(&report, &input.output_dir).map_err(Failure::internal)?;
    println!("policy         {}", report.policy);
    println!("objective      {:.6}", report.objective);
    println!("mean_accuracy  {:.6}", report.mean_accuracy);
    println!("mean_latency   {:.6}", report.mean_latency);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let mut policies = args.policies.clone();
    policies.dedup();
    if policies.len() < 2 {
        return Err(Failure::config(anyhow!("compare needs at least two distinct policies")));
    }
    let input = load_run_inputs(&args.config, args.output_dir)?;
    let (runs, rows) = compare(&input.trace, &input.profiles, &input.sim, &policies)?;
    for run in &runs {
        write_report(run, &input.output_dir).map_err(Failure::internal)?;
    }
    let path = input.output_dir.join("comparison.csv");
    let mut csv = csv::Writer::from_path(&path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(Failure::internal)?;
    println!("{:<18} {:>13} {:>13} {:>11} {:>11}", "policy", "mean_accuracy", "mean_latency", "objective", "reduction%");
    for row in &rows {
        csv.serialize(row).map_err(Failure::internal)?;
        println!(
            "{:<18} {:>13.6} {:>13.6} {:>11.6} {:>11.2}",
            row.policy.label(),
            row.mean_accuracy,
            row.mean_latency,
            row.objective,
            row.latency_reduction_pct
        );
    }
    csv.flush().map_err(Failure::internal)?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct Sample {
    r: f64,
    latency: f64,
}

#[derive(Serialize)]
struct FitLine {
    xi: [f64; 3],
    residual: f64,
    iterations: usize,
}

fn cmd_fit(args: FitArgs) -> CmdResult {
    let mut reader = csv::Reader::from_path(&args.samples)
        .with_context(|| format!("reading {}", args.samples.display()))
        .map_err(Failure::config)?;
    let samples: Vec<(f64, f64)> = reader
        .deserialize::<Sample>()
        .map(|row| row.map(|s| (s.r, s.latency)))
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing {}", args.samples.display()))
        .map_err(Failure::config)?;
    let fit = fit_latency_params(&samples).map_err(|e| match e {
        ProfileError::NoConvergence { .. } => Failure::internal(e),
        other => Failure::config(other),
    })?;
    let line = serde_json::to_string(&FitLine {
        xi: fit.params.as_array(),
        residual: fit.residual,
        iterations: fit.iterations,
    })
    .map_err(Failure::internal)?;
    println!("{line}");
    eprintln!("residual {:e} after {} iterations", fit.residual, fit.iterations);
    if let Some(path) = &args.output {
        fs::write(path, format!("{line}\n"))
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::internal)?;
    }
    Ok(())
}
