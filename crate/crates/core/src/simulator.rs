//! Chunked virtual-time simulation of the analytics pipeline.
//!
//! Frames are processed in chunks of `c`. For each chunk the simulator
//! classifies frames, extracts RoIs from non-reference frames, splits the
//! compute budget, schedules RoIs and enqueues every job on FIFO model queues
//! that carry their backlog into the next chunk.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::{allocate, compute_weights, AllocError, Allocation, AllocationProblem};
use crate::profiles::{avg_ctu_bitrate, latency, ProfileError, ProfileSet};
use crate::roi_extract::{extract_rois, ExtractError, ExtractParams, Roi};
use crate::scheduler::{
    default_thresholds, group_by_bitrate, schedule_chunk, ChunkBuilder, Evaluation, LatencyBreakdown, QueueState,
    ScheduleError, SchedulerConfig,
};
use crate::trace_model::{FrameKind, VideoTrace};

pub use crate::scheduler::frame_accuracy;

// Smallest resource share used to price a model that received none, when
// its latency would otherwise be unbounded.
const MIN_SHARE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Allocation(#[from] AllocError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Extracted RoIs scheduled across every model with the adaptive split.
    Ours,
    /// Every frame analysed whole by the largest model.
    WholeFrame,
    /// Extracted RoIs, all on the largest model.
    RoiSingleModel,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::Ours, Policy::WholeFrame, Policy::RoiSingleModel];

    pub fn label(self) -> &'static str {
        match self {
            Policy::Ours => "ours",
            Policy::WholeFrame => "whole_frame",
            Policy::RoiSingleModel => "roi_single_model",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// A constant or a per-chunk value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Constant(f64),
    PerChunk(Vec<f64>),
}

impl Series {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            Series::Constant(v) => *v,
            Series::PerChunk(v) => v[t],
        }
    }

    fn check(&self, name: &str, chunks: usize) -> Result<(), SimError> {
        let values: &[f64] = match self {
            Series::Constant(v) => std::slice::from_ref(v),
            Series::PerChunk(v) => {
                if v.len() < chunks {
                    return Err(SimError::Config(format!(
                        "{name} has {} values for {chunks} chunks",
                        v.len()
                    )));
                }
                v
            }
        };
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SimError::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Frames per chunk.
    pub chunk_size: usize,
    /// Uplink bandwidth in bits per second.
    pub bandwidth: Series,
    /// Encoding latency per chunk, seconds.
    pub encode_latency: f64,
    /// Compute budget per chunk, in resource units.
    pub total_resource: Series,
    pub scheduler: SchedulerConfig,
    pub policy: Policy,
    pub extract: ExtractParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            chunk_size: 10,
            bandwidth: Series::Constant(20e6),
            encode_latency: 0.01,
            total_resource: Series::Constant(1.0),
            scheduler: SchedulerConfig::default(),
            policy: Policy::Ours,
            extract: ExtractParams::default(),
        }
    }
}

impl SimConfig {
    pub fn chunk_count(&self, frames: usize) -> usize {
        frames.div_ceil(self.chunk_size.max(1))
    }

    pub fn validate(&self, frames: usize) -> Result<(), SimError> {
        if self.chunk_size == 0 {
            return Err(SimError::Config("chunk_size must be at least 1".into()));
        }
        if !(self.encode_latency.is_finite() && self.encode_latency >= 0.0) {
            return Err(SimError::Config("encode_latency must be >= 0".into()));
        }
        let chunks = self.chunk_count(frames);
        self.bandwidth.check("bandwidth", chunks)?;
        self.total_resource.check("total_resource", chunks)?;
        self.scheduler.validate()?;
        Ok(())
    }

    /// `L_t`: the configured target or the chunk duration.
    pub fn latency_target(&self, fps: f64) -> f64 {
        self.scheduler
            .latency_target
            .unwrap_or(self.chunk_size as f64 / fps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub f: u32,
    pub kind: FrameKind,
    /// RoIs scheduled from this frame.
    pub rois: usize,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub f: u32,
    pub i: u32,
    /// 1-based model id.
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkReport {
    pub t: usize,
    pub frames: Vec<FrameReport>,
    pub u_mean: f64,
    pub l_total: f64,
    pub breakdown: LatencyBreakdown,
    pub assignments: Vec<AssignmentRecord>,
    /// Resource share per model.
    pub allocation: Vec<f64>,
    pub lambda: Option<f64>,
    /// Backlog per model when the chunk arrives, in job units.
    pub queue_start: Vec<f64>,
    /// Backlog left for the next chunk once it arrives.
    pub queue_residue: Vec<f64>,
    /// Chunk bits sent over the uplink.
    pub bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub frames: usize,
    pub chunks: Vec<ChunkReport>,
    pub objective: f64,
    pub mean_accuracy: f64,
    pub mean_latency: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub latency_target: f64,
}

/// One CSV row of the per-chunk latency breakdown.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub t: usize,
    pub u_mean: f64,
    pub encode: f64,
    pub transmit: f64,
    pub process: f64,
    pub queue: f64,
    pub total: f64,
}

impl RunReport {
    pub fn roi_count(&self) -> usize {
        self.chunks.iter().map(|c| c.assignments.len()).sum()
    }

    pub fn frame_accuracies(&self) -> impl Iterator<Item = f64> + '_ {
        self.chunks.iter().flat_map(|c| c.frames.iter().map(|f| f.accuracy))
    }

    pub fn breakdown_rows(&self) -> Vec<BreakdownRow> {
        self.chunks
            .iter()
            .map(|c| BreakdownRow {
                t: c.t,
                u_mean: c.u_mean,
                encode: c.breakdown.encode,
                transmit: c.breakdown.transmit,
                process: c.breakdown.process,
                queue: c.breakdown.queue,
                total: c.l_total,
            })
            .collect()
    }

    /// Recomputes the objective from the per-frame and per-chunk values.
    pub fn recompute_objective(&self) -> f64 {
        objective(self, self.omega1, self.omega2)
    }
}

/// `omega1 * mean_f u_f - omega2 * mean_t (l_t - L_t)`.
pub fn objective(run: &RunReport, omega1: f64, omega2: f64) -> f64 {
    let (sum_u, frames) = run.frame_accuracies().fold((0.0, 0usize), |(s, n), u| (s + u, n + 1));
    let chunks = run.chunks.len();
    if frames == 0 || chunks == 0 {
        return 0.0;
    }
    let excess: f64 = run.chunks.iter().map(|c| c.l_total - run.latency_target).sum();
    omega1 * sum_u / frames as f64 - omega2 * excess / chunks as f64
}

/// Harmonic mean of precision and recall; zero when nothing is detected correctly.
pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let tp = tp as f64;
    let precision = tp / (tp + fp as f64);
    let recall = tp / (tp + fn_ as f64);
    2.0 * precision * recall / (precision + recall)
}

struct FramePlan {
    index: u32,
    kind: FrameKind,
    rois: Vec<Roi>,
    /// Complexity of the frame as a whole.
    frame_kbps: f64,
    bits: f64,
}

fn plan_frames(trace: &VideoTrace, params: &ExtractParams) -> Result<Vec<FramePlan>, SimError> {
    trace
        .frames
        .iter()
        .map(|frame| {
            let rois = if frame.meta.kind.is_reference() {
                Vec::new()
            } else {
                extract_rois(&frame.meta, &frame.mv, &frame.ctu, &trace.background, *params)?
            };
            Ok(FramePlan {
                index: frame.meta.index,
                kind: frame.meta.kind,
                rois,
                frame_kbps: avg_ctu_bitrate(&frame.meta.rect(), &frame.ctu),
                bits: frame.ctu.total_bits(),
            })
        })
        .collect()
}

/// Per-job service time on each model under `allocation`; a model with no
/// share and no resource offset is priced at a vanishing share.
fn service_times(profiles: &ProfileSet, allocation: &Allocation, total: f64) -> Result<Vec<f64>, SimError> {
    profiles
        .models()
        .iter()
        .zip(&allocation.r)
        .map(|(p, &r)| {
            let r = if r + p.latency.xi1 > 0.0 { r } else { MIN_SHARE * total };
            Ok(latency(r, &p.latency)?)
        })
        .collect()
}

/// Mean of `accuracy` over the frame's RoIs, or `fallback` without RoIs.
fn roi_mean(rois: &[Roi], accuracy: impl Fn(f64) -> f64, fallback: f64) -> f64 {
    frame_accuracy(rois.iter().map(|r| accuracy(r.avg_bitrate_kbps))).unwrap_or(fallback)
}

fn chunk_seed(seed: u64, t: usize) -> u64 {
    seed ^ (t as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the whole trace under `cfg.policy`.
pub fn simulate(trace: &VideoTrace, profiles: &ProfileSet, cfg: &SimConfig) -> Result<RunReport, SimError> {
    cfg.validate(trace.frames.len())?;
    if trace.frames.is_empty() {
        return Err(SimError::Config("trace has no frames".into()));
    }
    let plans = plan_frames(trace, &cfg.extract)?;
    let m_count = profiles.len();
    let largest = profiles.largest_index();
    let frame_units = profiles.largest().frame_scale;
    let whole_acc = |kbps: f64| profiles.largest().accuracy_curve.at(kbps).unwrap_or(0.0);
    let target = cfg.latency_target(trace.fps);
    let chunk_count = cfg.chunk_count(plans.len());

    let mut pending = vec![0.0; m_count];
    let mut chunks = Vec::with_capacity(chunk_count);
    let mut prev: Option<(f64, Vec<f64>)> = None;

    for t in 0..chunk_count {
        let range: Range<usize> = t * cfg.chunk_size..((t + 1) * cfg.chunk_size).min(plans.len());
        let frames = &plans[range.clone()];
        let total = cfg.total_resource.at(t);
        let bits: f64 = frames.iter().map(|p| p.bits).sum();
        let transmit = bits / cfg.bandwidth.at(t);
        let arrival = (range.end as f64) / trace.fps + cfg.encode_latency + transmit;

        // Drain the backlog from the previous arrival to this one.
        if let Some((prev_arrival, rates)) = prev.take() {
            let elapsed = (arrival - prev_arrival).max(0.0);
            for (q, mu) in pending.iter_mut().zip(&rates) {
                *q = (*q - elapsed * mu).max(0.0);
            }
        }
        if let Some(last) = chunks.last_mut() {
            let last: &mut ChunkReport = last;
            last.queue_residue.clone_from(&pending);
        }

        let allocation = match cfg.policy {
            Policy::WholeFrame | Policy::RoiSingleModel => Allocation::single(m_count, largest, total),
            Policy::Ours => {
                let bitrates: Vec<f64> = frames
                    .iter()
                    .flat_map(|p| p.rois.iter().map(|r| r.avg_bitrate_kbps))
                    .collect();
                let thresholds = match &cfg.scheduler.thresholds {
                    Some(th) => th.clone(),
                    None => default_thresholds(&bitrates, m_count, cfg.scheduler.bitrate_floor_kbps),
                };
                let mut weights = compute_weights(&group_by_bitrate(&bitrates, &thresholds)?);
                let references = frames.iter().filter(|p| p.kind.is_reference()).count();
                weights[largest] += frame_units * references as f64;
                if weights.iter().all(|&w| w == 0.0) {
                    Allocation::even(m_count, total)
                } else {
                    allocate(&AllocationProblem::new(weights, profiles.params(), total)?)?
                }
            }
        };
        let service = service_times(profiles, &allocation, total)?;
        let rates: Vec<f64> = service.iter().map(|s| 1.0 / s).collect();
        let queues = QueueState::new(pending.clone(), rates.clone())?;
        let priced = Allocation {
            r: allocation
                .r
                .iter()
                .zip(profiles.models())
                .map(|(&r, p)| if r + p.latency.xi1 > 0.0 { r } else { MIN_SHARE * total })
                .collect(),
            lambda: allocation.lambda,
        };

        let sched_cfg = SchedulerConfig {
            seed: chunk_seed(cfg.scheduler.seed, t),
            ..cfg.scheduler.clone()
        };
        let mut builder = ChunkBuilder::new(profiles, &priced, &queues, &sched_cfg, target)?;
        builder.transfer(cfg.encode_latency, transmit);
        for p in frames {
            let static_acc = whole_acc(p.frame_kbps);
            match cfg.policy {
                Policy::WholeFrame => {
                    let acc = roi_mean(&p.rois, whole_acc, static_acc);
                    builder.whole_frame(p.index, largest, frame_units, acc)?;
                }
                Policy::Ours | Policy::RoiSingleModel => {
                    if p.kind.is_reference() {
                        builder.whole_frame(p.index, largest, frame_units, static_acc)?;
                    } else {
                        builder.rois(p.index, &p.rois, static_acc)?;
                    }
                }
            }
        }
        let ctx = builder.build();
        let (models, evaluation): (Vec<usize>, Evaluation) = match cfg.policy {
            Policy::Ours => {
                let out = schedule_chunk(&ctx, &sched_cfg)?;
                (out.models, out.evaluation)
            }
            Policy::WholeFrame | Policy::RoiSingleModel => {
                let models = vec![largest; ctx.roi_count()];
                let eval = ctx.evaluate(&models);
                (models, eval)
            }
        };

        let assignments: Vec<AssignmentRecord> = ctx
            .keys()
            .iter()
            .zip(&models)
            .map(|(&(f, i), &m)| AssignmentRecord { f, i, m: m + 1 })
            .collect();
        let frame_reports: Vec<FrameReport> = frames
            .iter()
            .zip(&evaluation.frame_accuracy)
            .map(|(p, &accuracy)| FrameReport {
                f: p.index,
                kind: p.kind,
                rois: if cfg.policy == Policy::WholeFrame { 0 } else { p.rois.len() },
                accuracy,
            })
            .collect();

        chunks.push(ChunkReport {
            t,
            frames: frame_reports,
            u_mean: evaluation.mean_accuracy(),
            l_total: evaluation.latency(),
            breakdown: evaluation.breakdown,
            assignments,
            allocation: allocation.r.clone(),
            lambda: allocation.lambda.is_finite().then_some(allocation.lambda),
            queue_start: pending.clone(),
            queue_residue: Vec::new(),
            bits,
        });
        pending = evaluation.pending_after;
        prev = Some((arrival, rates));
    }

    // The last chunk's residue is its backlog one chunk duration later.
    if let (Some(last), Some((_, rates))) = (chunks.last_mut(), prev) {
        let elapsed = cfg.chunk_size as f64 / trace.fps;
        last.queue_residue = pending
            .iter()
            .zip(&rates)
            .map(|(q, mu)| (q - elapsed * mu).max(0.0))
            .collect();
    }

    let mut report = RunReport {
        policy: cfg.policy,
        frames: plans.len(),
        chunks,
        objective: 0.0,
        mean_accuracy: 0.0,
        mean_latency: 0.0,
        omega1: cfg.scheduler.omega1,
        omega2: cfg.scheduler.omega2,
        latency_target: target,
    };
    report.mean_accuracy = report.frame_accuracies().sum::<f64>() / report.frames as f64;
    report.mean_latency = report.chunks.iter().map(|c| c.l_total).sum::<f64>() / report.chunks.len() as f64;
    report.objective = report.recompute_objective();
    Ok(report)
}

/// [`simulate`] with every frame sent whole to the largest model.
pub fn baseline_wholeframe(trace: &VideoTrace, profiles: &ProfileSet, cfg: &SimConfig) -> Result<RunReport, SimError> {
    simulate(
        trace,
        profiles,
        &SimConfig {
            policy: Policy::WholeFrame,
            ..cfg.clone()
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: Policy,
    pub mean_accuracy: f64,
    pub mean_latency: f64,
    pub objective: f64,
    /// Percentage latency reduction relative to the whole-frame baseline.
    pub latency_reduction_pct: f64,
}

/// Runs each policy on its own thread and tabulates them against the
/// whole-frame baseline (run as well when not listed).
pub fn compare(
    trace: &VideoTrace,
    profiles: &ProfileSet,
    cfg: &SimConfig,
    policies: &[Policy],
) -> Result<(Vec<RunReport>, Vec<ComparisonRow>), SimError> {
    if policies.len() < 2 {
        return Err(SimError::Config("compare needs at least two policies".into()));
    }
    let mut wanted: Vec<Policy> = policies.to_vec();
    if !wanted.contains(&Policy::WholeFrame) {
        wanted.push(Policy::WholeFrame);
    }
    let results: Vec<Result<RunReport, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = wanted
            .iter()
            .map(|&policy| {
                let cfg = SimConfig { policy, ..cfg.clone() };
                s.spawn(move || simulate(trace, profiles, &cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    });
    let runs: Vec<RunReport> = results.into_iter().collect::<Result<_, _>>()?;
    let baseline = runs
        .iter()
        .find(|r| r.policy == Policy::WholeFrame)
        .map(|r| r.mean_latency)
        .expect("baseline is always run");
    let rows = policies
        .iter()
        .map(|&p| {
            let run = runs.iter().find(|r| r.policy == p).expect("every policy was run");
            ComparisonRow {
                policy: p,
                mean_accuracy: run.mean_accuracy,
                mean_latency: run.mean_latency,
                objective: run.objective,
                latency_reduction_pct: 100.0 * (baseline - run.mean_latency) / baseline,
            }
        })
        .collect();
    let runs = runs.into_iter().filter(|r| policies.contains(&r.policy)).collect();
    Ok((runs, rows))
}
