//! RoI-to-model scheduling for one chunk.
//!
//! Stage one groups RoIs by CTU bitrate and hands each group to the model of
//! matching complexity while keeping queue workloads (`pending / rate`)
//! level. RoIs that stage leaves behind are placed by a seeded Markov search
//! over the chunk utility.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::Allocation;
use crate::profiles::{accuracy_estimate, latency, ProfileError, ProfileSet};
use crate::roi_extract::Roi;

/// Lowest grouping threshold: below it an RoI always goes to the smallest model.
pub const DEFAULT_BITRATE_FLOOR_KBPS: f64 = 12.0;

const WORKLOAD_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("thresholds must be finite and strictly ascending")]
    Thresholds,
    #[error("invalid queue state: {0}")]
    Queue(String),
    #[error("invalid scheduler config: {0}")]
    Config(String),
    #[error("{models} models but allocation covers {allocation}")]
    ModelCount { models: usize, allocation: usize },
    #[error("assignment does not cover every RoI: {assigned} of {total}")]
    Incomplete { assigned: usize, total: usize },
    #[error("model {0} out of range")]
    ModelRange(usize),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("assignment log line {line}: {message}")]
    Log { line: usize, message: String },
}

/// Per-model backlog and service rate at the start of a chunk.
///
/// `pending` is measured in RoI-job units and may be fractional when a job is
/// part-way through service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pending: Vec<f64>,
    rates: Vec<f64>,
}

impl QueueState {
    pub fn new(pending: Vec<f64>, rates: Vec<f64>) -> Result<Self, ScheduleError> {
        if pending.len() != rates.len() || rates.is_empty() {
            return Err(ScheduleError::Queue(format!(
                "{} backlogs for {} rates",
                pending.len(),
                rates.len()
            )));
        }
        if let Some(m) = rates.iter().position(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(ScheduleError::Queue(format!("model {} has rate {}", m + 1, rates[m])));
        }
        if let Some(m) = pending.iter().position(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(ScheduleError::Queue(format!("model {} has backlog {}", m + 1, pending[m])));
        }
        Ok(Self { pending, rates })
    }

    pub fn idle(rates: Vec<f64>) -> Result<Self, ScheduleError> {
        Self::new(vec![0.0; rates.len()], rates)
    }

    pub fn models(&self) -> usize {
        self.rates.len()
    }

    pub fn pending(&self) -> &[f64] {
        &self.pending
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    /// Expected time to drain model `m`'s backlog.
    pub fn workload(&self, m: usize) -> f64 {
        self.pending[m] / self.rates[m]
    }
}

/// Which model serves each RoI, keyed by `(frame, roi index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    entries: BTreeMap<(u32, u32), usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    f: u32,
    i: u32,
    /// 1-based model id.
    m: usize,
}

impl Assignment {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the previous model if the RoI was already assigned.
    pub fn assign(&mut self, frame: u32, index: u32, model: usize) -> Option<usize> {
        self.entries.insert((frame, index), model)
    }

    pub fn model_of(&self, frame: u32, index: u32) -> Option<usize> {
        self.entries.get(&(frame, index)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), usize)> + '_ {
        self.entries.iter().map(|(&k, &m)| (k, m))
    }

    /// RoIs per model, for `models` models.
    pub fn counts(&self, models: usize) -> Vec<usize> {
        let mut counts = vec![0; models];
        for &m in self.entries.values() {
            if m < models {
                counts[m] += 1;
            }
        }
        counts
    }

    pub fn covers(&self, rois: &[Roi]) -> bool {
        self.len() == rois.len() && rois.iter().all(|r| self.model_of(r.frame, r.index).is_some())
    }

    /// One `{"f":..,"i":..,"m":..}` line per RoI; `m` is the 1-based model id.
    pub fn write_log(&self, mut w: impl Write) -> std::io::Result<()> {
        for ((f, i), m) in self.iter() {
            serde_json::to_writer(&mut w, &LogLine { f, i, m: m + 1 })?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_log(reader: impl BufRead) -> Result<Self, ScheduleError> {
        let mut out = Self::new();
        for (k, line) in reader.lines().enumerate() {
            let err = |message: String| ScheduleError::Log { line: k + 1, message };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogLine = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if rec.m == 0 {
                return Err(err("model ids start at 1".into()));
            }
            if out.assign(rec.f, rec.i, rec.m - 1).is_some() {
                return Err(err(format!("RoI ({}, {}) assigned twice", rec.f, rec.i)));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub tau: f64,
    pub t_max: usize,
    /// Per-chunk latency target in seconds; `None` means the chunk duration.
    pub latency_target: Option<f64>,
    pub seed: u64,
    /// Fixed grouping thresholds; `None` derives them from the chunk.
    pub thresholds: Option<Vec<f64>>,
    pub bitrate_floor_kbps: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            omega1: 1.0,
            omega2: 0.1,
            tau: 0.05,
            t_max: 2000,
            latency_target: None,
            seed: 0,
            thresholds: None,
            bitrate_floor_kbps: DEFAULT_BITRATE_FLOOR_KBPS,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |msg: &str| Err(ScheduleError::Config(msg.into()));
        if !(self.omega1 >= 0.0 && self.omega2 >= 0.0) || !self.omega1.is_finite() || !self.omega2.is_finite() {
            return bad("omega1 and omega2 must be finite and >= 0");
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1");
        }
        if self.latency_target.is_some_and(|l| !l.is_finite()) {
            return bad("latency_target must be finite");
        }
        if !self.bitrate_floor_kbps.is_finite() {
            return bad("bitrate_floor_kbps must be finite");
        }
        if let Some(t) = &self.thresholds {
            check_thresholds(t)?;
        }
        Ok(())
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), ScheduleError> {
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ScheduleError::Thresholds);
    }
    Ok(())
}

/// Buckets bitrates into `thresholds.len() + 1` groups of indices. Group `k`
/// holds values in `[thresholds[k-1], thresholds[k])`.
pub fn group_by_bitrate(bitrates: &[f64], thresholds: &[f64]) -> Result<Vec<Vec<usize>>, ScheduleError> {
    check_thresholds(thresholds)?;
    let mut groups = vec![Vec::new(); thresholds.len() + 1];
    for (i, &b) in bitrates.iter().enumerate() {
        groups[thresholds.partition_point(|&t| t <= b)].push(i);
    }
    Ok(groups)
}

/// Groups RoIs (as indices into `rois`) by their average CTU bitrate.
pub fn group_rois(rois: &[Roi], thresholds: &[f64]) -> Result<Vec<Vec<usize>>, ScheduleError> {
    let bitrates: Vec<f64> = rois.iter().map(|r| r.avg_bitrate_kbps).collect();
    group_by_bitrate(&bitrates, thresholds)
}

/// `k/M` quantiles of `bitrates` (linear interpolation), raised to at least
/// `floor` and nudged upward where needed to stay strictly ascending.
pub fn default_thresholds(bitrates: &[f64], models: usize, floor: f64) -> Vec<f64> {
    if models <= 1 {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = bitrates.iter().copied().filter(|b| b.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(models - 1);
    for k in 1..models {
        let q = quantile(&sorted, k as f64 / models as f64).unwrap_or(floor);
        let mut t = q.max(floor);
        if let Some(&prev) = out.last() {
            if t <= prev {
                t = next_above(prev);
            }
        }
        out.push(t);
    }
    out
}

fn next_above(x: f64) -> f64 {
    let step = (x.abs() * 1e-12).max(1e-12);
    x + step
}

fn quantile(sorted: &[f64], p: f64) -> Option<f64> {
    let n = sorted.len();
    if n == 0 {
        return None;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceOutcome {
    /// `(item, model)` in the order items were taken.
    pub assigned: Vec<(usize, usize)>,
    /// Items still waiting, per group.
    pub leftover: Vec<Vec<usize>>,
    /// Backlogs after stage one, in job units.
    pub pending: Vec<f64>,
    pub iterations: usize,
}

impl BalanceOutcome {
    pub fn leftover_count(&self) -> usize {
        self.leftover.iter().map(Vec::len).sum()
    }

    pub fn workloads(&self, rates: &[f64]) -> Vec<f64> {
        self.pending.iter().zip(rates).map(|(q, mu)| q / mu).collect()
    }
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= WORKLOAD_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Workload-balancing stage. Each model only draws from its own group, from
/// the front.
///
/// While some group is non-empty, the models with the lowest workload take
/// enough RoIs to reach the next-lowest workload (at least one, at most what
/// their group holds). When every active model is level, each takes the
/// size of the smallest active group and the stage stops.
pub fn balance_schedule(groups: &[Vec<usize>], queues: &QueueState) -> BalanceOutcome {
    let m_count = groups.len().min(queues.models());
    let rates = queues.rates();
    let mut pending = queues.pending().to_vec();
    let mut cursor = vec![0usize; groups.len()];
    let mut assigned = Vec::with_capacity(groups.iter().map(Vec::len).sum());
    let mut active: Vec<usize> = (0..m_count).collect();
    let mut iterations = 0;

    let remaining = |cursor: &[usize], m: usize| groups[m].len() - cursor[m];

    loop {
        active.retain(|&m| remaining(&cursor, m) > 0);
        if active.is_empty() {
            break;
        }
        iterations += 1;
        let load = |m: usize, pending: &[f64]| pending[m] / rates[m];
        let lowest = active
            .iter()
            .map(|&m| load(m, &pending))
            .fold(f64::INFINITY, f64::min);
        let lowest_set: Vec<usize> = active
            .iter()
            .copied()
            .filter(|&m| nearly_equal(load(m, &pending), lowest))
            .collect();

        if lowest_set.len() == active.len() {
            let beta = active.iter().map(|&m| remaining(&cursor, m)).min().unwrap_or(0);
            for &m in &lowest_set {
                for &item in &groups[m][cursor[m]..cursor[m] + beta] {
                    assigned.push((item, m));
                }
                cursor[m] += beta;
                pending[m] += beta as f64;
            }
            break;
        }

        let next = active
            .iter()
            .filter(|m| !lowest_set.contains(m))
            .map(|&m| load(m, &pending))
            .fold(f64::INFINITY, f64::min);
        for &m in &lowest_set {
            let gap_jobs = (next - load(m, &pending)) * rates[m];
            let take = ((gap_jobs - WORKLOAD_TOL).ceil().max(1.0) as usize).min(remaining(&cursor, m));
            for &item in &groups[m][cursor[m]..cursor[m] + take] {
                assigned.push((item, m));
            }
            cursor[m] += take;
            pending[m] += take as f64;
        }
    }

    let leftover = groups
        .iter()
        .zip(&cursor)
        .map(|(g, &c)| g[c..].to_vec())
        .collect();
    BalanceOutcome {
        assigned,
        leftover,
        pending,
        iterations,
    }
}

/// Latency components of one chunk, in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub encode: f64,
    pub transmit: f64,
    pub process: f64,
    pub queue: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.encode + self.transmit + self.process + self.queue
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `u_f` for every frame of the chunk, in order.
    pub frame_accuracy: Vec<f64>,
    pub breakdown: LatencyBreakdown,
    pub utility: f64,
    /// Backlog per model once the chunk's jobs are enqueued, in job units.
    pub pending_after: Vec<f64>,
}

impl Evaluation {
    pub fn mean_accuracy(&self) -> f64 {
        if self.frame_accuracy.is_empty() {
            0.0
        } else {
            self.frame_accuracy.iter().sum::<f64>() / self.frame_accuracy.len() as f64
        }
    }

    pub fn latency(&self) -> f64 {
        self.breakdown.total()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct FrameSlot {
    frame: u32,
    /// Accuracy when the frame has no RoIs (reference or static frames).
    fixed: Option<f64>,
    rois: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Job {
    Roi(usize),
    Whole { model: usize, units: f64 },
}

/// Everything the chunk utility depends on besides the assignment itself.
#[derive(Clone, Debug, PartialEq)]
pub struct UtilityContext {
    keys: Vec<(u32, u32)>,
    bitrate: Vec<f64>,
    /// Accuracy of each RoI on each model.
    accuracy: Vec<Vec<f64>>,
    slots: Vec<FrameSlot>,
    jobs: Vec<Job>,
    service: Vec<f64>,
    queues: QueueState,
    encode: f64,
    transmit: f64,
    latency_target: f64,
    omega1: f64,
    omega2: f64,
}

/// Builds a [`UtilityContext`] frame by frame, in arrival order.
pub struct ChunkBuilder<'a> {
    profiles: &'a ProfileSet,
    ctx: UtilityContext,
}

impl<'a> ChunkBuilder<'a> {
    pub fn new(
        profiles: &'a ProfileSet,
        allocation: &Allocation,
        queues: &QueueState,
        cfg: &SchedulerConfig,
        latency_target: f64,
    ) -> Result<Self, ScheduleError> {
        let m = profiles.len();
        if allocation.r.len() != m {
            return Err(ScheduleError::ModelCount {
                models: m,
                allocation: allocation.r.len(),
            });
        }
        if queues.models() != m {
            return Err(ScheduleError::Queue(format!("{} queues for {m} models", queues.models())));
        }
        let service = profiles
            .models()
            .iter()
            .zip(&allocation.r)
            .map(|(p, &r)| latency(r, &p.latency))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            profiles,
            ctx: UtilityContext {
                keys: Vec::new(),
                bitrate: Vec::new(),
                accuracy: Vec::new(),
                slots: Vec::new(),
                jobs: Vec::new(),
                service,
                queues: queues.clone(),
                encode: 0.0,
                transmit: 0.0,
                latency_target,
                omega1: cfg.omega1,
                omega2: cfg.omega2,
            },
        })
    }

    /// A non-reference frame with extracted RoIs. With no RoIs the frame
    /// takes `fallback` as its accuracy.
    pub fn rois(&mut self, frame: u32, rois: &[Roi], fallback: f64) -> Result<&mut Self, ScheduleError> {
        let mut slot = FrameSlot {
            frame,
            fixed: rois.is_empty().then_some(fallback),
            rois: Vec::with_capacity(rois.len()),
        };
        for roi in rois {
            let k = self.ctx.keys.len();
            let acc = self
                .profiles
                .models()
                .iter()
                .map(|p| accuracy_estimate(roi, p))
                .collect::<Result<Vec<_>, _>>()?;
            self.ctx.keys.push((roi.frame, roi.index));
            self.ctx.bitrate.push(roi.avg_bitrate_kbps);
            self.ctx.accuracy.push(acc);
            self.ctx.jobs.push(Job::Roi(k));
            slot.rois.push(k);
        }
        self.ctx.slots.push(slot);
        Ok(self)
    }

    /// A frame analysed whole on `model`, costing `units` RoI jobs.
    pub fn whole_frame(&mut self, frame: u32, model: usize, units: f64, accuracy: f64) -> Result<&mut Self, ScheduleError> {
        if model >= self.ctx.service.len() {
            return Err(ScheduleError::ModelRange(model));
        }
        self.ctx.jobs.push(Job::Whole { model, units });
        self.ctx.slots.push(FrameSlot {
            frame,
            fixed: Some(accuracy),
            rois: Vec::new(),
        });
        Ok(self)
    }

    pub fn transfer(&mut self, encode: f64, transmit: f64) -> &mut Self {
        self.ctx.encode = encode;
        self.ctx.transmit = transmit;
        self
    }

    pub fn build(&mut self) -> UtilityContext {
        self.ctx.clone()
    }
}

impl UtilityContext {
    /// Context over a bare RoI list: one frame slot per distinct frame, no
    /// encode or transmit time.
    pub fn from_rois(
        rois: &[Roi],
        profiles: &ProfileSet,
        allocation: &Allocation,
        queues: &QueueState,
        cfg: &SchedulerConfig,
        latency_target: f64,
    ) -> Result<Self, ScheduleError> {
        let mut b = ChunkBuilder::new(profiles, allocation, queues, cfg, latency_target)?;
        let mut start = 0;
        while start < rois.len() {
            let frame = rois[start].frame;
            let end = start + rois[start..].iter().take_while(|r| r.frame == frame).count();
            b.rois(frame, &rois[start..end], 0.0)?;
            start = end;
        }
        Ok(b.build())
    }

    pub fn roi_count(&self) -> usize {
        self.keys.len()
    }

    pub fn models(&self) -> usize {
        self.service.len()
    }

    pub fn keys(&self) -> &[(u32, u32)] {
        &self.keys
    }

    pub fn bitrates(&self) -> &[f64] {
        &self.bitrate
    }

    pub fn service(&self) -> &[f64] {
        &self.service
    }

    pub fn queues(&self) -> &QueueState {
        &self.queues
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        self.slots.iter().map(|s| s.frame)
    }

    pub fn accuracy(&self, roi: usize, model: usize) -> f64 {
        self.accuracy[roi][model]
    }

    /// Scores a complete assignment given as one model per RoI, in context order.
    ///
    /// Every job arrives when the chunk does and waits behind the model's
    /// backlog plus the chunk's earlier jobs on that model.
    pub fn evaluate(&self, models: &[usize]) -> Evaluation {
        debug_assert_eq!(models.len(), self.roi_count());
        let m_count = self.models();
        let mut backlog: Vec<f64> = (0..m_count).map(|m| self.queues.workload(m)).collect();
        let mut pending_after = self.queues.pending().to_vec();
        let mut process = 0.0;
        let mut queue = 0.0;
        for job in &self.jobs {
            let (m, units) = match *job {
                Job::Roi(k) => (models[k], 1.0),
                Job::Whole { model, units } => (model, units),
            };
            let s = units * self.service[m];
            queue += backlog[m];
            process += s;
            backlog[m] += s;
            pending_after[m] += units;
        }
        let frame_accuracy: Vec<f64> = self
            .slots
            .iter()
            .map(|slot| match slot.fixed {
                Some(a) => a,
                None => frame_accuracy(slot.rois.iter().map(|&k| self.accuracy[k][models[k]])).unwrap_or(0.0),
            })
            .collect();
        let breakdown = LatencyBreakdown {
            encode: self.encode,
            transmit: self.transmit,
            process,
            queue,
        };
        let mut eval = Evaluation {
            frame_accuracy,
            breakdown,
            utility: 0.0,
            pending_after,
        };
        eval.utility = self.omega1 * eval.mean_accuracy() - self.omega2 * (breakdown.total() - self.latency_target);
        eval
    }

    /// Model per RoI in context order, or an error if any RoI is missing.
    pub fn models_from(&self, assignment: &Assignment) -> Result<Vec<usize>, ScheduleError> {
        let models: Vec<usize> = self
            .keys
            .iter()
            .filter_map(|&(f, i)| assignment.model_of(f, i))
            .collect();
        if models.len() != self.keys.len() {
            return Err(ScheduleError::Incomplete {
                assigned: models.len(),
                total: self.keys.len(),
            });
        }
        if let Some(&m) = models.iter().find(|&&m| m >= self.models()) {
            return Err(ScheduleError::ModelRange(m));
        }
        Ok(models)
    }

    pub fn assignment_from(&self, models: &[usize]) -> Assignment {
        let mut a = Assignment::new();
        for (&(f, i), &m) in self.keys.iter().zip(models) {
            a.assign(f, i, m);
        }
        a
    }
}

/// Mean of per-RoI accuracies; `None` for a frame without RoIs.
pub fn frame_accuracy(accuracies: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = accuracies.into_iter().fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Chunk utility of a complete assignment.
pub fn utility(assignment: &Assignment, ctx: &UtilityContext) -> Result<f64, ScheduleError> {
    Ok(ctx.evaluate(&ctx.models_from(assignment)?).utility)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealOutcome {
    pub models: Vec<usize>,
    pub utility: f64,
    pub initial_utility: f64,
    pub accepted: usize,
}

/// Markov search over the models of `leftover` RoIs; every other RoI keeps
/// its model from `base`. Returns the best state visited.
pub fn anneal_schedule(
    leftover: &[usize],
    base: &[Option<usize>],
    ctx: &UtilityContext,
    cfg: &SchedulerConfig,
) -> AnnealOutcome {
    let m_count = ctx.models();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current: Vec<usize> = base.iter().map(|m| m.unwrap_or(0)).collect();
    for &k in leftover {
        current[k] = rng.random_range(0..m_count);
    }
    let initial = ctx.evaluate(&current).utility;
    let mut out = AnnealOutcome {
        models: current.clone(),
        utility: initial,
        initial_utility: initial,
        accepted: 0,
    };
    if leftover.is_empty() || m_count < 2 {
        return out;
    }

    let mut u = initial;
    for _ in 0..cfg.t_max {
        let k = leftover[rng.random_range(0..leftover.len())];
        let old = current[k];
        let shift = rng.random_range(1..m_count);
        current[k] = (old + shift) % m_count;
        let candidate = ctx.evaluate(&current).utility;
        let accept = if candidate >= u {
            true
        } else {
            let p = 1.0 / (1.0 + ((u - candidate) / cfg.tau).exp());
            rng.random_bool(p)
        };
        if accept {
            u = candidate;
            out.accepted += 1;
            if u > out.utility {
                out.utility = u;
                out.models.clone_from(&current);
            }
        } else {
            current[k] = old;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleOutcome {
    pub assignment: Assignment,
    /// Model per RoI in context order.
    pub models: Vec<usize>,
    pub evaluation: Evaluation,
    pub thresholds: Vec<f64>,
    pub balance: BalanceOutcome,
    pub anneal: Option<AnnealOutcome>,
}

/// Grouping, workload balancing, then the Markov search for leftovers.
pub fn schedule_chunk(ctx: &UtilityContext, cfg: &SchedulerConfig) -> Result<ScheduleOutcome, ScheduleError> {
    cfg.validate()?;
    let m_count = ctx.models();
    let thresholds = match &cfg.thresholds {
        Some(t) if t.len() + 1 == m_count => t.clone(),
        Some(t) => {
            return Err(ScheduleError::Config(format!(
                "{} thresholds for {m_count} models",
                t.len()
            )))
        }
        None => default_thresholds(ctx.bitrates(), m_count, cfg.bitrate_floor_kbps),
    };
    let groups = group_by_bitrate(ctx.bitrates(), &thresholds)?;
    let balance = balance_schedule(&groups, ctx.queues());

    let mut base = vec![None; ctx.roi_count()];
    for &(k, m) in &balance.assigned {
        base[k] = Some(m);
    }
    let leftover: Vec<usize> = balance.leftover.iter().flatten().copied().collect();
    let (models, anneal) = if leftover.is_empty() {
        (base.iter().map(|m| m.expect("stage one assigned every RoI")).collect(), None)
    } else {
        let out = anneal_schedule(&leftover, &base, ctx, cfg);
        (out.models.clone(), Some(out))
    };
    let evaluation = ctx.evaluate(&models);
    Ok(ScheduleOutcome {
        assignment: ctx.assignment_from(&models),
        models,
        evaluation,
        thresholds,
        balance,
        anneal,
    })
}

/// Schedules a bare RoI list. The latency target is taken from `cfg`
/// (zero when unset).
pub fn schedule(
    rois: &[Roi],
    queues: &QueueState,
    profiles: &ProfileSet,
    allocation: &Allocation,
    cfg: &SchedulerConfig,
) -> Result<Assignment, ScheduleError> {
    let ctx = UtilityContext::from_rois(rois, profiles, allocation, queues, cfg, cfg.latency_target.unwrap_or(0.0))?;
    Ok(schedule_chunk(&ctx, cfg)?.assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{AccuracyCurve, LatencyParams, ModelProfile};
    use crate::roi_extract::{Rect, RoiSource};
    use proptest::prelude::*;

    fn roi(frame: u32, index: u32, kbps: f64) -> Roi {
        Roi {
            frame,
            index,
            rect: Rect::new(0, 0, 16, 16),
            avg_bitrate_kbps: kbps,
            source: RoiSource::Motion,
        }
    }

    fn flat_profile(id: u32, acc: f64, xi2: f64) -> ModelProfile {
        ModelProfile {
            id,
            name: format!("m{id}"),
            latency: LatencyParams::new(0.0, xi2, 0.0).unwrap(),
            accuracy_curve: AccuracyCurve::new(vec![(0.0, acc)]),
            frame_scale: 8.0,
        }
    }

    fn queues(pending: &[f64], rates: &[f64]) -> QueueState {
        QueueState::new(pending.to_vec(), rates.to_vec()).unwrap()
    }

    #[test]
    fn grouping_buckets() {
        let rois = [roi(0, 0, 5.0), roi(0, 1, 15.0), roi(0, 2, 30.0)];
        assert_eq!(group_rois(&rois, &[12.0, 20.0]).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(group_rois(&[], &[12.0, 20.0]).unwrap(), vec![Vec::<usize>::new(); 3]);
        let at_edge = [roi(0, 0, 12.0), roi(0, 1, 12.0)];
        assert_eq!(group_rois(&at_edge, &[12.0, 20.0]).unwrap(), vec![vec![], vec![0, 1], vec![]]);
        assert!(matches!(group_rois(&rois, &[20.0, 12.0]), Err(ScheduleError::Thresholds)));
        assert!(matches!(group_rois(&rois, &[12.0, 12.0]), Err(ScheduleError::Thresholds)));
    }

    #[test]
    fn thresholds_follow_quantiles_above_floor() {
        let b: Vec<f64> = (0..=30).map(|x| x as f64).collect();
        let t = default_thresholds(&b, 3, 12.0);
        assert!((t[0] - 12.0).abs() < 1e-12, "{t:?}");
        assert!((t[1] - 20.0).abs() < 1e-12, "{t:?}");
        let same = default_thresholds(&[15.0; 10], 3, 12.0);
        assert!(same[0] == 15.0 && same[1] > 15.0);
        assert!(default_thresholds(&b, 1, 12.0).is_empty());
        assert_eq!(default_thresholds(&[], 2, 12.0), vec![12.0]);
    }

    #[test]
    fn level_queues_take_their_own_groups() {
        let groups = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        let out = balance_schedule(&groups, &queues(&[0.0, 0.0], &[1.0, 1.0]));
        assert_eq!(out.leftover_count(), 0);
        assert_eq!(out.pending, vec![4.0, 4.0]);
        for (item, m) in out.assigned {
            assert_eq!(m, item / 4);
        }
    }

    #[test]
    fn lagging_model_catches_up_first() {
        // Hand trace: model 1 is 10 jobs behind; it takes all 5 of its RoIs
        // and leaves; model 2 is then alone and level, takes 5, stops.
        let groups = vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]];
        let q = queues(&[0.0, 10.0], &[1.0, 1.0]);
        let out = balance_schedule(&groups, &q);
        assert_eq!(out.assigned[..5].iter().map(|p| p.1).collect::<Vec<_>>(), vec![0; 5]);
        assert_eq!(out.pending, vec![5.0, 15.0]);
        assert_eq!(out.leftover_count(), 0);
        assert_eq!(out.iterations, 2);
    }

    #[test]
    fn empty_group_leaves_immediately() {
        let groups = vec![vec![], vec![0, 1, 2]];
        let out = balance_schedule(&groups, &queues(&[0.0, 0.0], &[1.0, 1.0]));
        assert!(out.assigned.iter().all(|&(_, m)| m == 1));
        assert_eq!(out.pending[0], 0.0);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn level_break_leaves_remainder() {
        let groups = vec![vec![0, 1], vec![2, 3, 4, 5, 6]];
        let out = balance_schedule(&groups, &queues(&[0.0, 0.0], &[1.0, 1.0]));
        assert_eq!(out.leftover, vec![vec![], vec![4, 5, 6]]);
    }

    #[test]
    fn fractional_gaps_round_up() {
        let groups = vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7]];
        // Gap of 0.5 s at 3 jobs/s is 1.5 jobs: take 2.
        let out = balance_schedule(&groups, &queues(&[0.0, 1.0], &[3.0, 2.0]));
        assert_eq!(out.assigned[..2], [(0, 0), (1, 0)]);
    }

    fn two_model_ctx(acc: (f64, f64), service: (f64, f64), n: u32, omega2: f64) -> UtilityContext {
        let profiles =
            ProfileSet::new(vec![flat_profile(1, acc.0, service.0), flat_profile(2, acc.1, service.1)]).unwrap();
        let alloc = Allocation { r: vec![1.0, 1.0], lambda: 1.0 };
        let cfg = SchedulerConfig { omega2, ..SchedulerConfig::default() };
        let q = queues(&[0.0, 0.0], &[1.0 / service.0, 1.0 / service.1]);
        let rois: Vec<Roi> = (0..n).map(|i| roi(i / 2, i % 2, 10.0 + i as f64)).collect();
        UtilityContext::from_rois(&rois, &profiles, &alloc, &q, &cfg, 0.1).unwrap()
    }

    #[test]
    fn utility_single_roi() {
        let profiles = ProfileSet::new(vec![flat_profile(1, 0.9, 0.1)]).unwrap();
        let alloc = Allocation { r: vec![1.0], lambda: 1.0 };
        let cfg = SchedulerConfig { omega1: 1.0, omega2: 1.0, ..SchedulerConfig::default() };
        let q = queues(&[0.0], &[10.0]);
        let ctx = UtilityContext::from_rois(&[roi(0, 0, 5.0)], &profiles, &alloc, &q, &cfg, 0.1).unwrap();
        let mut a = Assignment::new();
        a.assign(0, 0, 0);
        // Latency 0.1 s meets the 0.1 s target exactly: only accuracy remains.
        assert!((utility(&a, &ctx).unwrap() - 0.9).abs() < 1e-12);

        let no_latency = UtilityContext::from_rois(
            &[roi(0, 0, 5.0)],
            &profiles,
            &alloc,
            &q,
            &SchedulerConfig { omega2: 0.0, ..cfg },
            0.1,
        )
        .unwrap();
        assert_eq!(utility(&a, &no_latency).unwrap(), 0.9);
        assert!(matches!(utility(&Assignment::new(), &ctx), Err(ScheduleError::Incomplete { .. })));
    }

    #[test]
    fn equivalent_models_give_equal_utility() {
        let ctx = two_model_ctx((0.8, 0.8), (0.1, 0.1), 3, 0.1);
        assert_eq!(ctx.evaluate(&[0, 1, 1]).utility, ctx.evaluate(&[0, 0, 1]).utility);
    }

    #[test]
    fn fifo_waits_accumulate() {
        let ctx = two_model_ctx((0.8, 0.8), (0.2, 0.2), 2, 0.1);
        let e = ctx.evaluate(&[0, 0]);
        assert!((e.breakdown.process - 0.4).abs() < 1e-12);
        assert!((e.breakdown.queue - 0.2).abs() < 1e-12);
        assert_eq!(e.pending_after, vec![2.0, 0.0]);
    }

    #[test]
    fn empty_leftover_returns_base() {
        let ctx = two_model_ctx((0.5, 0.9), (0.1, 0.05), 2, 0.1);
        let out = anneal_schedule(&[], &[Some(0), Some(0)], &ctx, &SchedulerConfig::default());
        assert_eq!(out.models, vec![0, 0]);
        assert_eq!(out.accepted, 0);
    }

    fn exhaustive_best(ctx: &UtilityContext, leftover: &[usize], base: &[Option<usize>]) -> (f64, Vec<usize>) {
        let m = ctx.models();
        let mut models: Vec<usize> = base.iter().map(|x| x.unwrap_or(0)).collect();
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for code in 0..m.pow(leftover.len() as u32) {
            let mut c = code;
            for &k in leftover {
                models[k] = c % m;
                c /= m;
            }
            let u = ctx.evaluate(&models).utility;
            if u > best.0 {
                best = (u, models.clone());
            }
        }
        best
    }

    #[test]
    fn dominant_model_wins_everything() {
        let ctx = two_model_ctx((0.5, 0.9), (0.1, 0.05), 6, 0.1);
        let leftover: Vec<usize> = (0..6).collect();
        let base = vec![None; 6];
        let (best_u, best) = exhaustive_best(&ctx, &leftover, &base);
        assert_eq!(best, vec![1; 6]);
        let cfg = SchedulerConfig { t_max: 1000, seed: 5, ..SchedulerConfig::default() };
        let out = anneal_schedule(&leftover, &base, &ctx, &cfg);
        assert_eq!(out.models, vec![1; 6]);
        assert!((out.utility - best_u).abs() < 1e-12);
    }

    #[test]
    fn single_model_schedules_everything_to_it() {
        let profiles = ProfileSet::new(vec![flat_profile(1, 0.9, 0.1)]).unwrap();
        let rois: Vec<Roi> = (0..5).map(|i| roi(1, i, i as f64 * 10.0)).collect();
        let a = schedule(
            &rois,
            &queues(&[0.0], &[10.0]),
            &profiles,
            &Allocation { r: vec![1.0], lambda: 1.0 },
            &SchedulerConfig::default(),
        )
        .unwrap();
        assert!(a.covers(&rois));
        assert_eq!(a.counts(1), vec![5]);
        let empty = schedule(
            &[],
            &queues(&[0.0], &[10.0]),
            &profiles,
            &Allocation { r: vec![1.0], lambda: 1.0 },
            &SchedulerConfig::default(),
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn log_round_trip() {
        let mut a = Assignment::new();
        a.assign(12, 0, 2);
        a.assign(12, 1, 0);
        let mut buf = Vec::new();
        a.write_log(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next(), Some(r#"{"f":12,"i":0,"m":3}"#));
        assert_eq!(Assignment::read_log(buf.as_slice()).unwrap(), a);
        let dup = "{\"f\":1,\"i\":0,\"m\":1}\n{\"f\":1,\"i\":0,\"m\":2}\n";
        assert!(matches!(Assignment::read_log(dup.as_bytes()), Err(ScheduleError::Log { line: 2, .. })));
    }

    #[test]
    fn config_validation() {
        assert!(SchedulerConfig::default().validate().is_ok());
        assert!(SchedulerConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(SchedulerConfig { t_max: 0, ..Default::default() }.validate().is_err());
        assert!(SchedulerConfig { omega2: -1.0, ..Default::default() }.validate().is_err());
        assert!(QueueState::new(vec![0.0], vec![0.0]).is_err());
    }

    fn three_profiles() -> ProfileSet {
        let mk = |id: u32, xi2: f64, acc: [f64; 3]| ModelProfile {
            id,
            name: format!("m{id}"),
            latency: LatencyParams::new(0.05, xi2, 0.001).unwrap(),
            accuracy_curve: AccuracyCurve::new(vec![(0.0, acc[0]), (20.0, acc[1]), (40.0, acc[2])]),
            frame_scale: 8.0,
        };
        ProfileSet::new(vec![
            mk(1, 0.001, [0.9, 0.8, 0.6]),
            mk(2, 0.002, [0.92, 0.88, 0.75]),
            mk(3, 0.004, [0.94, 0.92, 0.88]),
        ])
        .unwrap()
    }

    proptest! {
        #[test]
        fn every_roi_assigned_once(
            bitrates in prop::collection::vec(0.0..60.0f64, 0..40),
            pending in prop::collection::vec(0.0..20.0f64, 3),
            r in prop::collection::vec(0.05..3.0f64, 3),
            seed in any::<u64>(),
        ) {
            let profiles = three_profiles();
            let rois: Vec<Roi> = bitrates.iter().enumerate().map(|(i, &b)| roi(i as u32 / 4, i as u32 % 4, b)).collect();
            let alloc = Allocation { r: r.clone(), lambda: 1.0 };
            let rates: Vec<f64> = profiles.models().iter().zip(&r).map(|(p, &r)| 1.0 / latency(r, &p.latency).unwrap()).collect();
            let q = QueueState::new(pending, rates).unwrap();
            let cfg = SchedulerConfig { seed, t_max: 200, ..Default::default() };
            let a = schedule(&rois, &q, &profiles, &alloc, &cfg).unwrap();
            prop_assert!(a.covers(&rois));
            prop_assert_eq!(a.counts(3).iter().sum::<usize>(), rois.len());
            let again = schedule(&rois, &q, &profiles, &alloc, &cfg).unwrap();
            prop_assert_eq!(a, again);
        }

        #[test]
        fn balance_takes_at_least_one_roi_per_iteration(
            sizes in prop::collection::vec(0usize..50, 1..8),
            pending in prop::collection::vec(0.0..30.0f64, 8),
            rates in prop::collection::vec(0.5..20.0f64, 8),
        ) {
            let m = sizes.len();
            let mut next = 0;
            let groups: Vec<Vec<usize>> = sizes.iter().map(|&s| { let g = (next..next + s).collect(); next += s; g }).collect();
            let q = QueueState::new(pending[..m].to_vec(), rates[..m].to_vec()).unwrap();
            let out = balance_schedule(&groups, &q);
            prop_assert!(out.iterations <= next.max(1));
            prop_assert_eq!(out.assigned.len() + out.leftover_count(), next);
            for (item, model) in &out.assigned {
                prop_assert!(groups[*model].contains(item));
            }
        }

        #[test]
        fn anneal_never_ends_below_its_start(seed in any::<u64>(), n in 1u32..8) {
            let ctx = two_model_ctx((0.7, 0.9), (0.05, 0.2), n, 0.5);
            let leftover: Vec<usize> = (0..n as usize).collect();
            let cfg = SchedulerConfig { seed, t_max: 100, ..Default::default() };
            let out = anneal_schedule(&leftover, &vec![None; n as usize], &ctx, &cfg);
            prop_assert!(out.utility >= out.initial_utility);
            prop_assert_eq!(ctx.evaluate(&out.models).utility, out.utility);
        }
    }
}
