//! Model profiles: the resource/latency curve, its offline fit, accuracy
//! curves indexed by content complexity, and the CTU bitrate indicator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roi_extract::{Rect, Roi};
use crate::trace_model::CtuBitrateMap;

/// Default ratio between a whole-frame inference job and a single RoI job.
pub const DEFAULT_FRAME_SCALE: f64 = 8.0;

const FIT_MAX_ITERATIONS: usize = 100;
const FIT_MAX_HALVINGS: usize = 60;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("latency undefined at r = {r} with xi1 = {xi1} (r + xi1 must be positive)")]
    Singularity { r: f64, xi1: f64 },
    #[error("invalid latency parameters: {0}")]
    InvalidParams(String),
    #[error("need at least 3 distinct resource levels to fit, got {0}")]
    Underdetermined(usize),
    #[error("invalid sample ({r}, {latency}): resource must be >= 0 and latency > 0")]
    InvalidSample { r: f64, latency: f64 },
    #[error("fit did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("model {0} has an empty accuracy curve")]
    EmptyCurve(u32),
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Constants of `l(r) = xi2 / (r + xi1) + xi3`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyParams {
    /// Resource offset, in resource units.
    pub xi1: f64,
    /// Work constant, in resource-seconds.
    pub xi2: f64,
    /// Latency floor, in seconds.
    pub xi3: f64,
}

impl LatencyParams {
    pub fn new(xi1: f64, xi2: f64, xi3: f64) -> Result<Self, ProfileError> {
        let p = Self { xi1, xi2, xi3 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let finite = self.xi1.is_finite() && self.xi2.is_finite() && self.xi3.is_finite();
        if !finite || self.xi2 <= 0.0 || self.xi1 < 0.0 || self.xi3 < 0.0 {
            return Err(ProfileError::InvalidParams(format!(
                "need xi2 > 0, xi1 >= 0, xi3 >= 0; got ({}, {}, {})",
                self.xi1, self.xi2, self.xi3
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.xi1, self.xi2, self.xi3]
    }
}

/// Per-job processing latency in seconds at resource share `r`.
pub fn latency(r: f64, p: &LatencyParams) -> Result<f64, ProfileError> {
    let denom = r + p.xi1;
    if r < 0.0 || denom <= 0.0 || !denom.is_finite() {
        return Err(ProfileError::Singularity { r, xi1: p.xi1 });
    }
    Ok(p.xi2 / denom + p.xi3)
}

/// Jobs per second: the reciprocal of [`latency`].
pub fn processing_rate(p: &LatencyParams, r: f64) -> Result<f64, ProfileError> {
    latency(r, p).map(|l| 1.0 / l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyFit {
    pub params: LatencyParams,
    /// Sum of squared residuals at the returned parameters.
    pub residual: f64,
    pub iterations: usize,
}

fn sse(samples: &[(f64, f64)], theta: &Vector3<f64>) -> f64 {
    samples
        .iter()
        .map(|&(r, obs)| {
            let e = theta[1] / (r + theta[0]) + theta[2] - obs;
            e * e
        })
        .sum()
}

/// Least-squares fit of `(xi1, xi2, xi3)` to `(resource, latency)` samples.
///
/// Gauss-Newton with step halving from a fixed start: `xi3` at the smallest
/// observed latency, `xi1 = 0`, and `xi2` through the sample with the least
/// resource. Iterates are kept inside the valid parameter region.
pub fn fit_latency_params(samples: &[(f64, f64)]) -> Result<LatencyFit, ProfileError> {
    for &(r, latency) in samples {
        if !(r.is_finite() && r >= 0.0 && latency.is_finite() && latency > 0.0) {
            return Err(ProfileError::InvalidSample { r, latency });
        }
    }
    let mut levels: Vec<f64> = samples.iter().map(|s| s.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 3 {
        return Err(ProfileError::Underdetermined(levels.len()));
    }

    let r_min = levels[0];
    let r_max = levels[levels.len() - 1];
    let obs_min = samples.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let (r0, obs0) = samples
        .iter()
        .copied()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty");
    // A sample at r = 0 would make xi1 = 0 singular.
    let xi1 = if r_min > 0.0 { 0.0 } else { 1e-3 * r_max };
    let xi2 = ((obs0 - obs_min) * (r0 + xi1)).max(1e-9 * obs0 * (r0 + xi1).max(1e-12));
    let mut theta = Vector3::new(xi1, xi2, obs_min);

    let project = |t: Vector3<f64>| -> Vector3<f64> {
        let floor = if r_min > 0.0 { 0.0 } else { 1e-12 * r_max };
        Vector3::new(t[0].max(floor), t[1].max(f64::MIN_POSITIVE), t[2].max(0.0))
    };

    let scale: f64 = samples.iter().map(|s| s.1 * s.1).sum();
    let mut cost = sse(samples, &theta);

    for iteration in 1..=FIT_MAX_ITERATIONS {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for &(r, obs) in samples {
            let d = r + theta[0];
            let resid = theta[1] / d + theta[2] - obs;
            let j = Vector3::new(-theta[1] / (d * d), 1.0 / d, 1.0);
            jtj += j * j.transpose();
            jtr += j * resid;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else {
            return Err(ProfileError::NoConvergence {
                iterations: iteration,
                residual: cost,
            });
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..FIT_MAX_HALVINGS {
            let candidate = project(theta + step * alpha);
            let c = sse(samples, &candidate);
            if c.is_finite() && c < cost {
                accepted = Some((candidate, c));
                break;
            }
            alpha *= 0.5;
        }

        let Some((next, next_cost)) = accepted else {
            // No descent direction left within floating-point resolution.
            return finish(theta, cost, iteration);
        };
        let moved = (next - theta).amax();
        let rel_drop = (cost - next_cost) / cost.max(f64::MIN_POSITIVE);
        theta = next;
        cost = next_cost;
        if cost <= 1e-28 * scale || moved <= 1e-14 * (1.0 + theta.amax()) || rel_drop <= 1e-14 {
            return finish(theta, cost, iteration);
        }
    }
    Err(ProfileError::NoConvergence {
        iterations: FIT_MAX_ITERATIONS,
        residual: cost,
    })
}

fn finish(theta: Vector3<f64>, cost: f64, iterations: usize) -> Result<LatencyFit, ProfileError> {
    Ok(LatencyFit {
        params: LatencyParams::new(theta[0], theta[1], theta[2])?,
        residual: cost,
        iterations,
    })
}

/// Mean bits of every CTU the rectangle touches, as kbps (`bits * fps / 1000`).
pub fn avg_ctu_bitrate(rect: &Rect, ctu: &CtuBitrateMap) -> f64 {
    if rect.w == 0 || rect.h == 0 || ctu.cols == 0 || ctu.rows == 0 {
        return 0.0;
    }
    let size = ctu.ctu_size;
    let c0 = (rect.x / size) as usize;
    let r0 = (rect.y / size) as usize;
    let c1 = ((rect.right() - 1) / size) as usize;
    let r1 = ((rect.bottom() - 1) / size) as usize;
    let (c1, r1) = (c1.min(ctu.cols - 1), r1.min(ctu.rows - 1));
    if c0 > c1 || r0 > r1 {
        return 0.0;
    }
    let mut total = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            total += ctu.get(r, c);
        }
    }
    let count = ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    total / count * ctu.fps / 1000.0
}

/// Piecewise-linear map from complexity (kbps) to expected accuracy,
/// clamped to the end knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccuracyCurve {
    pub knots: Vec<(f64, f64)>,
}

impl AccuracyCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Self {
        Self { knots }
    }

    pub fn at(&self, kbps: f64) -> Option<f64> {
        let first = self.knots.first()?;
        let last = self.knots.last()?;
        if kbps <= first.0 {
            return Some(first.1);
        }
        if kbps >= last.0 {
            return Some(last.1);
        }
        let k = self.knots.partition_point(|&(x, _)| x <= kbps);
        let (x0, y0) = self.knots[k - 1];
        let (x1, y1) = self.knots[k];
        Some(y0 + (y1 - y0) * (kbps - x0) / (x1 - x0))
    }

    fn check(&self, id: u32) -> Result<(), ProfileError> {
        if self.knots.is_empty() {
            return Err(ProfileError::EmptyCurve(id));
        }
        for w in self.knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(ProfileError::Invalid(format!(
                    "model {id}: accuracy knots must have strictly ascending kbps"
                )));
            }
        }
        if self.knots.iter().any(|&(x, a)| !x.is_finite() || !(0.0..=1.0).contains(&a)) {
            return Err(ProfileError::Invalid(format!(
                "model {id}: accuracy values must lie in [0, 1]"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelProfile {
    /// 1-based; larger ids are larger models.
    pub id: u32,
    pub name: String,
    pub latency: LatencyParams,
    pub accuracy_curve: AccuracyCurve,
    /// Whole-frame job cost in RoI-job units.
    pub frame_scale: f64,
}

/// Accuracy of `profile` on `roi`, interpolated at its bitrate.
pub fn accuracy_estimate(roi: &Roi, profile: &ModelProfile) -> Result<f64, ProfileError> {
    profile
        .accuracy_curve
        .at(roi.avg_bitrate_kbps)
        .ok_or(ProfileError::EmptyCurve(profile.id))
}

/// A validated, ordered set of models `1..=M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileSet {
    models: Vec<ModelProfile>,
}

impl ProfileSet {
    pub fn new(models: Vec<ModelProfile>) -> Result<Self, ProfileError> {
        if models.is_empty() {
            return Err(ProfileError::Invalid("at least one model is required".into()));
        }
        for (k, m) in models.iter().enumerate() {
            if m.id != k as u32 + 1 {
                return Err(ProfileError::Invalid(format!(
                    "model ids must be 1..=M in order; position {} has id {}",
                    k + 1,
                    m.id
                )));
            }
            m.latency.validate()?;
            m.accuracy_curve.check(m.id)?;
            if !(m.frame_scale.is_finite() && m.frame_scale > 0.0) {
                return Err(ProfileError::Invalid(format!("model {}: frame_scale must be positive", m.id)));
            }
        }
        // Both curves are linear between consecutive knots of the union, so
        // checking the union of knots covers every complexity.
        let mut xs: Vec<f64> = models
            .iter()
            .flat_map(|m| m.accuracy_curve.knots.iter().map(|k| k.0))
            .collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for pair in models.windows(2) {
            for &x in &xs {
                let small = pair[0].accuracy_curve.at(x).expect("checked non-empty");
                let large = pair[1].accuracy_curve.at(x).expect("checked non-empty");
                if large + 1e-12 < small {
                    return Err(ProfileError::Invalid(format!(
                        "model {} is less accurate than model {} at {x} kbps",
                        pair[1].id, pair[0].id
                    )));
                }
            }
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[ModelProfile] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Model `M`, the largest and most accurate.
    pub fn largest(&self) -> &ModelProfile {
        self.models.last().expect("non-empty by construction")
    }

    pub fn largest_index(&self) -> usize {
        self.models.len() - 1
    }

    pub fn params(&self) -> Vec<LatencyParams> {
        self.models.iter().map(|m| m.latency).collect()
    }
}

/// Three detectors in a small/medium/large ladder. Per-job costs keep the
/// relative latencies of a typical 1 : 1.5 : 2.9 detector family. The
/// accuracy gap widens with content complexity, from about 1 point on plain
/// content to 14 points on the busiest RoIs.
pub fn default_profiles() -> ProfileSet {
    let model = |id: u32, name: &str, xi: [f64; 3], acc: &[(f64, f64)]| ModelProfile {
        id,
        name: name.to_string(),
        latency: LatencyParams {
            xi1: xi[0],
            xi2: xi[1],
            xi3: xi[2],
        },
        accuracy_curve: AccuracyCurve::new(acc.to_vec()),
        frame_scale: DEFAULT_FRAME_SCALE,
    };
    ProfileSet::new(vec![
        model(
            1,
            "small",
            [0.05, 0.0011, 0.0001375],
            &[(0.0, 0.94), (12.0, 0.92), (25.0, 0.86), (45.0, 0.76)],
        ),
        model(
            2,
            "medium",
            [0.05, 0.0016, 0.0002],
            &[(0.0, 0.945), (12.0, 0.935), (25.0, 0.90), (45.0, 0.84)],
        ),
        model(
            3,
            "large",
            [0.05, 0.0032, 0.0004],
            &[(0.0, 0.95), (12.0, 0.945), (25.0, 0.93), (45.0, 0.90)],
        ),
    ])
    .expect("default profiles are valid")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileRecord {
    id: u32,
    name: String,
    xi: [f64; 3],
    acc: Vec<(f64, f64)>,
    #[serde(default = "default_scale")]
    frame_scale: f64,
}

fn default_scale() -> f64 {
    DEFAULT_FRAME_SCALE
}

pub fn read_profiles(reader: impl Read) -> Result<ProfileSet, ProfileError> {
    let mut models = Vec::new();
    for (k, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProfileRecord = serde_json::from_str(line.trim()).map_err(|e| ProfileError::Parse {
            line: k + 1,
            message: e.to_string(),
        })?;
        models.push(ModelProfile {
            id: rec.id,
            name: rec.name,
            latency: LatencyParams {
                xi1: rec.xi[0],
                xi2: rec.xi[1],
                xi3: rec.xi[2],
            },
            accuracy_curve: AccuracyCurve::new(rec.acc),
            frame_scale: rec.frame_scale,
        });
    }
    models.sort_by_key(|m| m.id);
    ProfileSet::new(models)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<ProfileSet, ProfileError> {
    read_profiles(File::open(path)?)
}

pub fn write_profiles(set: &ProfileSet, writer: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    for m in set.models() {
        let rec = ProfileRecord {
            id: m.id,
            name: m.name.clone(),
            xi: m.latency.as_array(),
            acc: m.accuracy_curve.knots.clone(),
            frame_scale: m.frame_scale,
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()
}
