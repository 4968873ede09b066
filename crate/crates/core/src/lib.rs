//! Compression-metadata assisted RoI extraction and adaptive multi-model
//! inference for edge video analytics.
//!
//! The crate is organised along the processing pipeline:
//!
//! * [`trace_model`]: per-frame encoder metadata (motion vectors, CTU bit
//!   counts), trace files and a seeded synthetic trace generator.
//! * [`roi_extract`]: motion mask, background filter, morphological opening,
//!   rectangularisation and static-object transfer.
//! * [`profiles`]: the latency model `l(r) = xi2 / (r + xi1) + xi3`, its
//!   offline fit, accuracy curves and the CTU bitrate complexity indicator.
//! * [`allocator`]: the per-chunk resource split across models.
//! * [`scheduler`]: bitrate grouping, workload balancing and the annealing
//!   fallback for RoIs the balancing stage leaves behind.
//! * [`simulator`]: chunked virtual-time simulation, latency breakdown and
//!   baseline policies.

pub mod allocator;
pub mod profiles;
pub mod roi_extract;
pub mod scheduler;
pub mod simulator;
pub mod trace_model;

pub use allocator::{allocate, bruteforce_allocate, compute_weights, Allocation, AllocationProblem};
pub use profiles::{LatencyParams, ModelProfile, ProfileSet};
pub use roi_extract::{extract_rois, ExtractParams, Rect, Roi, RoiSource};
pub use scheduler::{schedule, Assignment, QueueState, SchedulerConfig};
pub use simulator::{simulate, ChunkReport, Policy, RunReport, SimConfig};
pub use trace_model::{BitMask, FrameKind, SynthConfig, VideoTrace};
