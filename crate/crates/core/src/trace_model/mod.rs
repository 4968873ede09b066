//! Encoder metadata model: frames, motion-vector grids, CTU bit maps and
//! the background mask, plus trace validation.

mod io;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::roi_extract::Rect;

pub use io::{load_trace, read_trace, write_trace, write_trace_file};
pub use synth::{synth_trace, SynthConfig};

pub const DEFAULT_MB_SIZE: u32 = 16;
pub const DEFAULT_CTU_SIZE: u32 = 64;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no frames")]
    NoFrames,
    #[error("invalid trace: {}", join_diagnostics(.0))]
    Validation(Vec<Diagnostic>),
    #[error("invalid synthetic trace configuration: {0}")]
    Config(String),
}

fn join_diagnostics(diags: &[Diagnostic]) -> String {
    diags.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameKind {
    I,
    P,
    B,
}

impl FrameKind {
    /// I-frames are coded independently and act as reference frames.
    pub fn is_reference(self) -> bool {
        matches!(self, FrameKind::I)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMeta {
    pub index: u32,
    pub kind: FrameKind,
    pub width_px: u32,
    pub height_px: u32,
    pub timestamp: f64,
}

impl FrameMeta {
    pub fn rect(&self) -> Rect {
        Rect::new(0, 0, self.width_px, self.height_px)
    }
}

/// Integer-pel displacement of one macroblock. `(0, 0)` is a stationary block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(i32, i32)", into = "(i32, i32)")]
pub struct MotionVector {
    pub dx: i32,
    pub dy: i32,
}

impl MotionVector {
    pub const ZERO: MotionVector = MotionVector { dx: 0, dy: 0 };

    pub fn new(dx: i32, dy: i32) -> Self {
        Self { dx, dy }
    }

    pub fn is_zero(self) -> bool {
        self.dx == 0 && self.dy == 0
    }
}

impl From<(i32, i32)> for MotionVector {
    fn from((dx, dy): (i32, i32)) -> Self {
        Self { dx, dy }
    }
}

impl From<MotionVector> for (i32, i32) {
    fn from(mv: MotionVector) -> Self {
        (mv.dx, mv.dy)
    }
}

/// Dense row-major grid of macroblock motion vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct MvGrid {
    pub cols: usize,
    pub rows: usize,
    pub mb_size: u32,
    pub vectors: Vec<MotionVector>,
}

impl MvGrid {
    pub fn zeros(cols: usize, rows: usize, mb_size: u32) -> Self {
        Self {
            cols,
            rows,
            mb_size,
            vectors: vec![MotionVector::ZERO; cols * rows],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> MotionVector {
        self.vectors[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, mv: MotionVector) {
        self.vectors[row * self.cols + col] = mv;
    }
}

/// Bits spent per coding tree unit in one frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CtuBitrateMap {
    pub ctu_size: u32,
    pub cols: usize,
    pub rows: usize,
    pub bits: Vec<f64>,
    pub fps: f64,
}

impl CtuBitrateMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.bits[row * self.cols + col]
    }

    pub fn total_bits(&self) -> f64 {
        self.bits.iter().sum()
    }
}

/// CTU grid dimensions for a frame: `ceil(dim / ctu_size)`.
pub fn ctu_dims(width_px: u32, height_px: u32, ctu_size: u32) -> (usize, usize) {
    (
        width_px.div_ceil(ctu_size) as usize,
        height_px.div_ceil(ctu_size) as usize,
    )
}

/// Dense binary grid at macroblock resolution.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    cols: usize,
    rows: usize,
    cells: Vec<bool>,
}

impl BitMask {
    pub fn new(cols: usize, rows: usize) -> Self {
        Self::filled(cols, rows, false)
    }

    pub fn filled(cols: usize, rows: usize, value: bool) -> Self {
        Self {
            cols,
            rows,
            cells: vec![value; cols * rows],
        }
    }

    pub fn from_fn(cols: usize, rows: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                cells.push(f(r, c));
            }
        }
        Self { cols, rows, cells }
    }

    /// Builds a mask from row-major cells. Returns `None` on a length mismatch.
    pub fn from_cells(cols: usize, rows: usize, cells: Vec<bool>) -> Option<Self> {
        (cells.len() == cols * rows).then_some(Self { cols, rows, cells })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.cells[row * self.cols + col] = value;
    }

    pub fn popcount(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// Cellwise implication: every true cell of `self` is true in `other`.
    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.dims() == other.dims() && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }

    /// Run-length encoding, alternating runs starting with `false`.
    pub fn to_runs(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0;
        for &c in &self.cells {
            if c == current {
                len += 1;
            } else {
                runs.push(len);
                current = c;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(cols: usize, rows: usize, runs: &[usize]) -> Option<Self> {
        let total: usize = runs.iter().sum();
        if total != cols * rows {
            return None;
        }
        let mut cells = Vec::with_capacity(total);
        for (k, &len) in runs.iter().enumerate() {
            cells.extend(std::iter::repeat_n(k % 2 == 1, len));
        }
        Some(Self { cols, rows, cells })
    }

    /// Plain portable bitmap (`P1`) text.
    pub fn to_pbm(&self) -> String {
        let mut out = format!("P1\n{} {}\n", self.cols, self.rows);
        for r in 0..self.rows {
            let line: Vec<&str> = (0..self.cols)
                .map(|c| if self.get(r, c) { "1" } else { "0" })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

impl fmt::Debug for BitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMask {}x{}", self.cols, self.rows)?;
        for r in 0..self.rows {
            for c in 0..self.cols {
                f.write_str(if self.get(r, c) { "#" } else { "." })?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Non-background (keepable) cells, produced offline by a segmentation pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackgroundMask(pub BitMask);

impl BackgroundMask {
    pub fn all_keep(cols: usize, rows: usize) -> Self {
        Self(BitMask::filled(cols, rows, true))
    }

    pub fn mask(&self) -> &BitMask {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruthBox {
    pub rect: Rect,
    pub class: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub meta: FrameMeta,
    pub mv: MvGrid,
    pub ctu: CtuBitrateMap,
    pub ground_truth: Option<Vec<GroundTruthBox>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoTrace {
    pub fps: f64,
    pub mb_size: u32,
    pub ctu_size: u32,
    pub gop: u32,
    pub frames: Vec<Frame>,
    pub background: BackgroundMask,
}

impl VideoTrace {
    pub fn frame_dims(&self) -> Option<(u32, u32)> {
        self.frames.first().map(|f| (f.meta.width_px, f.meta.height_px))
    }

    pub fn grid_dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(|f| (f.mv.cols, f.mv.rows))
    }
}

/// One invariant violation found by [`validate_trace`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub frame: Option<u32>,
    pub message: String,
}

impl Diagnostic {
    fn trace(message: impl Into<String>) -> Self {
        Self {
            frame: None,
            message: message.into(),
        }
    }

    fn frame(index: u32, message: impl Into<String>) -> Self {
        Self {
            frame: Some(index),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.frame {
            Some(idx) => write!(f, "frame {idx}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks every trace invariant. Returns one diagnostic per violation; an
/// empty list means the trace is valid.
pub fn validate_trace(trace: &VideoTrace) -> Vec<Diagnostic> {
    let mut diags = Vec::new();

    if !(trace.fps.is_finite() && trace.fps > 0.0) {
        diags.push(Diagnostic::trace(format!("fps must be positive, got {}", trace.fps)));
    }
    if trace.gop == 0 {
        diags.push(Diagnostic::trace("gop must be at least 1"));
    }
    if trace.mb_size == 0 || trace.ctu_size == 0 {
        diags.push(Diagnostic::trace("macroblock and CTU sizes must be positive"));
        return diags;
    }

    let Some(first) = trace.frames.first() else {
        diags.push(Diagnostic::trace("trace has no frames"));
        return diags;
    };
    if !first.meta.kind.is_reference() {
        diags.push(Diagnostic::frame(first.meta.index, "first frame not reference"));
    }
    if !trace.frames.iter().any(|f| f.meta.kind.is_reference()) {
        diags.push(Diagnostic::trace("trace contains no I-frame"));
    }

    let (width, height) = (first.meta.width_px, first.meta.height_px);
    let mb = trace.mb_size;
    let (cols, rows) = ((width / mb) as usize, (height / mb) as usize);
    let (ctu_cols, ctu_rows) = ctu_dims(width, height, trace.ctu_size);

    if trace.background.0.dims() != (cols, rows) {
        let (bc, br) = trace.background.0.dims();
        diags.push(Diagnostic::trace(format!(
            "background mask is {bc}x{br}, expected {cols}x{rows}"
        )));
    }

    let mut prev_index: Option<u32> = None;
    for frame in &trace.frames {
        let meta = &frame.meta;
        let idx = meta.index;
        if let Some(prev) = prev_index {
            if idx <= prev {
                diags.push(Diagnostic::frame(
                    idx,
                    format!("index not strictly increasing (previous {prev})"),
                ));
            }
        }
        prev_index = Some(idx);

        if meta.width_px == 0 || meta.height_px == 0 || meta.width_px % mb != 0 || meta.height_px % mb != 0 {
            diags.push(Diagnostic::frame(
                idx,
                format!(
                    "frame size {}x{} is not a positive multiple of the {mb}px macroblock",
                    meta.width_px, meta.height_px
                ),
            ));
        }
        if (meta.width_px, meta.height_px) != (width, height) {
            diags.push(Diagnostic::frame(
                idx,
                format!(
                    "frame size {}x{} differs from trace size {width}x{height}",
                    meta.width_px, meta.height_px
                ),
            ));
        }

        let mv = &frame.mv;
        if mv.mb_size != mb {
            diags.push(Diagnostic::frame(
                idx,
                format!("motion-vector grid uses {}px macroblocks, trace uses {mb}px", mv.mb_size),
            ));
        }
        if (mv.cols, mv.rows) != (cols, rows) || mv.vectors.len() != cols * rows {
            diags.push(Diagnostic::frame(
                idx,
                format!(
                    "motion-vector grid is {}x{} with {} cells, expected {cols}x{rows}",
                    mv.cols,
                    mv.rows,
                    mv.vectors.len()
                ),
            ));
        }

        let ctu = &frame.ctu;
        if ctu.ctu_size != trace.ctu_size {
            diags.push(Diagnostic::frame(
                idx,
                format!("CTU map uses {}px CTUs, trace uses {}px", ctu.ctu_size, trace.ctu_size),
            ));
        }
        if ctu.fps != trace.fps {
            diags.push(Diagnostic::frame(
                idx,
                format!("CTU map fps {} differs from trace fps {}", ctu.fps, trace.fps),
            ));
        }
        if (ctu.cols, ctu.rows) != (ctu_cols, ctu_rows) || ctu.bits.len() != ctu_cols * ctu_rows {
            diags.push(Diagnostic::frame(
                idx,
                format!(
                    "CTU map is {}x{} with {} entries, expected {ctu_cols}x{ctu_rows}",
                    ctu.cols,
                    ctu.rows,
                    ctu.bits.len()
                ),
            ));
        } else {
            for (k, &bits) in ctu.bits.iter().enumerate() {
                if !(bits.is_finite() && bits >= 0.0) {
                    diags.push(Diagnostic::frame(
                        idx,
                        format!(
                            "CTU ({}, {}) has invalid bit count {bits}",
                            k / ctu.cols,
                            k % ctu.cols
                        ),
                    ));
                }
            }
        }

        if let Some(gt) = &frame.ground_truth {
            let bounds = meta.rect();
            for b in gt {
                if b.rect.w == 0 || b.rect.h == 0 || !bounds.contains(&b.rect) {
                    diags.push(Diagnostic::frame(
                        idx,
                        format!("ground-truth box {:?} outside frame or empty", b.rect),
                    ));
                }
            }
        }
    }
    diags
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig {
            frames: 12,
            gop: 6,
            object_count: 2,
            noise_rate: 0.02,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthetic_trace_is_valid() {
        let trace = synth_trace(&small_config()).unwrap();
        assert_eq!(validate_trace(&trace), vec![]);
    }

    #[test]
    fn negative_ctu_bits_named() {
        let mut trace = synth_trace(&small_config()).unwrap();
        let cols = trace.frames[4].ctu.cols;
        trace.frames[4].ctu.bits[2 * cols + 7] = -5.0;
        let diags = validate_trace(&trace);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].frame, Some(4));
        assert!(diags[0].message.contains("CTU (2, 7)"), "{}", diags[0]);
    }

    #[test]
    fn first_frame_must_be_reference() {
        let mut trace = synth_trace(&small_config()).unwrap();
        trace.frames[0].meta.kind = FrameKind::P;
        let diags = validate_trace(&trace);
        assert!(diags.iter().any(|d| d.message == "first frame not reference"));
    }

    #[test]
    fn trace_without_i_frames() {
        let mut trace = synth_trace(&small_config()).unwrap();
        for f in &mut trace.frames {
            f.meta.kind = FrameKind::P;
        }
        let diags = validate_trace(&trace);
        assert!(diags.iter().any(|d| d.message.contains("no I-frame")));
    }

    #[test]
    fn non_increasing_index() {
        let mut trace = synth_trace(&small_config()).unwrap();
        trace.frames[3].meta.index = 2;
        let diags = validate_trace(&trace);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].frame, Some(2));
    }

    #[test]
    fn runs_round_trip() {
        let m = BitMask::from_fn(7, 3, |r, c| (r * 7 + c) % 3 == 0 || c == 6);
        let runs = m.to_runs();
        assert_eq!(BitMask::from_runs(7, 3, &runs).unwrap(), m);
        let all = BitMask::filled(4, 2, true);
        assert_eq!(all.to_runs(), vec![0, 8]);
        assert!(BitMask::from_runs(4, 2, &[1, 2]).is_none());
    }

    #[test]
    fn pbm_layout() {
        let mut m = BitMask::new(3, 2);
        m.set(1, 2, true);
        assert_eq!(m.to_pbm(), "P1\n3 2\n0 0 0\n0 0 1\n");
    }

    #[test]
    fn ctu_grid_rounds_up() {
        assert_eq!(ctu_dims(1280, 720, 64), (20, 12));
        assert_eq!(ctu_dims(64, 64, 64), (1, 1));
    }
}
