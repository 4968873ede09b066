//! Line-delimited JSON trace files.
//!
//! ```text
//! {"fps":30.0,"mb":16,"ctu_size":64,"gop":30}
//! {"bg":{"cols":80,"rows":45,"runs":[0,3600]}}
//! {"f":0,"kind":"I","w":1280,"h":720,"mv":[[0,0],...],"ctu":[812.0,...],"ts":0.0,"gt":[[x,y,w,h,class]]}
//! ```
//!
//! The header must come first. The `bg` line is optional (absent means
//! every cell is keepable) and `gt` is optional per frame.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    ctu_dims, validate_trace, BackgroundMask, BitMask, CtuBitrateMap, Frame, FrameKind, FrameMeta,
    GroundTruthBox, MotionVector, MvGrid, TraceError, VideoTrace,
};
use crate::roi_extract::Rect;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderRecord {
    fps: f64,
    mb: u32,
    ctu_size: u32,
    gop: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleMask {
    cols: usize,
    rows: usize,
    runs: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackgroundRecord {
    bg: RleMask,
}

/// `[x, y, w, h, class]`.
type GtTuple = (u32, u32, u32, u32, u32);

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    f: u32,
    kind: FrameKind,
    w: u32,
    h: u32,
    mv: Vec<MotionVector>,
    ctu: Vec<f64>,
    ts: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<GtTuple>>,
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<VideoTrace, TraceError> {
    read_trace(File::open(path)?)
}

/// Parses and validates a trace.
pub fn read_trace(reader: impl Read) -> Result<VideoTrace, TraceError> {
    let reader = BufReader::new(reader);
    let mut header: Option<HeaderRecord> = None;
    let mut background: Option<BitMask> = None;
    let mut records: Vec<FrameRecord> = Vec::new();

    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let parse_err = |message: String| TraceError::Parse {
            line: line_no,
            message,
        };
        let value: Value = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let Some(obj) = value.as_object() else {
            return Err(parse_err("expected a JSON object".into()));
        };

        if obj.contains_key("fps") {
            if header.is_some() {
                return Err(parse_err("duplicate header line".into()));
            }
            header = Some(serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?);
        } else if header.is_none() {
            return Err(parse_err("first record must be the header".into()));
        } else if obj.contains_key("bg") {
            if background.is_some() {
                return Err(parse_err("duplicate background line".into()));
            }
            let rec: BackgroundRecord =
                serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
            let mask = BitMask::from_runs(rec.bg.cols, rec.bg.rows, &rec.bg.runs).ok_or_else(|| {
                parse_err(format!(
                    "background runs do not cover {}x{} cells",
                    rec.bg.cols, rec.bg.rows
                ))
            })?;
            background = Some(mask);
        } else if obj.contains_key("f") {
            records.push(serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?);
        } else {
            return Err(parse_err("unrecognised record".into()));
        }
    }

    let header = header.ok_or(TraceError::NoFrames)?;
    if records.is_empty() {
        return Err(TraceError::NoFrames);
    }
    if header.mb == 0 || header.ctu_size == 0 {
        return Err(TraceError::Validation(vec![super::Diagnostic::trace(
            "macroblock and CTU sizes must be positive",
        )]));
    }

    let frames: Vec<Frame> = records
        .into_iter()
        .map(|rec| frame_from_record(rec, &header))
        .collect();
    let background = match background {
        Some(mask) => BackgroundMask(mask),
        None => {
            let (cols, rows) = (frames[0].mv.cols, frames[0].mv.rows);
            BackgroundMask::all_keep(cols, rows)
        }
    };
    let trace = VideoTrace {
        fps: header.fps,
        mb_size: header.mb,
        ctu_size: header.ctu_size,
        gop: header.gop,
        frames,
        background,
    };
    let diags = validate_trace(&trace);
    if diags.is_empty() {
        Ok(trace)
    } else {
        Err(TraceError::Validation(diags))
    }
}

// Grid dimensions are derived from the frame size; a wrong number of
// vectors or CTU entries is reported by validation, naming the frame.
fn frame_from_record(rec: FrameRecord, header: &HeaderRecord) -> Frame {
    let cols = (rec.w / header.mb) as usize;
    let rows = (rec.h / header.mb) as usize;
    let (ctu_cols, ctu_rows) = ctu_dims(rec.w, rec.h, header.ctu_size);
    Frame {
        meta: FrameMeta {
            index: rec.f,
            kind: rec.kind,
            width_px: rec.w,
            height_px: rec.h,
            timestamp: rec.ts,
        },
        mv: MvGrid {
            cols,
            rows,
            mb_size: header.mb,
            vectors: rec.mv,
        },
        ctu: CtuBitrateMap {
            ctu_size: header.ctu_size,
            cols: ctu_cols,
            rows: ctu_rows,
            bits: rec.ctu,
            fps: header.fps,
        },
        ground_truth: rec.gt.map(|boxes| {
            boxes
                .into_iter()
                .map(|(x, y, w, h, class)| GroundTruthBox {
                    rect: Rect::new(x, y, w, h),
                    class,
                })
                .collect()
        }),
    }
}

pub fn write_trace(trace: &VideoTrace, writer: impl Write) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    let header = HeaderRecord {
        fps: trace.fps,
        mb: trace.mb_size,
        ctu_size: trace.ctu_size,
        gop: trace.gop,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;

    let bg = &trace.background.0;
    let rec = BackgroundRecord {
        bg: RleMask {
            cols: bg.cols(),
            rows: bg.rows(),
            runs: bg.to_runs(),
        },
    };
    serde_json::to_writer(&mut w, &rec)?;
    writeln!(w)?;

    for frame in &trace.frames {
        let rec = FrameRecord {
            f: frame.meta.index,
            kind: frame.meta.kind,
            w: frame.meta.width_px,
            h: frame.meta.height_px,
            mv: frame.mv.vectors.clone(),
            ctu: frame.ctu.bits.clone(),
            ts: frame.meta.timestamp,
            gt: frame.ground_truth.as_ref().map(|boxes| {
                boxes
                    .iter()
                    .map(|b| (b.rect.x, b.rect.y, b.rect.w, b.rect.h, b.class))
                    .collect()
            }),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_trace_file(trace: &VideoTrace, path: impl AsRef<Path>) -> std::io::Result<()> {
    write_trace(trace, File::create(path)?)
}
