//! Seeded synthetic traces.
//!
//! Objects are macroblock-aligned rectangles that drift in pixel space and
//! bounce off the frame edges. On P-frames every macroblock under an object
//! footprint carries the object's velocity as its motion vector, and a
//! `noise_rate` fraction of the remaining cells get a small spurious vector.
//! The background mask is the union of all footprints over the trace,
//! grown by one cell, which stands in for an offline segmentation of the
//! region objects can occupy.
//!
//! With `lanes` set, each object travels horizontally inside its own band of
//! rows, so boxes of different objects never touch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ctu_dims, BackgroundMask, BitMask, CtuBitrateMap, Frame, FrameKind, FrameMeta, GroundTruthBox,
    MotionVector, MvGrid, TraceError, VideoTrace, DEFAULT_CTU_SIZE, DEFAULT_MB_SIZE,
};
use crate::roi_extract::{dilate, Rect};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: u32,
    pub gop: u32,
    pub object_count: u32,
    /// Horizontal speed in pixels per frame.
    pub object_speed: u32,
    pub noise_rate: f64,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub mb_size: u32,
    pub ctu_size: u32,
    pub fps: f64,
    /// Inclusive object width range, in macroblocks.
    pub object_cols: (u32, u32),
    /// Inclusive object height range, in macroblocks.
    pub object_rows: (u32, u32),
    /// Cap on the summed object box area as a fraction of the frame.
    pub max_area_fraction: Option<f64>,
    /// One horizontal band of rows per object, with no vertical motion.
    pub lanes: bool,
    /// Inclusive range of per-object content complexity, in kbps per CTU.
    pub object_kbps: (f64, f64),
    /// Inclusive range of background bits per CTU on P-frames.
    pub background_bits: (f64, f64),
    /// Inclusive range of bits per CTU on I-frames.
    pub intra_bits: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 30,
            gop: 10,
            object_count: 2,
            object_speed: 4,
            noise_rate: 0.01,
            seed: 0,
            width: 1280,
            height: 720,
            mb_size: DEFAULT_MB_SIZE,
            ctu_size: DEFAULT_CTU_SIZE,
            fps: 30.0,
            object_cols: (5, 12),
            object_rows: (5, 9),
            max_area_fraction: None,
            lanes: false,
            object_kbps: (4.0, 40.0),
            background_bits: (20.0, 80.0),
            intra_bits: (1500.0, 3000.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Object {
    cols: u32,
    rows: u32,
    x: i64,
    y: i64,
    vx: i64,
    vy: i64,
    bits_per_ctu: f64,
    class: u32,
}

impl Object {
    /// Footprint in cells: the macroblock containing the top-left pixel
    /// anchors a `cols x rows` block.
    fn footprint(&self, mb: u32) -> Rect {
        let mb = mb as i64;
        let cx = (self.x / mb) as u32;
        let cy = (self.y / mb) as u32;
        Rect::new(cx, cy, self.cols, self.rows)
    }

    fn step(&mut self, width: i64, height: i64, mb: i64) {
        let w = self.cols as i64 * mb;
        let h = self.rows as i64 * mb;
        self.x += self.vx;
        if self.x < 0 {
            self.x = -self.x;
            self.vx = -self.vx;
        } else if self.x + w > width {
            self.x = 2 * (width - w) - self.x;
            self.vx = -self.vx;
        }
        self.y += self.vy;
        if self.y < 0 {
            self.y = -self.y;
            self.vy = -self.vy;
        } else if self.y + h > height {
            self.y = 2 * (height - h) - self.y;
            self.vy = -self.vy;
        }
        self.x = self.x.clamp(0, width - w);
        self.y = self.y.clamp(0, height - h);
    }
}

fn check_config(cfg: &SynthConfig) -> Result<(), TraceError> {
    let err = |m: String| Err(TraceError::Config(m));
    if cfg.frames < 1 {
        return err("frames must be at least 1".into());
    }
    if cfg.gop < 1 {
        return err("gop must be at least 1".into());
    }
    if cfg.mb_size == 0 || cfg.ctu_size == 0 {
        return err("macroblock and CTU sizes must be positive".into());
    }
    if cfg.width == 0 || cfg.height == 0 || !cfg.width.is_multiple_of(cfg.mb_size) || !cfg.height.is_multiple_of(cfg.mb_size) {
        return err(format!(
            "frame {}x{} is not a positive multiple of the {}px macroblock",
            cfg.width, cfg.height, cfg.mb_size
        ));
    }
    if !(cfg.fps.is_finite() && cfg.fps > 0.0) {
        return err("fps must be positive".into());
    }
    if !(0.0..=1.0).contains(&cfg.noise_rate) {
        return err(format!("noise_rate {} outside [0, 1]", cfg.noise_rate));
    }
    let (cmin, cmax) = cfg.object_cols;
    let (rmin, rmax) = cfg.object_rows;
    if cmin == 0 || rmin == 0 || cmin > cmax || rmin > rmax {
        return err("object size ranges must be non-empty and positive".into());
    }
    if cfg.object_count > 0 && (cmin > cfg.width / cfg.mb_size || rmin > cfg.height / cfg.mb_size) {
        return err(format!(
            "object of {cmin}x{rmin} macroblocks larger than the {}x{} frame",
            cfg.width, cfg.height
        ));
    }
    for (name, (lo, hi)) in [
        ("object_kbps", cfg.object_kbps),
        ("background_bits", cfg.background_bits),
        ("intra_bits", cfg.intra_bits),
    ] {
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return err(format!("{name} range [{lo}, {hi}] invalid"));
        }
    }
    if cfg.lanes && cfg.object_count > 0 {
        let band = cfg.height / cfg.mb_size / cfg.object_count;
        if band < rmin + 1 {
            return err(format!(
                "{} lanes of {band} macroblocks cannot hold objects {rmin} macroblocks tall",
                cfg.object_count
            ));
        }
    }
    if let Some(frac) = cfg.max_area_fraction {
        if !(frac > 0.0 && frac <= 1.0) {
            return err(format!("max_area_fraction {frac} outside (0, 1]"));
        }
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn spawn_objects(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Object>, TraceError> {
    let grid_cols = cfg.width / cfg.mb_size;
    let grid_rows = cfg.height / cfg.mb_size;
    let mut objects: Vec<Object> = Vec::with_capacity(cfg.object_count as usize);
    for k in 0..cfg.object_count {
        let cols = rng.random_range(cfg.object_cols.0..=cfg.object_cols.1).min(grid_cols);
        let rows = rng.random_range(cfg.object_rows.0..=cfg.object_rows.1).min(grid_rows);
        // Leave at least one free row between lanes.
        let rows = if cfg.lanes {
            rows.min(grid_rows / cfg.object_count - 1)
        } else {
            rows
        };
        let speed = cfg.object_speed as i64;
        let vx = if rng.random_bool(0.5) { speed } else { -speed };
        let vy = if cfg.lanes {
            0
        } else {
            rng.random_range(-1i64..=1) * (speed / 4)
        };
        let kbps = uniform(rng, cfg.object_kbps);
        objects.push(Object {
            cols,
            rows,
            x: 0,
            y: 0,
            vx,
            vy,
            bits_per_ctu: kbps * 1000.0 / cfg.fps,
            class: k % 3,
        });
    }

    if let Some(frac) = cfg.max_area_fraction {
        let cap_cells = frac * (grid_cols * grid_rows) as f64;
        let area = |objs: &[Object]| objs.iter().map(|o| (o.cols * o.rows) as f64).sum::<f64>();
        while area(&objects) > cap_cells {
            // Shrink the largest object along its longer side.
            let Some(o) = objects
                .iter_mut()
                .filter(|o| o.cols > cfg.object_cols.0 || o.rows > cfg.object_rows.0)
                .max_by_key(|o| o.cols * o.rows)
            else {
                return Err(TraceError::Config(format!(
                    "{} objects cannot fit within {:.0}% of the frame",
                    cfg.object_count,
                    frac * 100.0
                )));
            };
            let shrink_cols = if o.rows <= cfg.object_rows.0 {
                true
            } else if o.cols <= cfg.object_cols.0 {
                false
            } else {
                o.cols >= o.rows
            };
            if shrink_cols {
                o.cols -= 1;
            } else {
                o.rows -= 1;
            }
        }
    }

    let band = grid_rows / cfg.object_count.max(1);
    for (k, o) in objects.iter_mut().enumerate() {
        let max_x = cfg.width - o.cols * cfg.mb_size;
        o.x = rng.random_range(0..=max_x) as i64;
        o.y = if cfg.lanes {
            let top = k as u32 * band;
            let slack = band - 1 - o.rows;
            ((top + rng.random_range(0..=slack)) * cfg.mb_size) as i64
        } else {
            rng.random_range(0..=cfg.height - o.rows * cfg.mb_size) as i64
        };
    }
    Ok(objects)
}

/// Generates a deterministic trace for `cfg`.
pub fn synth_trace(cfg: &SynthConfig) -> Result<VideoTrace, TraceError> {
    check_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mb = cfg.mb_size;
    let cols = (cfg.width / mb) as usize;
    let rows = (cfg.height / mb) as usize;
    let (ctu_cols, ctu_rows) = ctu_dims(cfg.width, cfg.height, cfg.ctu_size);

    let mut objects = spawn_objects(cfg, &mut rng)?;

    // Trajectories first: the background mask depends on every footprint.
    let mut states: Vec<Vec<Object>> = Vec::with_capacity(cfg.frames as usize);
    for _ in 0..cfg.frames {
        states.push(objects.clone());
        for o in &mut objects {
            o.step(cfg.width as i64, cfg.height as i64, mb as i64);
        }
    }

    let mut occupied = BitMask::new(cols, rows);
    for o in states.iter().flatten() {
        let fp = o.footprint(mb);
        for r in fp.y..fp.y + fp.h {
            for c in fp.x..fp.x + fp.w {
                occupied.set(r as usize, c as usize, true);
            }
        }
    }
    let background = BackgroundMask(dilate(&occupied, 1));

    let mut frames = Vec::with_capacity(cfg.frames as usize);
    for (f, objs) in states.iter().enumerate() {
        let kind = if (f as u32).is_multiple_of(cfg.gop) {
            FrameKind::I
        } else {
            FrameKind::P
        };

        let mut covered = BitMask::new(cols, rows);
        let mut mv = MvGrid::zeros(cols, rows, mb);
        let mut gt = Vec::with_capacity(objs.len());
        for o in objs {
            let fp = o.footprint(mb);
            for r in fp.y..fp.y + fp.h {
                for c in fp.x..fp.x + fp.w {
                    covered.set(r as usize, c as usize, true);
                    if kind != FrameKind::I {
                        mv.set(r as usize, c as usize, MotionVector::new(o.vx as i32, o.vy as i32));
                    }
                }
            }
            gt.push(GroundTruthBox {
                rect: Rect::new(fp.x * mb, fp.y * mb, fp.w * mb, fp.h * mb),
                class: o.class,
            });
        }
        if kind != FrameKind::I && cfg.noise_rate > 0.0 {
            for r in 0..rows {
                for c in 0..cols {
                    if !covered.get(r, c) && rng.random_bool(cfg.noise_rate) {
                        let dx = [-2, -1, 1, 2][rng.random_range(0..4)];
                        let dy = rng.random_range(-1..=1);
                        mv.set(r, c, MotionVector::new(dx, dy));
                    }
                }
            }
        }

        let base_range = if kind == FrameKind::I {
            cfg.intra_bits
        } else {
            cfg.background_bits
        };
        let mut bits = Vec::with_capacity(ctu_cols * ctu_rows);
        for cr in 0..ctu_rows {
            for cc in 0..ctu_cols {
                let ctu = Rect::new(
                    cc as u32 * cfg.ctu_size,
                    cr as u32 * cfg.ctu_size,
                    cfg.ctu_size,
                    cfg.ctu_size,
                );
                let mut b = uniform(&mut rng, base_range);
                for (o, g) in objs.iter().zip(&gt) {
                    let overlap = ctu.intersection_area(&g.rect) as f64;
                    b += o.bits_per_ctu * overlap / ctu.area() as f64;
                }
                bits.push(b.round());
            }
        }

        frames.push(Frame {
            meta: FrameMeta {
                index: f as u32,
                kind,
                width_px: cfg.width,
                height_px: cfg.height,
                timestamp: f as f64 / cfg.fps,
            },
            mv,
            ctu: CtuBitrateMap {
                ctu_size: cfg.ctu_size,
                cols: ctu_cols,
                rows: ctu_rows,
                bits,
                fps: cfg.fps,
            },
            ground_truth: Some(gt),
        });
    }

    Ok(VideoTrace {
        fps: cfg.fps,
        mb_size: mb,
        ctu_size: cfg.ctu_size,
        gop: cfg.gop,
        frames,
        background,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{validate_trace, write_trace};

    #[test]
    fn no_objects_no_noise_means_no_motion() {
        let cfg = SynthConfig {
            frames: 30,
            gop: 10,
            object_count: 0,
            noise_rate: 0.0,
            seed: 7,
            ..SynthConfig::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        assert_eq!(trace.frames.len(), 30);
        assert!(trace
            .frames
            .iter()
            .all(|f| f.mv.vectors.iter().all(|v| v.is_zero())));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            frames: 30,
            gop: 10,
            object_count: 2,
            noise_rate: 0.01,
            seed: 7,
            ..SynthConfig::default()
        };
        let encode = |t: &VideoTrace| {
            let mut buf = Vec::new();
            write_trace(t, &mut buf).unwrap();
            buf
        };
        let a = synth_trace(&cfg).unwrap();
        let b = synth_trace(&cfg).unwrap();
        assert_eq!(encode(&a), encode(&b));
        let c = synth_trace(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(encode(&a), encode(&c));
    }

    #[test]
    fn area_cap_respected() {
        let cfg = SynthConfig {
            frames: 60,
            gop: 30,
            object_count: 3,
            seed: 1,
            object_cols: (10, 30),
            object_rows: (8, 20),
            max_area_fraction: Some(0.25),
            ..SynthConfig::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        let frame_area = 1280.0 * 720.0;
        for f in &trace.frames {
            let total: u64 = f.ground_truth.as_ref().unwrap().iter().map(|b| b.rect.area()).sum();
            assert!(total as f64 <= 0.25 * frame_area, "frame {}: {total}", f.meta.index);
        }
        assert!(validate_trace(&trace).is_empty());
    }

    #[test]
    fn impossible_area_cap_is_config_error() {
        let cfg = SynthConfig {
            object_count: 3,
            object_cols: (40, 40),
            object_rows: (30, 30),
            max_area_fraction: Some(0.25),
            ..SynthConfig::default()
        };
        assert!(matches!(synth_trace(&cfg), Err(TraceError::Config(_))));
    }

    #[test]
    fn oversized_object_rejected() {
        let cfg = SynthConfig {
            object_count: 1,
            object_cols: (81, 90),
            ..SynthConfig::default()
        };
        assert!(matches!(synth_trace(&cfg), Err(TraceError::Config(_))));
    }

    #[test]
    fn zero_frames_rejected() {
        let cfg = SynthConfig {
            frames: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_trace(&cfg), Err(TraceError::Config(_))));
        let cfg = SynthConfig {
            gop: 0,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_trace(&cfg), Err(TraceError::Config(_))));
    }

    #[test]
    fn objects_stay_inside_frame() {
        let cfg = SynthConfig {
            frames: 300,
            object_count: 3,
            object_speed: 13,
            seed: 5,
            ..SynthConfig::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        let bounds = Rect::new(0, 0, 1280, 720);
        for f in &trace.frames {
            for b in f.ground_truth.as_ref().unwrap() {
                assert!(bounds.contains(&b.rect));
            }
        }
    }

    #[test]
    fn gop_sets_reference_frames() {
        let trace = synth_trace(&SynthConfig {
            frames: 25,
            gop: 10,
            ..SynthConfig::default()
        })
        .unwrap();
        let refs: Vec<u32> = trace
            .frames
            .iter()
            .filter(|f| f.meta.kind.is_reference())
            .map(|f| f.meta.index)
            .collect();
        assert_eq!(refs, vec![0, 10, 20]);
    }

    #[test]
    fn lanes_keep_objects_apart() {
        let cfg = SynthConfig {
            frames: 40,
            gop: 20,
            object_count: 3,
            object_cols: (20, 28),
            object_rows: (10, 14),
            noise_rate: 0.0,
            lanes: true,
            seed: 9,
            ..SynthConfig::default()
        };
        let trace = synth_trace(&cfg).unwrap();
        let band_px = 720 / 3 / 16 * 16;
        for f in &trace.frames {
            let boxes = f.ground_truth.as_ref().unwrap();
            for (k, b) in boxes.iter().enumerate() {
                let lo = k as u32 * band_px;
                assert!(b.rect.y >= lo && b.rect.bottom() < lo + band_px, "frame {}", f.meta.index);
            }
            assert_eq!(boxes.iter().map(|b| b.rect.y).collect::<Vec<_>>(), {
                trace.frames[0].ground_truth.as_ref().unwrap().iter().map(|b| b.rect.y).collect::<Vec<_>>()
            });
        }
        let crowded = SynthConfig {
            object_count: 4,
            object_rows: (11, 11),
            lanes: true,
            ..SynthConfig::default()
        };
        assert!(matches!(synth_trace(&crowded), Err(TraceError::Config(_))));
    }
}
