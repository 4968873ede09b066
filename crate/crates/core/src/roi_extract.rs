//! Motion-vector based RoI extraction for non-reference frames.
//!
//! The pipeline runs on macroblock-resolution masks:
//!
//! 1. [`motion_mask`]: keep macroblocks with a nonzero motion vector.
//! 2. [`filter_background`]: drop cells outside the offline non-background mask.
//! 3. [`opening`]: erosion then dilation with a square element, removing
//!    isolated points while restoring the extent of larger regions.
//! 4. [`connected_components`] + [`bounding_rects`]: one rectangle per
//!    8-connected region, overlapping rectangles merged until disjoint.
//! 5. [`extract_rois`]: the rectangles become RoIs scored by the average
//!    bitrate of the CTUs they cover.
//!
//! Static objects produce no motion; [`transfer_static_detections`] carries
//! their detections over from the latest reference frame.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::avg_ctu_bitrate;
use crate::trace_model::{BackgroundMask, BitMask, CtuBitrateMap, FrameMeta, MvGrid};

/// Detections overlapping an RoI at or above this IoU are re-detected
/// inside the RoI instead of being copied from the reference frame.
pub const STATIC_TRANSFER_IOU: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("frame {0} is a reference frame; reference frames are analysed whole")]
    ReferenceFrame(u32),
    #[error("mask is {mask:?} but background is {background:?}")]
    DimensionMismatch {
        mask: (usize, usize),
        background: (usize, usize),
    },
    #[error("CTU map {ctu:?} does not cover the {width}x{height} frame")]
    CtuMismatch {
        ctu: (usize, usize),
        width: u32,
        height: u32,
    },
}

/// Axis-aligned rectangle, top-left origin. Units are whatever the caller
/// works in (pixels for RoIs, cells for footprints).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    /// True when the rectangles share positive area; touching edges do not count.
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.intersection(other).is_some()
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x && other.y >= self.y && other.right() <= self.right() && other.bottom() <= self.bottom()
    }

    pub fn union(&self, other: &Rect) -> Rect {
        let x0 = self.x.min(other.x);
        let y0 = self.y.min(other.y);
        let x1 = self.right().max(other.right());
        let y1 = self.bottom().max(other.bottom());
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSource {
    Motion,
    StaticTransfer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub frame: u32,
    pub index: u32,
    pub rect: Rect,
    pub avg_bitrate_kbps: f64,
    pub source: RoiSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractParams {
    /// Radius of the square structuring element, in macroblocks.
    pub radius: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self { radius: 1 }
    }
}

/// Step 1: true where the motion vector is nonzero.
pub fn motion_mask(grid: &MvGrid) -> BitMask {
    BitMask::from_fn(grid.cols, grid.rows, |r, c| !grid.get(r, c).is_zero())
}

/// Step 2: cellwise AND with the non-background mask.
pub fn filter_background(mask: &BitMask, bg: &BackgroundMask) -> Result<BitMask, ExtractError> {
    let bg = bg.mask();
    if mask.dims() != bg.dims() {
        return Err(ExtractError::DimensionMismatch {
            mask: mask.dims(),
            background: bg.dims(),
        });
    }
    Ok(BitMask::from_fn(mask.cols(), mask.rows(), |r, c| {
        mask.get(r, c) && bg.get(r, c)
    }))
}

// Square neighbourhoods are separable: a horizontal pass then a vertical
// pass. Windows are clipped at the border; nothing outside the mask is
// consulted.
fn square_filter(mask: &BitMask, radius: usize, all: bool) -> BitMask {
    if radius == 0 {
        return mask.clone();
    }
    let (cols, rows) = mask.dims();
    let reduce = |window: std::ops::RangeInclusive<usize>, cell: &dyn Fn(usize) -> bool| {
        let mut window = window;
        if all {
            window.all(cell)
        } else {
            window.any(cell)
        }
    };

    let horizontal = BitMask::from_fn(cols, rows, |r, c| {
        let lo = c.saturating_sub(radius);
        let hi = (c + radius).min(cols - 1);
        reduce(lo..=hi, &|k| mask.get(r, k))
    });
    BitMask::from_fn(cols, rows, |r, c| {
        let lo = r.saturating_sub(radius);
        let hi = (r + radius).min(rows - 1);
        reduce(lo..=hi, &|k| horizontal.get(k, c))
    })
}

/// A cell survives iff its whole clipped `(2r+1)^2` neighbourhood is true.
pub fn erode(mask: &BitMask, radius: usize) -> BitMask {
    square_filter(mask, radius, true)
}

/// A cell is set iff any cell of its clipped `(2r+1)^2` neighbourhood is true.
pub fn dilate(mask: &BitMask, radius: usize) -> BitMask {
    square_filter(mask, radius, false)
}

/// Step 3: `dilate(erode(mask, r), r)`.
pub fn opening(mask: &BitMask, radius: usize) -> BitMask {
    dilate(&erode(mask, radius), radius)
}

/// Cells of one component as `(row, col)`, sorted row-major.
pub type Component = Vec<(usize, usize)>;

/// Maximal 8-connected components, ordered by their first cell in
/// row-major order.
pub fn connected_components(mask: &BitMask) -> Vec<Component> {
    let (cols, rows) = mask.dims();
    let mut seen = vec![false; cols * rows];
    let mut components = Vec::new();
    let mut stack = Vec::new();

    for r0 in 0..rows {
        for c0 in 0..cols {
            if !mask.get(r0, c0) || seen[r0 * cols + c0] {
                continue;
            }
            let mut comp = Vec::new();
            seen[r0 * cols + c0] = true;
            stack.push((r0, c0));
            while let Some((r, c)) = stack.pop() {
                comp.push((r, c));
                for nr in r.saturating_sub(1)..=(r + 1).min(rows - 1) {
                    for nc in c.saturating_sub(1)..=(c + 1).min(cols - 1) {
                        let k = nr * cols + nc;
                        if mask.get(nr, nc) && !seen[k] {
                            seen[k] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            comp.sort_unstable();
            components.push(comp);
        }
    }
    components
}

/// Minimal cell-space rectangle per component, without merging.
fn component_cell_rects(components: &[Component]) -> Vec<Rect> {
    components
        .iter()
        .filter(|comp| !comp.is_empty())
        .map(|comp| {
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            for &(r, c) in comp {
                r0 = r0.min(r);
                c0 = c0.min(c);
                r1 = r1.max(r);
                c1 = c1.max(c);
            }
            Rect::new(c0 as u32, r0 as u32, (c1 - c0 + 1) as u32, (r1 - r0 + 1) as u32)
        })
        .collect()
}

fn scale_rect(rect: Rect, mb_size: u32) -> Rect {
    Rect::new(rect.x * mb_size, rect.y * mb_size, rect.w * mb_size, rect.h * mb_size)
}

/// Replaces overlapping pairs by their union until the set is pairwise
/// disjoint, then sorts by `(y, x)`.
pub fn merge_overlapping(mut rects: Vec<Rect>) -> Vec<Rect> {
    'outer: loop {
        for i in 0..rects.len() {
            for j in i + 1..rects.len() {
                if rects[i].overlaps(&rects[j]) {
                    let merged = rects[i].union(&rects[j]);
                    rects.swap_remove(j);
                    rects[i] = merged;
                    continue 'outer;
                }
            }
        }
        break;
    }
    rects.sort_by_key(|r| (r.y, r.x, r.h, r.w));
    rects
}

/// Step 4: pixel-space bounding rectangles, pairwise disjoint.
pub fn bounding_rects(components: &[Component], mb_size: u32) -> Vec<Rect> {
    let cell_rects = component_cell_rects(components);
    merge_overlapping(cell_rects.into_iter().map(|r| scale_rect(r, mb_size)).collect())
}

fn rect_mask(cols: usize, rows: usize, rects: &[Rect], mb_size: u32) -> BitMask {
    let mut mask = BitMask::new(cols, rows);
    for rect in rects {
        let (x0, y0) = ((rect.x / mb_size) as usize, (rect.y / mb_size) as usize);
        let (x1, y1) = (
            rect.right().div_ceil(mb_size) as usize,
            rect.bottom().div_ceil(mb_size) as usize,
        );
        for r in y0..y1.min(rows) {
            for c in x0..x1.min(cols) {
                mask.set(r, c, true);
            }
        }
    }
    mask
}

/// Per-step masks of one extraction, for inspection and golden files.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionStages {
    pub motion: BitMask,
    pub filtered: BitMask,
    pub opened: BitMask,
    /// Per-component bounding rectangles before merging.
    pub rectangularized: BitMask,
    /// Final RoI coverage.
    pub rois: BitMask,
    pub rects: Vec<Rect>,
}

impl ExtractionStages {
    pub fn masks(&self) -> [&BitMask; 5] {
        [&self.motion, &self.filtered, &self.opened, &self.rectangularized, &self.rois]
    }
}

fn check_inputs(frame: &FrameMeta, grid: &MvGrid, ctu: &CtuBitrateMap, bg: &BackgroundMask) -> Result<(), ExtractError> {
    if frame.kind.is_reference() {
        return Err(ExtractError::ReferenceFrame(frame.index));
    }
    if bg.mask().dims() != (grid.cols, grid.rows) {
        return Err(ExtractError::DimensionMismatch {
            mask: (grid.cols, grid.rows),
            background: bg.mask().dims(),
        });
    }
    let ctu_cover = (ctu.cols as u32 * ctu.ctu_size, ctu.rows as u32 * ctu.ctu_size);
    if ctu_cover.0 < frame.width_px || ctu_cover.1 < frame.height_px || ctu.bits.len() != ctu.cols * ctu.rows {
        return Err(ExtractError::CtuMismatch {
            ctu: (ctu.cols, ctu.rows),
            width: frame.width_px,
            height: frame.height_px,
        });
    }
    Ok(())
}

/// Runs steps 1 to 4 and keeps every intermediate mask.
pub fn extract_stages(
    frame: &FrameMeta,
    grid: &MvGrid,
    ctu: &CtuBitrateMap,
    bg: &BackgroundMask,
    params: ExtractParams,
) -> Result<ExtractionStages, ExtractError> {
    check_inputs(frame, grid, ctu, bg)?;
    let motion = motion_mask(grid);
    let filtered = filter_background(&motion, bg)?;
    let opened = opening(&filtered, params.radius);
    let components = connected_components(&opened);
    let cell_rects = component_cell_rects(&components);
    let rectangularized = rect_mask(grid.cols, grid.rows, &cell_rects, 1);
    let rects = merge_overlapping(cell_rects.into_iter().map(|r| scale_rect(r, grid.mb_size)).collect());
    let rois = rect_mask(grid.cols, grid.rows, &rects, grid.mb_size);
    Ok(ExtractionStages {
        motion,
        filtered,
        opened,
        rectangularized,
        rois,
        rects,
    })
}

/// Full extraction for one non-reference frame. RoIs are ordered by `(y, x)`.
pub fn extract_rois(
    frame: &FrameMeta,
    grid: &MvGrid,
    ctu: &CtuBitrateMap,
    bg: &BackgroundMask,
    params: ExtractParams,
) -> Result<Vec<Roi>, ExtractError> {
    let stages = extract_stages(frame, grid, ctu, bg, params)?;
    Ok(stages
        .rects
        .into_iter()
        .enumerate()
        .map(|(i, rect)| Roi {
            frame: frame.index,
            index: i as u32,
            rect,
            avg_bitrate_kbps: avg_ctu_bitrate(&rect, ctu),
            source: RoiSource::Motion,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Rect,
    pub class: u32,
}

/// Keeps the reference-frame detections that no RoI will re-detect: those
/// with IoU below [`STATIC_TRANSFER_IOU`] against every RoI and not lying
/// wholly inside one.
pub fn transfer_static_detections(ref_detections: &[Detection], rois: &[Roi]) -> Vec<Detection> {
    ref_detections
        .iter()
        .filter(|d| {
            rois.iter()
                .all(|roi| d.rect.iou(&roi.rect) < STATIC_TRANSFER_IOU && !roi.rect.contains(&d.rect))
        })
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_model::{FrameKind, MotionVector};

    fn mask_from(rows: &[&str]) -> BitMask {
        let cols = rows[0].len();
        BitMask::from_fn(cols, rows.len(), |r, c| rows[r].as_bytes()[c] == b'#')
    }

    fn block(cols: usize, rows: usize, r0: usize, c0: usize, h: usize, w: usize) -> BitMask {
        BitMask::from_fn(cols, rows, |r, c| (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c))
    }

    // Direct neighbourhood predicate, independent of the separable filter.
    fn naive(mask: &BitMask, radius: usize, all: bool) -> BitMask {
        let (cols, rows) = mask.dims();
        BitMask::from_fn(cols, rows, |r, c| {
            let mut vals = Vec::new();
            for nr in r.saturating_sub(radius)..=(r + radius).min(rows - 1) {
                for nc in c.saturating_sub(radius)..=(c + radius).min(cols - 1) {
                    vals.push(mask.get(nr, nc));
                }
            }
            if all {
                vals.iter().all(|&v| v)
            } else {
                vals.iter().any(|&v| v)
            }
        })
    }

    #[test]
    fn motion_mask_marks_nonzero() {
        let mut grid = MvGrid::zeros(8, 6, 16);
        assert!(motion_mask(&grid).is_empty());
        grid.set(3, 4, MotionVector::new(1, 0));
        let m = motion_mask(&grid);
        assert_eq!(m.popcount(), 1);
        assert!(m.get(3, 4));
    }

    #[test]
    fn background_filter_cases() {
        let m = mask_from(&["#.#..", ".#...", "#...#"]);
        let all = BackgroundMask::all_keep(5, 3);
        assert_eq!(filter_background(&m, &all).unwrap(), m);
        let none = BackgroundMask(BitMask::new(5, 3));
        assert!(filter_background(&m, &none).unwrap().is_empty());
        let partial = BackgroundMask(mask_from(&["###..", ".....", "....#"]));
        assert_eq!(filter_background(&m, &partial).unwrap().popcount(), 3);
        let wrong = BackgroundMask::all_keep(4, 3);
        assert!(matches!(
            filter_background(&m, &wrong),
            Err(ExtractError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn erode_cases() {
        let m = block(9, 9, 2, 2, 5, 5);
        assert_eq!(erode(&m, 0), m);
        assert_eq!(erode(&m, 1), block(9, 9, 3, 3, 3, 3));
        let single = block(9, 9, 4, 4, 1, 1);
        assert!(erode(&single, 1).is_empty());
    }

    #[test]
    fn dilate_cases() {
        let single = block(11, 11, 5, 5, 1, 1);
        assert_eq!(dilate(&single, 0), single);
        assert_eq!(dilate(&single, 1), block(11, 11, 4, 4, 3, 3));
        let mut two = BitMask::new(11, 11);
        two.set(5, 4, true);
        two.set(5, 6, true);
        assert_eq!(dilate(&two, 1), block(11, 11, 4, 3, 3, 5));
    }

    #[test]
    fn separable_filter_matches_naive() {
        let m = mask_from(&[
            "##..#...##",
            "###.##..#.",
            ".####.....",
            "..###..###",
            "#...#..###",
            "#.....####",
        ]);
        for radius in 0..4 {
            assert_eq!(erode(&m, radius), naive(&m, radius, true), "erode r={radius}");
            assert_eq!(dilate(&m, radius), naive(&m, radius, false), "dilate r={radius}");
        }
    }

    #[test]
    fn opening_cases() {
        let noise = mask_from(&["#...#...", "......#.", "..#.....", ".....#..", "#......#"]);
        assert!(opening(&noise, 1).is_empty());
        let solid = block(10, 10, 2, 2, 6, 6);
        assert_eq!(opening(&solid, 1), solid);
        assert!(opening(&BitMask::new(10, 10), 1).is_empty());
    }

    #[test]
    fn border_block_survives_opening() {
        let corner = block(10, 10, 0, 0, 4, 4);
        assert_eq!(opening(&corner, 1), corner);
    }

    #[test]
    fn component_cases() {
        assert!(connected_components(&BitMask::new(5, 5)).is_empty());
        let diag = mask_from(&["#..", ".#.", "..."]);
        assert_eq!(connected_components(&diag), vec![vec![(0, 0), (1, 1)]]);
        let three = mask_from(&[
            "##...##...",
            "##...##...",
            "..........",
            "..........",
            "....###...",
        ]);
        let comps = connected_components(&three);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0][0], (0, 0));
        assert_eq!(comps[1][0], (0, 5));
        assert_eq!(comps[2][0], (4, 4));
    }

    #[test]
    fn bounding_rect_cases() {
        assert_eq!(bounding_rects(&[vec![(0, 0)]], 16), vec![Rect::new(0, 0, 16, 16)]);
        let l_shape = vec![(0, 0), (1, 0), (1, 1)];
        assert_eq!(bounding_rects(&[l_shape], 16), vec![Rect::new(0, 0, 32, 32)]);
        // An L around a separate cell: the rects overlap and merge.
        let l_big = vec![(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)];
        let inner = vec![(0, 2)];
        assert_eq!(bounding_rects(&[l_big, inner], 16), vec![Rect::new(0, 0, 48, 48)]);
    }

    #[test]
    fn merge_reaches_fixpoint() {
        // a and c only overlap after a and b merge.
        let a = Rect::new(0, 0, 10, 10);
        let b = Rect::new(5, 5, 10, 10);
        let c = Rect::new(14, 0, 4, 4);
        let d = Rect::new(40, 40, 2, 2);
        let merged = merge_overlapping(vec![c, d, a, b]);
        assert_eq!(merged, vec![Rect::new(0, 0, 18, 15), d]);
    }

    #[test]
    fn touching_rects_stay_separate() {
        let a = Rect::new(0, 0, 16, 16);
        let b = Rect::new(16, 0, 16, 16);
        assert_eq!(merge_overlapping(vec![b, a]), vec![a, b]);
    }

    fn p_frame(cols: usize, rows: usize) -> (FrameMeta, MvGrid, CtuBitrateMap) {
        let meta = FrameMeta {
            index: 1,
            kind: FrameKind::P,
            width_px: cols as u32 * 16,
            height_px: rows as u32 * 16,
            timestamp: 0.0,
        };
        let (cc, cr) = crate::trace_model::ctu_dims(meta.width_px, meta.height_px, 64);
        let ctu = CtuBitrateMap {
            ctu_size: 64,
            cols: cc,
            rows: cr,
            bits: vec![400.0; cc * cr],
            fps: 30.0,
        };
        (meta, MvGrid::zeros(cols, rows, 16), ctu)
    }

    #[test]
    fn extract_all_zero_is_empty() {
        let (meta, grid, ctu) = p_frame(20, 12);
        let bg = BackgroundMask::all_keep(20, 12);
        assert!(extract_rois(&meta, &grid, &ctu, &bg, ExtractParams::default()).unwrap().is_empty());
    }

    #[test]
    fn extract_rejects_reference_frame() {
        let (mut meta, grid, ctu) = p_frame(20, 12);
        meta.kind = FrameKind::I;
        let bg = BackgroundMask::all_keep(20, 12);
        assert_eq!(
            extract_rois(&meta, &grid, &ctu, &bg, ExtractParams::default()),
            Err(ExtractError::ReferenceFrame(1))
        );
    }

    #[test]
    fn extract_orders_by_position() {
        let (meta, mut grid, ctu) = p_frame(20, 12);
        for r in 6..10 {
            for c in 1..5 {
                grid.set(r, c, MotionVector::new(2, 0));
            }
        }
        for r in 1..4 {
            for c in 12..17 {
                grid.set(r, c, MotionVector::new(-3, 1));
            }
        }
        let bg = BackgroundMask::all_keep(20, 12);
        let rois = extract_rois(&meta, &grid, &ctu, &bg, ExtractParams::default()).unwrap();
        assert_eq!(rois.len(), 2);
        assert_eq!(rois[0].rect, Rect::new(12 * 16, 16, 5 * 16, 3 * 16));
        assert_eq!(rois[1].rect, Rect::new(16, 6 * 16, 4 * 16, 4 * 16));
        assert_eq!(rois[0].index, 0);
        assert_eq!(rois[1].index, 1);
        assert!((rois[0].avg_bitrate_kbps - 12.0).abs() < 1e-12);
    }

    #[test]
    fn stages_expose_five_masks() {
        let (meta, mut grid, ctu) = p_frame(20, 12);
        for r in 2..6 {
            for c in 2..7 {
                grid.set(r, c, MotionVector::new(1, 0));
            }
        }
        grid.set(10, 18, MotionVector::new(1, 1));
        let bg = BackgroundMask::all_keep(20, 12);
        let stages = extract_stages(&meta, &grid, &ctu, &bg, ExtractParams::default()).unwrap();
        assert_eq!(stages.motion.popcount(), 21);
        assert_eq!(stages.opened.popcount(), 20);
        assert_eq!(stages.rois, stages.opened);
        assert_eq!(stages.masks().len(), 5);
    }

    fn roi(rect: Rect) -> Roi {
        Roi {
            frame: 3,
            index: 0,
            rect,
            avg_bitrate_kbps: 0.0,
            source: RoiSource::Motion,
        }
    }

    #[test]
    fn static_transfer_cases() {
        let dets = vec![
            Detection { rect: Rect::new(0, 0, 20, 10), class: 1 },
            Detection { rect: Rect::new(200, 200, 10, 10), class: 2 },
        ];
        assert_eq!(transfer_static_detections(&dets, &[]), dets);

        let enclosing = roi(Rect::new(190, 190, 40, 40));
        assert_eq!(transfer_static_detections(&dets, &[enclosing]), vec![dets[0].clone()]);

        // Intersection 100, union 200 + 400 - 100 = 500: IoU 0.2 keeps it.
        let half = roi(Rect::new(10, 0, 40, 10));
        assert!((dets[0].rect.iou(&half.rect) - 0.2).abs() < 1e-12);
        assert_eq!(transfer_static_detections(&dets[..1], &[half]), vec![dets[0].clone()]);

        let same = roi(Rect::new(0, 0, 20, 10));
        assert!(transfer_static_detections(&dets[..1], &[same]).is_empty());
    }

    #[test]
    fn rect_geometry() {
        let a = Rect::new(0, 0, 10, 10);
        let b = Rect::new(5, 5, 10, 10);
        assert_eq!(a.intersection(&b), Some(Rect::new(5, 5, 5, 5)));
        assert_eq!(a.union(&b), Rect::new(0, 0, 15, 15));
        assert!((a.iou(&b) - 25.0 / 175.0).abs() < 1e-12);
        assert!(!a.overlaps(&Rect::new(10, 0, 5, 5)));
        assert!(a.contains(&Rect::new(2, 2, 8, 8)));
        assert!(!a.contains(&b));
    }
}
