//! Scene-level diagnostics: zoom-in ratio per size class, round-trip IoU,
//! Jacobian distortion statistics, and the serialized scene report.

use serde::{Deserialize, Serialize};

use crate::box_transform::{build_inverse_index, iou_lower_bound, roundtrip, InverseIndex};
use crate::geometry::{GridDims, SamplingGrid};
use crate::offset_solver::TracePoint;
use crate::warp::jacobian_field;
use crate::zoom_objective::{rasterize_box_mask, zoom_ratio, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];
}

/// Pixel-area thresholds: small below `small_max`, medium below `medium_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeClasses {
    pub small_max: f64,
    pub medium_max: f64,
}

impl Default for SizeClasses {
    fn default() -> Self {
        Self {
            small_max: 32.0 * 32.0,
            medium_max: 96.0 * 96.0,
        }
    }
}

impl SizeClasses {
    pub fn is_valid(&self) -> bool {
        self.small_max > 0.0 && self.medium_max > self.small_max
    }

    pub fn classify_area(&self, pixel_area: f64) -> SizeClass {
        if pixel_area < self.small_max {
            SizeClass::Small
        } else if pixel_area < self.medium_max {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    /// Class of a normalized box measured at resolution `dims`.
    pub fn classify(&self, bbox: &BBox, dims: GridDims) -> SizeClass {
        self.classify_area(bbox.area() * (dims.width() * dims.height()) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassZr {
    pub class: SizeClass,
    /// `None` when no unsnapped box of this class exists.
    pub mean: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZrSummary {
    pub per_box: Vec<f64>,
    pub classes: Vec<ClassZr>,
    /// Boxes excluded because a corner was boundary-snapped.
    pub snapped: usize,
}

impl ZrSummary {
    pub fn mean(&self, class: SizeClass) -> Option<f64> {
        self.classes.iter().find(|c| c.class == class).and_then(|c| c.mean)
    }
}

fn class_means(items: impl Iterator<Item = (SizeClass, f64)>) -> Vec<ClassZr> {
    let mut acc = [(0.0, 0usize); 3];
    for (class, v) in items {
        let slot = &mut acc[class as usize];
        slot.0 += v;
        slot.1 += 1;
    }
    SizeClass::ALL
        .iter()
        .map(|&class| {
            let (sum, count) = acc[class as usize];
            ClassZr {
                class,
                mean: (count > 0).then(|| sum / count as f64),
                count,
            }
        })
        .collect()
}

/// Zoom-in ratio: forward-transformed box area over original box area,
/// averaged per size class. Size classes use the grid resolution.
pub fn compute_zr(boxes: &[BBox], grid: &SamplingGrid, classes: &SizeClasses) -> ZrSummary {
    let index = build_inverse_index(grid);
    compute_zr_indexed(boxes, grid, &index, classes)
}

pub fn compute_zr_indexed(
    boxes: &[BBox],
    grid: &SamplingGrid,
    index: &InverseIndex,
    classes: &SizeClasses,
) -> ZrSummary {
    let dims = grid.dims();
    let mut per_box = Vec::with_capacity(boxes.len());
    let mut kept = Vec::new();
    let mut snapped = 0;
    for b in boxes {
        let f = crate::box_transform::forward_box_transform(b, index);
        let zr = f.bbox.area() / b.area();
        per_box.push(zr);
        if f.boundary_snapped {
            snapped += 1;
        } else {
            kept.push((classes.classify(b, dims), zr));
        }
    }
    ZrSummary {
        per_box,
        classes: class_means(kept.into_iter()),
        snapped,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub count: usize,
}

impl Moments {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            variance,
            count: values.len(),
        })
    }
}

/// Jacobian determinant statistics over output nodes whose sample falls
/// inside some box versus all other nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionStats {
    pub inside: Option<Moments>,
    pub outside: Option<Moments>,
}

pub fn distortion_stats(grid: &SamplingGrid, boxes: &[BBox]) -> DistortionStats {
    let det = jacobian_field(grid).det();
    let dims = grid.dims();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for i in 0..dims.height() {
        for j in 0..dims.width() {
            let p = grid.at(i, j);
            let hit = boxes
                .iter()
                .any(|b| p.x >= b.c1().x && p.x <= b.c2().x && p.y >= b.c1().y && p.y <= b.c2().y);
            if hit {
                inside.push(det.get(i, j));
            } else {
                outside.push(det.get(i, j));
            }
        }
    }
    DistortionStats {
        inside: Moments::of(&inside),
        outside: Moments::of(&outside),
    }
}

/// Shape of a sampling grid: Jacobian determinant range, nodes where it is
/// not positive (folds or clamped collapse), and the largest displacement
/// from the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub det_min: f64,
    pub det_max: f64,
    pub nonpositive_det: usize,
    pub max_displacement: f64,
}

impl GridSummary {
    pub fn of(grid: &SamplingGrid) -> Self {
        let det = jacobian_field(grid).det();
        let dims = grid.dims();
        let mut max_displacement: f64 = 0.0;
        for i in 0..dims.height() {
            for j in 0..dims.width() {
                let p = grid.at(i, j);
                max_displacement = max_displacement.max(p.dist(dims.node_coord(i, j)));
            }
        }
        let vals = det.as_slice();
        Self {
            det_min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
            det_max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            nonpositive_det: vals.iter().filter(|&&d| d <= 0.0).count(),
            max_displacement,
        }
    }
}

/// Everything measured for one box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<u64>,
    pub size_class: SizeClass,
    pub original: BBox,
    pub zoomed: BBox,
    /// Mask-mass ratio `sum(a') / sum(a)`.
    pub zoom_ratio: f64,
    /// Box-area ratio after forward transformation.
    pub zr: f64,
    pub roundtrip_iou: f64,
    /// Largest corner displacement over the round trip.
    pub tau: f64,
    pub iou_bound: f64,
    pub boundary_snapped: bool,
    pub degenerate: bool,
}

/// Per-box records for a scene under `grid`. `categories`, when given, is
/// parallel to `boxes`.
pub fn box_records(
    boxes: &[BBox],
    categories: Option<&[u64]>,
    grid: &SamplingGrid,
    classes: &SizeClasses,
) -> Vec<BoxRecord> {
    let dims = grid.dims();
    let index = build_inverse_index(grid);
    boxes
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let rt = roundtrip(b, grid, &index);
            let m = rasterize_box_mask(b, dims)
                .and_then(|mask| zoom_ratio(&mask, grid))
                .unwrap_or(0.0);
            BoxRecord {
                index: k,
                category: categories.and_then(|c| c.get(k).copied()),
                size_class: classes.classify(b, dims),
                original: *b,
                zoomed: rt.forward.bbox,
                zoom_ratio: m,
                zr: rt.forward.bbox.area() / b.area(),
                roundtrip_iou: rt.iou,
                tau: rt.tau,
                iou_bound: iou_lower_bound(b.width(), b.height(), rt.tau).exact,
                boundary_snapped: rt.forward.boundary_snapped,
                degenerate: rt.forward.degenerate,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub zr: Vec<ClassZr>,
    pub mean_iou: f64,
    pub min_iou: f64,
    pub mean_zoom_ratio: f64,
    pub snapped: usize,
    pub degenerate: usize,
}

impl Aggregates {
    /// `None` for a scene without boxes.
    pub fn from_records(records: &[BoxRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let n = records.len() as f64;
        Some(Self {
            zr: class_means(
                records
                    .iter()
                    .filter(|r| !r.boundary_snapped)
                    .map(|r| (r.size_class, r.zr)),
            ),
            mean_iou: records.iter().map(|r| r.roundtrip_iou).sum::<f64>() / n,
            min_iou: records.iter().map(|r| r.roundtrip_iou).fold(f64::INFINITY, f64::min),
            mean_zoom_ratio: records.iter().map(|r| r.zoom_ratio).sum::<f64>() / n,
            snapped: records.iter().filter(|r| r.boundary_snapped).count(),
            degenerate: records.iter().filter(|r| r.degenerate).count(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_mean_ratio: f64,
    pub final_mean_ratio: f64,
    /// Largest objective increase between iterates `window` steps apart.
    pub max_window_increase: f64,
    pub window: usize,
}

impl TraceSummary {
    pub const WINDOW: usize = 20;

    pub fn from_trace(trace: &[TracePoint]) -> Option<Self> {
        let (first, last) = (trace.first()?, trace.last()?);
        Some(Self {
            iterations: last.iteration,
            initial_objective: first.objective,
            final_objective: last.objective,
            initial_mean_ratio: first.mean_ratio,
            final_mean_ratio: last.mean_ratio,
            max_window_increase: max_window_increase(trace, Self::WINDOW),
            window: Self::WINDOW,
        })
    }
}

/// Largest `objective[k + window] - objective[k]`, or 0 if none is positive.
pub fn max_window_increase(trace: &[TracePoint], window: usize) -> f64 {
    trace
        .windows(window + 1)
        .map(|w| w[window].objective - w[0].objective)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    Offset,
    Saliency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub scene_id: u64,
    pub parametrization: Parametrization,
    pub dims: GridDims,
    pub boxes: Vec<BoxRecord>,
    pub aggregates: Option<Aggregates>,
    pub trace: Option<TraceSummary>,
    pub grid: GridSummary,
    pub distortion: DistortionStats,
}

impl SceneReport {
    pub fn new(
        scene_id: u64,
        parametrization: Parametrization,
        grid: &SamplingGrid,
        boxes: Vec<BoxRecord>,
        trace: Option<&[TracePoint]>,
    ) -> Self {
        let originals: Vec<BBox> = boxes.iter().map(|r| r.original).collect();
        Self {
            scene_id,
            parametrization,
            dims: grid.dims(),
            aggregates: Aggregates::from_records(&boxes),
            trace: trace.and_then(TraceSummary::from_trace),
            grid: GridSummary::of(grid),
            distortion: distortion_stats(grid, &originals),
            boxes,
        }
    }
}

/// Pretty JSON with fields in declaration order.
pub fn emit_report<T: Serialize>(report: &T) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report types serialize");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> serde_json::Result<SceneReport> {
    serde_json::from_str(text)
}
