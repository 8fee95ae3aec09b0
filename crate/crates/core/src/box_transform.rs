//! Corner-aligned box transformation between original and zoomed space.
//!
//! The sampling grid is a lookup table from output nodes `(x, y)` to
//! original-space points `(u, v)`. Boxes go forward by snapping each corner
//! to its nearest sampled point and taking that node's output coordinate;
//! they come back by bilinearly interpolating the grid at the corner.

use serde::{Deserialize, Serialize};

use crate::geometry::{GridDims, NormCoord, SamplingGrid};
use crate::zoom_objective::{BBox, Space};

/// Nearest-neighbour index over the original-space points of a grid,
/// bucketed on a uniform grid over their bounding box.
#[derive(Debug, Clone)]
pub struct InverseIndex {
    dims: GridDims,
    points: Vec<NormCoord>,
    min: NormCoord,
    max: NormCoord,
    cell: (f64, f64),
    buckets: (usize, usize),
    /// Bucket `b` holds `order[start[b]..start[b + 1]]`, ascending node index.
    start: Vec<usize>,
    order: Vec<u32>,
}

/// Result of a nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    /// Row-major node index.
    pub node: usize,
    pub dist_sq: f64,
}

impl InverseIndex {
    pub fn build(grid: &SamplingGrid) -> Self {
        let dims = grid.dims();
        let points: Vec<NormCoord> = (0..dims.height())
            .flat_map(|i| (0..dims.width()).map(move |j| (i, j)))
            .map(|(i, j)| grid.at(i, j))
            .collect();
        let (mut min, mut max) = (points[0], points[0]);
        for p in &points {
            min = NormCoord::new(min.x.min(p.x), min.y.min(p.y));
            max = NormCoord::new(max.x.max(p.x), max.y.max(p.y));
        }
        // About one point per bucket for a well-spread grid.
        let side = (points.len() as f64).sqrt().ceil() as usize;
        let extent = |lo: f64, hi: f64| (hi - lo).max(1e-12);
        let (ex, ey) = (extent(min.x, max.x), extent(min.y, max.y));
        let aspect = (ex / ey).clamp(1e-3, 1e3);
        let bx = ((side as f64 * aspect.sqrt()).round() as usize).clamp(1, 4096);
        let by = ((side as f64 / aspect.sqrt()).round() as usize).clamp(1, 4096);
        let cell = (ex / bx as f64, ey / by as f64);

        let mut index = Self {
            dims,
            points,
            min,
            max,
            cell,
            buckets: (by, bx),
            start: Vec::new(),
            order: Vec::new(),
        };
        let ids: Vec<usize> = index.points.iter().map(|&p| index.bucket_of(p)).collect();
        let mut counts = vec![0usize; bx * by + 1];
        for &b in &ids {
            counts[b + 1] += 1;
        }
        for b in 0..bx * by {
            counts[b + 1] += counts[b];
        }
        let mut fill = counts.clone();
        let mut order = vec![0u32; ids.len()];
        for (node, &b) in ids.iter().enumerate() {
            order[fill[b]] = node as u32;
            fill[b] += 1;
        }
        index.start = counts;
        index.order = order;
        index
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn points(&self) -> &[NormCoord] {
        &self.points
    }

    /// Bounding box of all sampled points.
    pub fn sampled_range(&self) -> (NormCoord, NormCoord) {
        (self.min, self.max)
    }

    fn bucket_coords(&self, p: NormCoord) -> (usize, usize) {
        let (by, bx) = self.buckets;
        let cx = ((p.x - self.min.x) / self.cell.0).floor();
        let cy = ((p.y - self.min.y) / self.cell.1).floor();
        let cx = if cx.is_nan() { 0.0 } else { cx.clamp(0.0, (bx - 1) as f64) };
        let cy = if cy.is_nan() { 0.0 } else { cy.clamp(0.0, (by - 1) as f64) };
        (cy as usize, cx as usize)
    }

    fn bucket_of(&self, p: NormCoord) -> usize {
        let (r, c) = self.bucket_coords(p);
        r * self.buckets.1 + c
    }

    /// Nearest sampled point; ties go to the lowest row-major node index.
    pub fn nearest(&self, q: NormCoord) -> Neighbor {
        let (by, bx) = self.buckets;
        // Distances from the projection of q onto the bucketed rectangle
        // never exceed distances from q, so bounds computed there are safe.
        let qc = NormCoord::new(q.x.clamp(self.min.x, self.max.x), q.y.clamp(self.min.y, self.max.y));
        let (r0, c0) = self.bucket_coords(qc);
        let mut best = Neighbor {
            node: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        let max_ring = by.max(bx);
        for ring in 0..=max_ring {
            let (rlo, rhi) = (r0 as isize - ring as isize, r0 + ring);
            let (clo, chi) = (c0 as isize - ring as isize, c0 + ring);
            for r in rlo.max(0) as usize..=rhi.min(by - 1) {
                let on_edge_row = r as isize == rlo || r == rhi;
                for c in clo.max(0) as usize..=chi.min(bx - 1) {
                    if !on_edge_row && c as isize != clo && c != chi {
                        continue;
                    }
                    let b = r * bx + c;
                    for &node in &self.order[self.start[b]..self.start[b + 1]] {
                        let p = self.points[node as usize];
                        let d = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y);
                        let node = node as usize;
                        if d < best.dist_sq || (d == best.dist_sq && node < best.node) {
                            best = Neighbor { node, dist_sq: d };
                        }
                    }
                }
            }
            if best.node != usize::MAX {
                // Anything outside the examined block is at least this far
                // from qc; sides on the domain boundary have nothing beyond.
                let mut bound = f64::INFINITY;
                if rlo > 0 {
                    bound = bound.min(qc.y - (self.min.y + rlo as f64 * self.cell.1));
                }
                if rhi + 1 < by {
                    bound = bound.min(self.min.y + (rhi + 1) as f64 * self.cell.1 - qc.y);
                }
                if clo > 0 {
                    bound = bound.min(qc.x - (self.min.x + clo as f64 * self.cell.0));
                }
                if chi + 1 < bx {
                    bound = bound.min(self.min.x + (chi + 1) as f64 * self.cell.0 - qc.x);
                }
                if bound == f64::INFINITY {
                    break;
                }
                let bound = bound.max(0.0);
                if best.dist_sq < bound * bound * (1.0 - 1e-9) {
                    break;
                }
            }
        }
        best
    }

    /// Exhaustive scan with the same tie rule; the reference for [`nearest`](Self::nearest).
    pub fn nearest_brute_force(&self, q: NormCoord) -> Neighbor {
        let mut best = Neighbor {
            node: usize::MAX,
            dist_sq: f64::INFINITY,
        };
        for (node, p) in self.points.iter().enumerate() {
            let d = (p.x - q.x) * (p.x - q.x) + (p.y - q.y) * (p.y - q.y);
            if d < best.dist_sq {
                best = Neighbor { node, dist_sq: d };
            }
        }
        best
    }

    /// Output-space coordinate of a node.
    pub fn node_coord(&self, node: usize) -> NormCoord {
        let w = self.dims.width();
        self.dims.node_coord(node / w, node % w)
    }
}

pub fn build_inverse_index(grid: &SamplingGrid) -> InverseIndex {
    InverseIndex::build(grid)
}

/// Forward-transformed box plus what happened along the way.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardBox {
    pub bbox: BBox,
    /// Corners had to be reordered or the box widened to keep a positive area.
    pub degenerate: bool,
    /// A corner lies outside the range the grid samples, so its nearest
    /// neighbour sits on the edge of that range.
    pub boundary_snapped: bool,
}

/// Sort two values and, if equal, widen them to `spacing` inside `[0, 1]`.
fn order_axis(a: f64, b: f64, spacing: f64) -> (f64, f64, bool) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi > lo {
        return (lo, hi, a > b);
    }
    let hi = (lo + spacing).min(1.0);
    (hi - spacing, hi, true)
}

/// Map a box from original to zoomed space through nearest-neighbour lookup.
pub fn forward_box_transform(bbox: &BBox, index: &InverseIndex) -> ForwardBox {
    let (lo, hi) = index.sampled_range();
    let outside = |c: NormCoord| c.x < lo.x || c.x > hi.x || c.y < lo.y || c.y > hi.y;
    let c1 = index.node_coord(index.nearest(bbox.c1()).node);
    let c2 = index.node_coord(index.nearest(bbox.c2()).node);
    let dims = index.dims();
    let (x1, x2, fx) = order_axis(c1.x, c2.x, dims.spacing_x());
    let (y1, y2, fy) = order_axis(c1.y, c2.y, dims.spacing_y());
    ForwardBox {
        bbox: BBox::from_coords(x1, y1, x2, y2, Space::Zoomed).expect("ordered corners inside [0, 1]"),
        degenerate: fx || fy,
        boundary_snapped: outside(bbox.c1()) || outside(bbox.c2()),
    }
}

/// Map a zoomed-space box back to original space by interpolating the grid.
pub fn backward_box_transform(bbox: &BBox, grid: &SamplingGrid) -> BBox {
    let p1 = grid.interpolate(bbox.c1()).clamped();
    let p2 = grid.interpolate(bbox.c2()).clamped();
    let (x1, x2, _) = order_axis(p1.x, p2.x, grid.dims().spacing_x());
    let (y1, y2, _) = order_axis(p1.y, p2.y, grid.dims().spacing_y());
    BBox::from_coords(x1, y1, x2, y2, Space::Original).expect("ordered corners inside [0, 1]")
}

/// Outcome of sending a box forward and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub forward: ForwardBox,
    pub back: BBox,
    pub iou: f64,
    /// Largest Euclidean displacement of the two corners.
    pub tau: f64,
}

pub fn roundtrip(bbox: &BBox, grid: &SamplingGrid, index: &InverseIndex) -> RoundTrip {
    let forward = forward_box_transform(bbox, index);
    let back = backward_box_transform(&forward.bbox, grid);
    RoundTrip {
        forward,
        back,
        iou: bbox.iou(&back),
        tau: bbox.c1().dist(back.c1()).max(bbox.c2().dist(back.c2())),
    }
}

pub fn roundtrip_iou(bbox: &BBox, grid: &SamplingGrid, index: &InverseIndex) -> f64 {
    roundtrip(bbox, grid, index).iou
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouBound {
    pub exact: f64,
    pub approx: f64,
    /// `tau` was large enough for the exact bound to reach zero.
    pub saturated: bool,
}

/// Worst-case IoU of a `w x h` box whose corners move by at most `tau`:
/// `(wh - tau*r) / (wh + tau*r)` with `r = sqrt(w^2 + h^2)`, and its
/// small-displacement form `1 - 2 tau sqrt(1/w^2 + 1/h^2)`.
pub fn iou_lower_bound(w: f64, h: f64, tau: f64) -> IouBound {
    let wh = w * h;
    let r = w.hypot(h);
    let exact = (wh - tau * r) / (wh + tau * r);
    let approx = 1.0 - 2.0 * tau * (1.0 / (w * w) + 1.0 / (h * h)).sqrt();
    IouBound {
        exact: exact.max(0.0),
        approx,
        saturated: exact <= 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_uniform_grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, w: usize) -> GridDims {
        GridDims::new(h, w).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_coords(x1, y1, x2, y2, Space::Original).unwrap()
    }

    fn zoom_grid(d: GridDims) -> SamplingGrid {
        SamplingGrid::from_fn(d, |x, y| (0.25 + 0.5 * x, 0.25 + 0.5 * y)).unwrap()
    }

    #[test]
    fn identity_query_returns_nearest_node() {
        let d = dims(11, 21);
        let idx = build_inverse_index(&make_uniform_grid(d));
        let n = idx.nearest(NormCoord::new(0.26, 0.71));
        assert_eq!(n.node, d.index(7, 5));
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let d = dims(rng.random_range(2..30), rng.random_range(2..30));
            let grid = SamplingGrid::from_fn(d, |x, y| {
                if trial % 3 == 0 {
                    (x, y)
                } else {
                    ((x + 0.1 * (7.0 * y).sin()).clamp(0.0, 1.0), (y * y).clamp(0.0, 1.0))
                }
            })
            .unwrap();
            let idx = build_inverse_index(&grid);
            for _ in 0..500 {
                let q = NormCoord::new(rng.random_range(-0.2..1.2), rng.random_range(-0.2..1.2));
                assert_eq!(idx.nearest(q), idx.nearest_brute_force(q));
            }
        }
    }

    #[test]
    fn fold_ties_go_to_lowest_index() {
        let d = dims(6, 6);
        let grid = SamplingGrid::from_fn(d, |x, y| if x > 0.3 && y > 0.3 { (0.5, 0.5) } else { (x, y) }).unwrap();
        let idx = build_inverse_index(&grid);
        let n = idx.nearest(NormCoord::new(0.5, 0.5));
        assert_eq!(n.node, d.index(2, 2));
        assert_eq!(n.dist_sq, 0.0);
    }

    #[test]
    fn identity_forward_quantizes_within_one_node() {
        let d = dims(33, 33);
        let grid = make_uniform_grid(d);
        let idx = build_inverse_index(&grid);
        let b = bx(0.2, 0.31, 0.47, 0.52);
        let f = forward_box_transform(&b, &idx);
        assert_eq!(f.bbox.space(), Space::Zoomed);
        assert!(!f.degenerate && !f.boundary_snapped);
        assert!(f.bbox.c1().dist(b.c1()) <= d.spacing_x());
        assert!(f.bbox.c2().dist(b.c2()) <= d.spacing_x());
        let back = backward_box_transform(&f.bbox, &grid);
        assert_eq!(back, BBox::from_coords(f.bbox.c1().x, f.bbox.c1().y, f.bbox.c2().x, f.bbox.c2().y, Space::Original).unwrap());

        let aligned = bx(8.0 / 32.0, 4.0 / 32.0, 20.0 / 32.0, 9.0 / 32.0);
        assert_eq!(roundtrip_iou(&aligned, &grid, &idx), 1.0);
    }

    #[test]
    fn central_zoom_doubles_box_side() {
        let d = dims(101, 101);
        let grid = zoom_grid(d);
        let idx = build_inverse_index(&grid);
        let b = bx(0.45, 0.45, 0.55, 0.55);
        let f = forward_box_transform(&b, &idx);
        assert!((f.bbox.width() - 0.2).abs() <= 2.0 * d.spacing_x());
        assert!((f.bbox.height() - 0.2).abs() <= 2.0 * d.spacing_y());
        let back = backward_box_transform(&f.bbox, &grid);
        assert!(back.c1().dist(b.c1()) <= 0.5 * d.spacing_x() * 2f64.sqrt());
        assert!(back.c2().dist(b.c2()) <= 0.5 * d.spacing_x() * 2f64.sqrt());
    }

    #[test]
    fn corners_outside_sampled_range_are_flagged() {
        let d = dims(21, 21);
        let grid = zoom_grid(d);
        let idx = build_inverse_index(&grid);
        let f = forward_box_transform(&bx(0.05, 0.05, 0.5, 0.5), &idx);
        assert!(f.boundary_snapped);
        assert_eq!(f.bbox.c1(), NormCoord::new(0.0, 0.0));
    }

    #[test]
    fn collapsed_corners_are_widened() {
        let d = dims(11, 11);
        let grid = SamplingGrid::from_fn(d, |_, _| (0.5, 0.5)).unwrap();
        let idx = build_inverse_index(&grid);
        let f = forward_box_transform(&bx(0.4, 0.4, 0.6, 0.6), &idx);
        assert!(f.degenerate);
        assert!((f.bbox.width() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn backward_linear_field() {
        let d = dims(11, 11);
        let grid = SamplingGrid::from_fn(d, |x, y| ((x + 0.1).min(1.0), y)).unwrap();
        let b = BBox::from_coords(0.3, 0.2, 0.5, 0.6, Space::Zoomed).unwrap();
        let back = backward_box_transform(&b, &grid);
        assert!((back.c1().x - 0.4).abs() < 1e-12);
        assert!((back.c2().x - 0.6).abs() < 1e-12);
        assert_eq!(back.space(), Space::Original);
    }

    #[test]
    fn bound_spot_values() {
        let b = iou_lower_bound(0.3, 0.2, 0.0);
        assert_eq!((b.exact, b.approx), (1.0, 1.0));
        let b = iou_lower_bound(0.1, 0.1, 0.005);
        assert!((b.exact - 0.8679).abs() < 5e-5, "{}", b.exact);
        assert!((b.approx - 0.8586).abs() < 5e-5, "{}", b.approx);
        let b = iou_lower_bound(0.1, 0.1, 0.1);
        assert!(b.saturated);
        assert_eq!(b.exact, 0.0);
    }

    #[test]
    fn bound_grows_with_box_size() {
        let tau = 0.004;
        let mut prev = 0.0;
        for k in 1..50 {
            let w = 0.02 * k as f64;
            let e = iou_lower_bound(w, 0.1, tau).exact;
            assert!(e > prev);
            prev = e;
        }
        let (a, b) = (iou_lower_bound(0.1, 0.05, tau).exact, iou_lower_bound(0.1, 0.06, tau).exact);
        assert!(b > a);
    }
}
