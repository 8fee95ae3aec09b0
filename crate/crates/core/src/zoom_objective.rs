//! The object zooming loss.
//!
//! Every box is rasterized into a soft mask `a` over the original grid and
//! warped with the same mapping as the image, `a'(x, y) = a(u, v)`. Its
//! zooming ratio is `m = sum(a') / sum(a)` and the loss
//!
//! ```text
//! L = sum_i max(ln((alpha + eps) / (m_i + eps)), 0)^beta
//! ```
//!
//! pushes every box toward magnification `alpha`. Gradients flow back to the
//! offsets through the bilinear interpolation of `a`: with `(s, t)` the
//! fractional position inside the cell with corners `a11 a12 / a21 a22`,
//!
//! ```text
//! da'/du = (1 - t)(a12 - a11) + t(a22 - a21)
//! da'/dv = (1 - s)(a21 - a11) + s(a22 - a12)
//! ```
//!
//! in pixel units, and `du/d(dx) = dv/d(dy) = 1` away from clamped nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{
    apply_offsets, axis_cell, axis_sample, lerp, resample_weights, upsample_offsets, AxisSample, GridDims, NormCoord,
    OffsetField, SamplingGrid, ScalarField,
};
use crate::warp::warp_field;

/// Which coordinate system a box lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Original,
    Zoomed,
}

/// Axis-aligned box given by its upper-left and lower-right corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    c1: NormCoord,
    c2: NormCoord,
    space: Space,
}

impl BBox {
    pub fn new(c1: NormCoord, c2: NormCoord, space: Space) -> Result<Self> {
        let coords = [c1.x, c1.y, c2.x, c2.y];
        if coords.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::DegenerateBox(format!(
                "corners ({}, {})-({}, {}) leave [0, 1]",
                c1.x, c1.y, c2.x, c2.y
            )));
        }
        if c1.x >= c2.x || c1.y >= c2.y {
            return Err(Error::DegenerateBox(format!(
                "corners ({}, {})-({}, {}) do not span a positive area",
                c1.x, c1.y, c2.x, c2.y
            )));
        }
        Ok(Self { c1, c2, space })
    }

    pub fn from_coords(x1: f64, y1: f64, x2: f64, y2: f64, space: Space) -> Result<Self> {
        Self::new(NormCoord::new(x1, y1), NormCoord::new(x2, y2), space)
    }

    pub fn c1(&self) -> NormCoord {
        self.c1
    }

    pub fn c2(&self) -> NormCoord {
        self.c2
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn width(&self) -> f64 {
        self.c2.x - self.c1.x
    }

    pub fn height(&self) -> f64 {
        self.c2.y - self.c1.y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> NormCoord {
        NormCoord::new(0.5 * (self.c1.x + self.c2.x), 0.5 * (self.c1.y + self.c2.y))
    }

    /// Intersection over union; the space tags are not compared.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.c2.x.min(other.c2.x) - self.c1.x.max(other.c1.x)).max(0.0);
        let ih = (self.c2.y.min(other.c2.y) - self.c1.y.max(other.c1.y)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// Soft indicator of a box over a grid, plus the bounding rectangle of its
/// non-zero nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMask {
    values: ScalarField,
    rows: (usize, usize),
    cols: (usize, usize),
    sum: f64,
}

impl BoxMask {
    /// Wrap an arbitrary non-negative field as a mask.
    pub fn from_field(values: ScalarField) -> Result<Self> {
        let dims = values.dims();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for i in 0..dims.height() {
            for j in 0..dims.width() {
                let v = values.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::NonFinite("box mask"));
                }
                if v > 0.0 {
                    r0 = r0.min(i);
                    r1 = r1.max(i);
                    c0 = c0.min(j);
                    c1 = c1.max(j);
                }
            }
        }
        let sum = values.sum();
        if sum <= 0.0 {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            values,
            rows: (r0, r1),
            cols: (c0, c1),
            sum,
        })
    }

    pub fn values(&self) -> &ScalarField {
        &self.values
    }

    pub fn dims(&self) -> GridDims {
        self.values.dims()
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }

    fn misses(&self, sx_lo: usize, sx_hi: usize, sy_lo: usize, sy_hi: usize) -> bool {
        sx_hi < self.cols.0 || sx_lo > self.cols.1 || sy_hi < self.rows.0 || sy_lo > self.rows.1
    }

    /// Mask value at a normalized coordinate.
    pub fn sample(&self, at: NormCoord) -> f64 {
        let d = self.dims();
        self.sample_located(axis_sample(at.x, d.width()), axis_sample(at.y, d.height()))
    }

    fn sample_located(&self, sx: AxisSample, sy: AxisSample) -> f64 {
        if self.misses(sx.lo, sx.hi, sy.lo, sy.hi) {
            return 0.0;
        }
        let a = &self.values;
        let top = lerp(a.get(sy.lo, sx.lo), a.get(sy.lo, sx.hi), sx.frac);
        let bottom = lerp(a.get(sy.hi, sx.lo), a.get(sy.hi, sx.hi), sx.frac);
        lerp(top, bottom, sy.frac)
    }

    /// Partial derivatives of the sampled value with respect to the
    /// normalized coordinates `(u, v)`.
    pub fn sample_grad(&self, at: NormCoord) -> (f64, f64) {
        let d = self.dims();
        self.grad_located(axis_cell(at.x, d.width()), axis_cell(at.y, d.height()))
    }

    /// `sx`, `sy` must come from [`axis_cell`].
    fn grad_located(&self, sx: AxisSample, sy: AxisSample) -> (f64, f64) {
        if self.misses(sx.lo, sx.hi, sy.lo, sy.hi) {
            return (0.0, 0.0);
        }
        let d = self.dims();
        let a = &self.values;
        let (a11, a12) = (a.get(sy.lo, sx.lo), a.get(sy.lo, sx.hi));
        let (a21, a22) = (a.get(sy.hi, sx.lo), a.get(sy.hi, sx.hi));
        let (s, t) = (sx.frac, sy.frac);
        let da_du = (1.0 - t) * (a12 - a11) + t * (a22 - a21);
        let da_dv = (1.0 - s) * (a21 - a11) + s * (a22 - a12);
        (
            da_du * (d.width() - 1) as f64,
            da_dv * (d.height() - 1) as f64,
        )
    }
}

/// Fraction of node `k`'s cell (clipped to the grid) covered by the pixel
/// interval `[lo, hi]`.
fn coverage(k: usize, lo: f64, hi: f64, n: usize) -> f64 {
    let last = (n - 1) as f64;
    let a = (k as f64 - 0.5).max(0.0);
    let b = (k as f64 + 0.5).min(last);
    let overlap = (b.min(hi) - a.max(lo)).max(0.0);
    overlap / (b - a)
}

/// Rasterize a box with fractional coverage on its boundary nodes.
pub fn rasterize_box_mask(bbox: &BBox, dims: GridDims) -> Result<BoxMask> {
    let (sx, sy) = ((dims.width() - 1) as f64, (dims.height() - 1) as f64);
    let cx: Vec<f64> = (0..dims.width())
        .map(|j| coverage(j, bbox.c1.x * sx, bbox.c2.x * sx, dims.width()))
        .collect();
    let cy: Vec<f64> = (0..dims.height())
        .map(|i| coverage(i, bbox.c1.y * sy, bbox.c2.y * sy, dims.height()))
        .collect();
    let values = ScalarField::from_fn(dims, |i, j| cy[i] * cx[j]);
    BoxMask::from_field(values).map_err(|_| {
        Error::DegenerateBox(format!("box covers no area on a {dims} grid"))
    })
}

/// `sum(a') / sum(a)` with `a'` the mask warped through `grid`.
pub fn zoom_ratio(mask: &BoxMask, grid: &SamplingGrid) -> Result<f64> {
    let warped = warp_field(mask.values(), grid, Exec::default());
    Ok(warped.sum() / mask.sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZoomLossConfig {
    /// Magnification at and above which a box contributes no loss.
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// Weight of the squared-L2 penalty on the offsets.
    pub reg_weight: f64,
    /// Divide the box sum by the number of boxes.
    #[serde(default)]
    pub mean_reduction: bool,
}

impl Default for ZoomLossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            epsilon: 1e-6,
            reg_weight: 1e-4,
            mean_reduction: false,
        }
    }
}

impl ZoomLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.is_finite()
            && self.alpha > 0.0
            && self.beta.is_finite()
            && self.beta >= 1.0
            && self.epsilon.is_finite()
            && self.epsilon > 0.0
            && self.reg_weight.is_finite()
            && self.reg_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid zoom loss config {self:?}")))
        }
    }

    /// Loss contributed by a single box with ratio `m`.
    pub fn box_loss(&self, m: f64) -> f64 {
        let l = ((self.alpha + self.epsilon) / (m + self.epsilon)).ln();
        if l > 0.0 {
            l.powf(self.beta)
        } else {
            0.0
        }
    }

    /// `d box_loss / dm`.
    pub fn box_loss_slope(&self, m: f64) -> f64 {
        let l = ((self.alpha + self.epsilon) / (m + self.epsilon)).ln();
        if l > 0.0 {
            -self.beta * l.powf(self.beta - 1.0) / (m + self.epsilon)
        } else {
            0.0
        }
    }

    fn reduction(&self, boxes: usize) -> f64 {
        if self.mean_reduction && boxes > 0 {
            1.0 / boxes as f64
        } else {
            1.0
        }
    }
}

/// Total zoom loss over per-box ratios (natural logarithm).
pub fn zoom_loss(ratios: &[f64], cfg: &ZoomLossConfig) -> f64 {
    let total: f64 = ratios.iter().map(|&m| cfg.box_loss(m)).sum();
    total * cfg.reduction(ratios.len())
}

/// Gradient of the objective with respect to both offset channels.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    pub d_dx: ScalarField,
    pub d_dy: ScalarField,
}

impl GradField {
    pub fn zeros(dims: GridDims) -> Self {
        Self {
            d_dx: ScalarField::zeros(dims),
            d_dy: ScalarField::zeros(dims),
        }
    }

    pub fn dims(&self) -> GridDims {
        self.d_dx.dims()
    }

    pub fn max_abs(&self) -> f64 {
        self.d_dx
            .as_slice()
            .iter()
            .chain(self.d_dy.as_slice())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Objective value at one offset field.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub ratios: Vec<f64>,
    pub zoom_loss: f64,
    pub reg_loss: f64,
}

impl Evaluation {
    pub fn total(&self) -> f64 {
        self.zoom_loss + self.reg_loss
    }

    pub fn mean_ratio(&self) -> f64 {
        if self.ratios.is_empty() {
            return 1.0;
        }
        self.ratios.iter().sum::<f64>() / self.ratios.len() as f64
    }
}

/// A fixed set of boxes rasterized over a base grid, ready to evaluate the
/// objective `L_zoom + reg_weight * |offsets|^2` for any offset field.
///
/// Offsets may be given at the base resolution or at any coarser one; in
/// the latter case they are upsampled first and gradients are pulled back
/// with the adjoint of the upsampling.
#[derive(Debug, Clone)]
pub struct ZoomProblem {
    base: SamplingGrid,
    /// Per-row extent of the base grid's `v` coordinate.
    row_span: Vec<(f64, f64)>,
    masks: Vec<BoxMask>,
    cfg: ZoomLossConfig,
    exec: Exec,
}

/// Offsets ready for node-wise evaluation: upsampling weights per axis and,
/// per mask, the base-coordinate rectangle outside which a node cannot
/// sample the mask.
struct Prepared<'a> {
    offsets: &'a OffsetField,
    rows: Vec<AxisSample>,
    cols: Vec<AxisSample>,
    reach: Vec<[f64; 4]>,
}

impl Prepared<'_> {
    fn offset_at(field: &ScalarField, wy: AxisSample, wx: AxisSample) -> f64 {
        let top = lerp(field.get(wy.lo, wx.lo), field.get(wy.lo, wx.hi), wx.frac);
        let bottom = lerp(field.get(wy.hi, wx.lo), field.get(wy.hi, wx.hi), wx.frac);
        lerp(top, bottom, wy.frac)
    }

    /// Upsampled `(dx, dy)` at full-resolution node `(i, j)`.
    fn delta(&self, i: usize, j: usize) -> (f64, f64) {
        let (wy, wx) = (self.rows[i], self.cols[j]);
        (
            Self::offset_at(self.offsets.dx(), wy, wx),
            Self::offset_at(self.offsets.dy(), wy, wx),
        )
    }

    fn row_reachable(&self, (v0, v1): (f64, f64)) -> bool {
        self.reach.iter().any(|r| v1 >= r[2] && v0 <= r[3])
    }

    fn reachable(&self, u: f64, v: f64) -> bool {
        self.reach.iter().any(|r| u >= r[0] && u <= r[1] && v >= r[2] && v <= r[3])
    }

    /// Adjoint of [`Prepared::delta`] for one node, in the same order as
    /// [`ScalarField::resample_adjoint`].
    fn scatter(&self, field: &mut ScalarField, i: usize, j: usize, g: f64) {
        if g == 0.0 {
            return;
        }
        let (wy, wx) = (self.rows[i], self.cols[j]);
        let (gy0, gy1) = (g * (1.0 - wy.frac), g * wy.frac);
        let data = field.as_mut_slice();
        let w = self.offsets.dims().width();
        data[wy.lo * w + wx.lo] += gy0 * (1.0 - wx.frac);
        data[wy.lo * w + wx.hi] += gy0 * wx.frac;
        data[wy.hi * w + wx.lo] += gy1 * (1.0 - wx.frac);
        data[wy.hi * w + wx.hi] += gy1 * wx.frac;
    }
}

/// Slack added to reach rectangles against rounding in the bound.
const REACH_SLACK: f64 = 1e-9;

impl ZoomProblem {
    pub fn new(boxes: &[BBox], base: SamplingGrid, cfg: ZoomLossConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = base.dims();
        let masks = boxes
            .iter()
            .map(|b| rasterize_box_mask(b, dims))
            .collect::<Result<Vec<_>>>()?;
        Self::from_masks(masks, base, cfg)
    }

    /// Masks must share the base grid's dims.
    pub fn from_masks(masks: Vec<BoxMask>, base: SamplingGrid, cfg: ZoomLossConfig) -> Result<Self> {
        cfg.validate()?;
        for m in &masks {
            base.dims().expect(m.dims())?;
        }
        let w = base.dims().width();
        let row_span = base
            .v()
            .as_slice()
            .chunks(w)
            .map(|row| {
                row.iter()
                    .map(|v| v.clamp(0.0, 1.0))
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
            })
            .collect();
        Ok(Self {
            base,
            row_span,
            masks,
            cfg,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn base(&self) -> &SamplingGrid {
        &self.base
    }

    pub fn masks(&self) -> &[BoxMask] {
        &self.masks
    }

    pub fn config(&self) -> &ZoomLossConfig {
        &self.cfg
    }

    fn check_offsets(&self, offsets: &OffsetField) -> Result<()> {
        let dims = self.base.dims();
        if offsets.dims().fits_within(&dims) {
            Ok(())
        } else {
            Err(Error::DimsMismatch {
                expected: dims,
                got: offsets.dims(),
            })
        }
    }

    fn full_offsets(&self, offsets: &OffsetField) -> Result<OffsetField> {
        self.check_offsets(offsets)?;
        Ok(upsample_offsets(offsets, self.base.dims()))
    }

    /// The clamped sampling grid produced by `offsets`.
    pub fn grid(&self, offsets: &OffsetField) -> Result<SamplingGrid> {
        apply_offsets(&self.base, &self.full_offsets(offsets)?, true)
    }

    fn prepare<'a>(&self, offsets: &'a OffsetField) -> Result<Prepared<'a>> {
        self.check_offsets(offsets)?;
        let (dims, od) = (self.base.dims(), offsets.dims());
        // Upsampled values are convex combinations of the low-resolution
        // ones and clamping is 1-Lipschitz, so every sample stays within
        // these bounds of its clamped base coordinate.
        let max_abs = |f: &ScalarField| f.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (bx, by) = (max_abs(offsets.dx()), max_abs(offsets.dy()));
        let (sx, sy) = ((dims.width() - 1) as f64, (dims.height() - 1) as f64);
        // A sample touches a mask only inside one cell around its support.
        let reach = self
            .masks
            .iter()
            .map(|m| {
                [
                    (m.cols.0 as f64 - 1.0) / sx - bx - REACH_SLACK,
                    (m.cols.1 as f64 + 1.0) / sx + bx + REACH_SLACK,
                    (m.rows.0 as f64 - 1.0) / sy - by - REACH_SLACK,
                    (m.rows.1 as f64 + 1.0) / sy + by + REACH_SLACK,
                ]
            })
            .collect();
        Ok(Prepared {
            offsets,
            rows: resample_weights(od.height(), dims.height()),
            cols: resample_weights(od.width(), dims.width()),
            reach,
        })
    }

    fn reachable(&self, prep: &Prepared, i: usize, j: usize) -> bool {
        let (u, v) = (self.base.u().get(i, j), self.base.v().get(i, j));
        prep.reachable(u.clamp(0.0, 1.0), v.clamp(0.0, 1.0))
    }

    /// Raw (unclamped) sample coordinate of node `(i, j)`.
    fn raw_sample(&self, prep: &Prepared, i: usize, j: usize) -> (f64, f64) {
        let (dx, dy) = prep.delta(i, j);
        (self.base.u().get(i, j) + dx, self.base.v().get(i, j) + dy)
    }

    fn ratios(&self, prep: &Prepared) -> Vec<f64> {
        let dims = self.base.dims();
        let n = self.masks.len();
        let rows = self.exec.map_rows(dims.height(), |i| {
            let mut acc = vec![0.0; n];
            if !prep.row_reachable(self.row_span[i]) {
                return acc;
            }
            for j in 0..dims.width() {
                if !self.reachable(prep, i, j) {
                    continue;
                }
                let (u, v) = self.raw_sample(prep, i, j);
                let sx = axis_sample(u.clamp(0.0, 1.0), dims.width());
                let sy = axis_sample(v.clamp(0.0, 1.0), dims.height());
                for (slot, mask) in acc.iter_mut().zip(&self.masks) {
                    *slot += mask.sample_located(sx, sy);
                }
            }
            acc
        });
        let mut sums = vec![0.0; n];
        for row in rows {
            for (s, r) in sums.iter_mut().zip(row) {
                *s += r;
            }
        }
        sums.iter()
            .zip(&self.masks)
            .map(|(s, m)| s / m.sum())
            .collect()
    }

    pub fn evaluate(&self, offsets: &OffsetField) -> Result<Evaluation> {
        let ratios = self.ratios(&self.prepare(offsets)?);
        Ok(Evaluation {
            zoom_loss: zoom_loss(&ratios, &self.cfg),
            reg_loss: self.cfg.reg_weight * offsets.norm_sq(),
            ratios,
        })
    }

    /// Objective value and its gradient with respect to `offsets`.
    ///
    /// Only nodes that can reach a mask are visited; the result equals
    /// upsampling, warping every node and back-projecting the full-resolution
    /// gradient.
    pub fn evaluate_with_gradient(&self, offsets: &OffsetField) -> Result<(Evaluation, GradField)> {
        let prep = self.prepare(offsets)?;
        let ratios = self.ratios(&prep);
        let scale = self.cfg.reduction(ratios.len());
        let coeffs: Vec<f64> = ratios
            .iter()
            .zip(&self.masks)
            .map(|(&m, mask)| scale * self.cfg.box_loss_slope(m) / mask.sum())
            .collect();

        let dims = self.base.dims();
        let mut grad = GradField::zeros(offsets.dims());
        if coeffs.iter().any(|&c| c != 0.0) {
            let rows = self.exec.map_rows(dims.height(), |i| {
                let mut out = Vec::new();
                if !prep.row_reachable(self.row_span[i]) {
                    return out;
                }
                for j in 0..dims.width() {
                    if !self.reachable(&prep, i, j) {
                        continue;
                    }
                    let (raw_u, raw_v) = self.raw_sample(&prep, i, j);
                    let cx = axis_cell(raw_u.clamp(0.0, 1.0), dims.width());
                    let cy = axis_cell(raw_v.clamp(0.0, 1.0), dims.height());
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for (&c, mask) in coeffs.iter().zip(&self.masks) {
                        if c == 0.0 {
                            continue;
                        }
                        let (du, dv) = mask.grad_located(cx, cy);
                        sx += c * du;
                        sy += c * dv;
                    }
                    // Clamped coordinates do not move with their offsets.
                    let gx = if (0.0..=1.0).contains(&raw_u) { sx } else { 0.0 };
                    let gy = if (0.0..=1.0).contains(&raw_v) { sy } else { 0.0 };
                    if gx != 0.0 || gy != 0.0 {
                        out.push((j, gx, gy));
                    }
                }
                out
            });
            for (i, row) in rows.iter().enumerate() {
                for &(j, gx, gy) in row {
                    prep.scatter(&mut grad.d_dx, i, j, gx);
                    prep.scatter(&mut grad.d_dy, i, j, gy);
                }
            }
        }
        let two_reg = 2.0 * self.cfg.reg_weight;
        if two_reg != 0.0 {
            for (g, d) in grad.d_dx.as_mut_slice().iter_mut().zip(offsets.dx().as_slice()) {
                *g += two_reg * d;
            }
            for (g, d) in grad.d_dy.as_mut_slice().iter_mut().zip(offsets.dy().as_slice()) {
                *g += two_reg * d;
            }
        }
        let eval = Evaluation {
            zoom_loss: zoom_loss(&ratios, &self.cfg),
            reg_loss: self.cfg.reg_weight * offsets.norm_sq(),
            ratios,
        };
        Ok((eval, grad))
    }
}

/// Analytic gradient of `L_zoom + reg_weight * |offsets|^2`.
pub fn zoom_loss_gradient(
    boxes: &[BBox],
    base: &SamplingGrid,
    offsets: &OffsetField,
    cfg: &ZoomLossConfig,
) -> Result<GradField> {
    let problem = ZoomProblem::new(boxes, base.clone(), *cfg)?;
    Ok(problem.evaluate_with_gradient(offsets)?.1)
}

/// One entry of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeError {
    /// 0 for `dx`, 1 for `dy`.
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Components skipped because the perturbation crossed a kink.
    pub skipped: usize,
    pub nodes: Vec<NodeError>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Central-difference half step in normalized units.
    pub step: f64,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    /// Check at most this many offset nodes, evenly strided.
    pub max_nodes: Option<usize>,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-8,
            max_nodes: None,
        }
    }
}

/// Compare [`zoom_loss_gradient`] against central differences of the
/// objective.
pub fn finite_diff_check(
    boxes: &[BBox],
    base: &SamplingGrid,
    offsets: &OffsetField,
    cfg: &ZoomLossConfig,
    step: f64,
) -> Result<FdReport> {
    let problem = ZoomProblem::new(boxes, base.clone(), *cfg)?;
    finite_diff_check_problem(
        &problem,
        offsets,
        &FdOptions {
            step,
            ..FdOptions::default()
        },
    )
}

/// Finite-difference check on a prepared problem.
///
/// The numeric side only evaluates the objective. A component is skipped
/// when moving it by `±step` changes which pixel cell some affected sample
/// falls in, pushes a sample across the clamp boundary, or moves a box
/// ratio across `alpha`: the objective is not differentiable there.
pub fn finite_diff_check_problem(
    problem: &ZoomProblem,
    offsets: &OffsetField,
    opts: &FdOptions,
) -> Result<FdReport> {
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::InvalidConfig("finite-difference step must be > 0".into()));
    }
    let (_, grad) = problem.evaluate_with_gradient(offsets)?;
    let base = problem.base();
    let full_dims = base.dims();
    let odims = offsets.dims();
    let raw = problem.full_offsets(offsets)?;
    let alpha = problem.config().alpha;

    let stride = match opts.max_nodes {
        Some(n) if n > 0 && n < odims.len() => odims.len().div_ceil(n),
        _ => 1,
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        nodes: Vec::new(),
    };
    for k in (0..odims.len()).step_by(stride) {
        let (row, col) = (k / odims.width(), k % odims.width());
        for channel in 0..2 {
            // Influence of this component on the full-resolution coordinates.
            let mut unit = ScalarField::zeros(odims);
            unit.set(row, col, 1.0);
            let influence = unit.resample(full_dims);
            let (base_field, raw_field, n) = if channel == 0 {
                (base.u(), raw.dx(), full_dims.width())
            } else {
                (base.v(), raw.dy(), full_dims.height())
            };
            let last = (n - 1) as f64;
            let crosses_cell = (0..full_dims.len()).any(|q| {
                let w = influence.as_slice()[q];
                if w == 0.0 {
                    return false;
                }
                let p0 = base_field.as_slice()[q] + raw_field.as_slice()[q];
                let lo = (p0 - opts.step * w) * last;
                let hi = (p0 + opts.step * w) * last;
                // Entirely outside on one side is flat; straddling the clamp
                // or a cell boundary is a kink.
                if hi < 0.0 || lo > last {
                    return false;
                }
                lo < 0.0 || hi > last || lo.floor() != hi.floor()
            });

            let perturbed = |delta: f64| -> Result<Evaluation> {
                let mut o = offsets.clone();
                let (dx, dy) = o.parts_mut();
                let f = if channel == 0 { dx } else { dy };
                let v = f.get(row, col);
                f.set(row, col, v + delta);
                problem.evaluate(&o)
            };
            let plus = perturbed(opts.step)?;
            let minus = perturbed(-opts.step)?;
            let crosses_alpha = plus
                .ratios
                .iter()
                .zip(&minus.ratios)
                .any(|(a, b)| (*a >= alpha) != (*b >= alpha));
            if crosses_cell || crosses_alpha {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.total() - minus.total()) / (2.0 * opts.step);
            let analytic = if channel == 0 {
                grad.d_dx.get(row, col)
            } else {
                grad.d_dy.get(row, col)
            };
            let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel_error = (analytic - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            report.checked += 1;
            report.nodes.push(NodeError {
                channel,
                row,
                col,
                analytic,
                numeric,
                rel_error,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_uniform_grid;
    use crate::offset_solver::backproject_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims(h: usize, w: usize) -> GridDims {
        GridDims::new(h, w).unwrap()
    }

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_coords(x1, y1, x2, y2, Space::Original).unwrap()
    }

    #[test]
    fn bbox_validation() {
        assert!(BBox::from_coords(0.2, 0.2, 0.2, 0.4, Space::Original).is_err());
        assert!(BBox::from_coords(0.3, 0.2, 0.2, 0.4, Space::Original).is_err());
        assert!(BBox::from_coords(-0.1, 0.2, 0.2, 0.4, Space::Original).is_err());
        assert!(BBox::from_coords(0.1, 0.2, 0.2, f64::NAN, Space::Original).is_err());
        let b = bx(0.1, 0.2, 0.4, 0.6);
        assert!((b.area() - 0.12).abs() < 1e-15);
        assert_eq!(b.iou(&b), 1.0);
        assert_eq!(b.iou(&bx(0.5, 0.7, 0.6, 0.8)), 0.0);
    }

    #[test]
    fn full_box_mask_is_all_ones() {
        let m = rasterize_box_mask(&bx(0.0, 0.0, 1.0, 1.0), dims(7, 5)).unwrap();
        assert!(m.values().as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn left_half_mask_on_odd_grid() {
        let m = rasterize_box_mask(&bx(0.0, 0.0, 0.5, 1.0), dims(5, 5)).unwrap();
        for i in 0..5 {
            assert_eq!(m.values().get(i, 0), 1.0);
            assert_eq!(m.values().get(i, 1), 1.0);
            assert_eq!(m.values().get(i, 2), 0.5);
            assert_eq!(m.values().get(i, 3), 0.0);
            assert_eq!(m.values().get(i, 4), 0.0);
        }
        assert_eq!(m.sum(), 12.5);
    }

    #[test]
    fn mask_mass_tracks_box_area() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = dims(40, 50);
        for _ in 0..200 {
            let (x1, y1) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
            let (w, h) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
            let b = bx(x1, y1, x1 + w, y1 + h);
            let m = rasterize_box_mask(&b, d).unwrap();
            let frac = m.sum() / d.len() as f64;
            // one boundary ring of slack
            let ring = 2.0 * (w / d.spacing_x() + h / d.spacing_y() + 2.0) / d.len() as f64;
            assert!((frac - b.area()).abs() <= ring, "{frac} vs {}", b.area());
        }
    }

    #[test]
    fn zoom_ratio_examples() {
        let d = dims(41, 41);
        let mask = rasterize_box_mask(&bx(0.45, 0.45, 0.55, 0.55), d).unwrap();
        assert_eq!(zoom_ratio(&mask, &make_uniform_grid(d)).unwrap(), 1.0);

        let zoom = SamplingGrid::from_fn(d, |x, y| (0.25 + 0.5 * x, 0.25 + 0.5 * y)).unwrap();
        let m = zoom_ratio(&mask, &zoom).unwrap();
        assert!((m - 4.0).abs() < 0.15, "m = {m}");

        let away = SamplingGrid::from_fn(d, |x, y| (0.1 * x, 0.1 * y)).unwrap();
        assert_eq!(zoom_ratio(&mask, &away).unwrap(), 0.0);
    }

    #[test]
    fn zoom_loss_examples() {
        let cfg = ZoomLossConfig::default();
        assert_eq!(zoom_loss(&[2.0], &cfg), 0.0);
        assert_eq!(zoom_loss(&[5.0], &cfg), 0.0);
        let l = zoom_loss(&[1.0], &cfg);
        let expect = ((2.0 + 1e-6) / (1.0 + 1e-6f64)).ln().powi(2);
        assert!((l - expect).abs() < 1e-15);
        assert!((l - 0.48045).abs() < 1e-5);
        let mean = ZoomLossConfig {
            mean_reduction: true,
            ..cfg
        };
        assert!((zoom_loss(&[1.0, 3.0], &mean) - expect / 2.0).abs() < 1e-15);
        assert!(zoom_loss(&[0.0], &cfg).is_finite());
    }

    #[test]
    fn gradient_is_reg_only_when_satisfied() {
        let d = dims(12, 12);
        let base = make_uniform_grid(d);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dx = ScalarField::from_fn(d, |_, _| rng.random_range(-0.02..0.02));
        let offsets = OffsetField::new(dx.clone(), dx).unwrap();
        let cfg = ZoomLossConfig {
            alpha: 0.5,
            reg_weight: 0.3,
            ..Default::default()
        };
        let g = zoom_loss_gradient(&[bx(0.3, 0.3, 0.6, 0.6)], &base, &offsets, &cfg).unwrap();
        for k in 0..d.len() {
            assert_eq!(g.d_dx.as_slice()[k], 0.6 * offsets.dx().as_slice()[k]);
        }
    }

    #[test]
    fn gradient_vanishes_away_from_masks() {
        let d = dims(24, 24);
        let base = make_uniform_grid(d);
        let offsets = OffsetField::uniform(d, 0.003, -0.002);
        let cfg = ZoomLossConfig {
            reg_weight: 0.1,
            ..Default::default()
        };
        let g = zoom_loss_gradient(&[bx(0.1, 0.1, 0.2, 0.2)], &base, &offsets, &cfg).unwrap();
        for i in 12..24 {
            for j in 12..24 {
                assert_eq!(g.d_dx.get(i, j), 2.0 * 0.1 * 0.003);
                assert_eq!(g.d_dy.get(i, j), 2.0 * 0.1 * -0.002);
            }
        }
    }

    #[test]
    fn constant_mask_has_reg_only_gradient() {
        let d = dims(10, 10);
        let mask = BoxMask::from_field(ScalarField::filled(d, 1.0)).unwrap();
        let problem = ZoomProblem::from_masks(vec![mask], make_uniform_grid(d), ZoomLossConfig::default()).unwrap();
        let offsets = OffsetField::uniform(d, 0.01, 0.02);
        let (eval, g) = problem.evaluate_with_gradient(&offsets).unwrap();
        assert!(eval.zoom_loss > 0.0);
        let reg = 2.0 * ZoomLossConfig::default().reg_weight;
        assert!(g.d_dx.as_slice().iter().all(|&v| v == reg * 0.01));
        assert!(g.d_dy.as_slice().iter().all(|&v| v == reg * 0.02));
    }

    #[test]
    fn fd_check_trivial_and_random() {
        let d = dims(8, 8);
        let base = make_uniform_grid(d);
        let r = finite_diff_check(&[], &base, &OffsetField::zeros(d), &ZoomLossConfig::default(), 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.nodes.iter().all(|n| n.analytic == 0.0 && n.numeric == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let full = dims(16, 16);
        let base = make_uniform_grid(full);
        let dx = ScalarField::from_fn(d, |_, _| rng.random_range(-0.03..0.03));
        let dy = ScalarField::from_fn(d, |_, _| rng.random_range(-0.03..0.03));
        let offsets = OffsetField::new(dx, dy).unwrap();
        let boxes = [bx(0.2, 0.25, 0.45, 0.5), bx(0.55, 0.6, 0.8, 0.75)];
        let r = finite_diff_check(&boxes, &base, &offsets, &ZoomLossConfig::default(), 1e-5).unwrap();
        assert!(r.checked > 20, "{r:?}");
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn loss_is_nonincreasing_in_ratio() {
        let cfg = ZoomLossConfig::default();
        let mut prev = f64::INFINITY;
        for k in 0..=600 {
            let l = cfg.box_loss(k as f64 * 0.01);
            assert!(l >= 0.0 && l <= prev);
            prev = l;
        }
    }

    #[test]
    fn restricted_evaluation_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let full = dims(48, 40);
        let low = full.downscaled(8);
        let dx = ScalarField::from_fn(low, |_, _| rng.random_range(-0.05..0.05));
        let dy = ScalarField::from_fn(low, |_, _| rng.random_range(-0.05..0.05));
        let offsets = OffsetField::new(dx, dy).unwrap();
        let boxes = [bx(0.1, 0.1, 0.2, 0.18), bx(0.7, 0.5, 0.76, 0.6)];
        let cfg = ZoomLossConfig {
            reg_weight: 0.0,
            ..ZoomLossConfig::default()
        };
        let p = ZoomProblem::new(&boxes, make_uniform_grid(full), cfg).unwrap();
        let (eval, grad) = p.evaluate_with_gradient(&offsets).unwrap();

        let grid = p.grid(&offsets).unwrap();
        for (m, mask) in eval.ratios.iter().zip(p.masks()) {
            let dense = zoom_ratio(mask, &grid).unwrap();
            assert!((m - dense).abs() < 1e-12, "{m} vs {dense}");
        }
        let up = upsample_offsets(&offsets, full);
        let (_, full_grad) = p.evaluate_with_gradient(&up).unwrap();
        let back = backproject_gradient(&full_grad, low).unwrap();
        assert!(grad.max_abs() > 0.0);
        for (a, b) in grad.d_dx.as_slice().iter().zip(back.d_dx.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        for (a, b) in grad.d_dy.as_slice().iter().zip(back.d_dy.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
