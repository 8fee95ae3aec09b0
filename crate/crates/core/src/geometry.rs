//! Coordinate conventions, scalar fields, offset fields and sampling grids.
//!
//! All coordinates are normalized per axis to `[0, 1]`, `x` along the width
//! and `y` along the height, under the align-corners convention: normalized
//! `0` is the first node and `1` the last, so node `j` of a `W`-wide grid sits
//! at `j / (W - 1)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Positions within this distance of a node (in node units) are snapped onto
/// it, so that grids built from `j / (W - 1)` hit nodes exactly.
pub(crate) const NODE_SNAP: f64 = 1e-9;

/// A point in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormCoord {
    pub x: f64,
    pub y: f64,
}

impl NormCoord {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn clamped(self) -> Self {
        Self::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }

    pub fn dist(self, other: Self) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Deserialize)]
struct RawDims {
    height: usize,
    width: usize,
}

/// Node counts of a grid; both axes hold at least two nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDims")]
pub struct GridDims {
    height: usize,
    width: usize,
}

impl TryFrom<RawDims> for GridDims {
    type Error = Error;

    fn try_from(raw: RawDims) -> Result<Self> {
        GridDims::new(raw.height, raw.width)
    }
}

impl fmt::Display for GridDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl GridDims {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidDims { height, width });
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row-major index of node `(row, col)`.
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Normalized x coordinate of column `col`.
    pub fn x_of(&self, col: usize) -> f64 {
        col as f64 / (self.width - 1) as f64
    }

    /// Normalized y coordinate of row `row`.
    pub fn y_of(&self, row: usize) -> f64 {
        row as f64 / (self.height - 1) as f64
    }

    pub fn node_coord(&self, row: usize, col: usize) -> NormCoord {
        NormCoord::new(self.x_of(col), self.y_of(row))
    }

    /// Normalized distance between neighbouring nodes along x.
    pub fn spacing_x(&self) -> f64 {
        1.0 / (self.width - 1) as f64
    }

    pub fn spacing_y(&self) -> f64 {
        1.0 / (self.height - 1) as f64
    }

    /// Dims reduced by an integer factor, rounding up and keeping at least
    /// two nodes per axis. A factor of 8 gives the default offset grid.
    pub fn downscaled(&self, factor: usize) -> Self {
        let f = factor.max(1);
        Self {
            height: self.height.div_ceil(f).max(2),
            width: self.width.div_ceil(f).max(2),
        }
    }

    pub fn fits_within(&self, other: &GridDims) -> bool {
        self.height <= other.height && self.width <= other.width
    }

    pub(crate) fn expect(&self, got: GridDims) -> Result<()> {
        if *self == got {
            Ok(())
        } else {
            Err(Error::DimsMismatch {
                expected: *self,
                got,
            })
        }
    }
}

/// Where a normalized coordinate lands on one axis of `n` nodes: the value is
/// `lerp(node[lo], node[hi], frac)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AxisSample {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Locate `coord` (clamped to `[0, 1]`) on an axis. Exactly on a node,
/// `frac == 0` and `lo` is that node, which makes node lookups bit-exact.
pub(crate) fn axis_sample(coord: f64, n: usize) -> AxisSample {
    let last = n - 1;
    let mut p = coord.clamp(0.0, 1.0) * last as f64;
    let r = p.round();
    if (p - r).abs() < NODE_SNAP {
        p = r;
    }
    let lo = (p.floor() as usize).min(last);
    AxisSample {
        lo,
        hi: (lo + 1).min(last),
        frac: p - lo as f64,
    }
}

/// Like [`axis_sample`] but always returns a full cell (`hi == lo + 1`),
/// which is what interpolation derivatives need.
pub(crate) fn axis_cell(coord: f64, n: usize) -> AxisSample {
    let s = axis_sample(coord, n);
    if s.lo + 1 < n {
        s
    } else {
        AxisSample {
            lo: n - 2,
            hi: n - 1,
            frac: 1.0,
        }
    }
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Row-major scalar field over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    dims: GridDims,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn from_vec(dims: GridDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::FieldLength {
                dims,
                expected: dims.len(),
                got: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: GridDims, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: GridDims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn from_fn(dims: GridDims, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for i in 0..dims.height {
            for j in 0..dims.width {
                data.push(f(i, j));
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[self.dims.index(row, col)]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let k = self.dims.index(row, col);
        self.data[k] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum accumulated row by row, then across rows in order.
    pub fn sum(&self) -> f64 {
        self.data
            .chunks(self.dims.width)
            .map(|row| row.iter().sum::<f64>())
            .sum()
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Bilinear interpolation at a normalized coordinate (clamped).
    pub fn sample(&self, at: NormCoord) -> f64 {
        let sx = axis_sample(at.x, self.dims.width);
        let sy = axis_sample(at.y, self.dims.height);
        let top = lerp(self.get(sy.lo, sx.lo), self.get(sy.lo, sx.hi), sx.frac);
        let bottom = lerp(self.get(sy.hi, sx.lo), self.get(sy.hi, sx.hi), sx.frac);
        lerp(top, bottom, sy.frac)
    }

    /// Align-corners bilinear resampling onto `target`.
    pub fn resample(&self, target: GridDims) -> Self {
        self.resample_with(target, Exec::default())
    }

    pub fn resample_with(&self, target: GridDims, exec: Exec) -> Self {
        if target == self.dims {
            return self.clone();
        }
        let rows = resample_weights(self.dims.height, target.height);
        let cols = resample_weights(self.dims.width, target.width);
        let mut out = Self::zeros(target);
        exec.fill_rows(&mut out.data, target.width, |i, row| {
            let wy = rows[i];
            for (j, slot) in row.iter_mut().enumerate() {
                let wx = cols[j];
                let top = lerp(self.get(wy.lo, wx.lo), self.get(wy.lo, wx.hi), wx.frac);
                let bottom = lerp(self.get(wy.hi, wx.lo), self.get(wy.hi, wx.hi), wx.frac);
                *slot = lerp(top, bottom, wy.frac);
            }
        });
        out
    }

    /// Adjoint of [`ScalarField::resample`]: scatters each entry of `self`
    /// onto its enclosing nodes of a `target`-sized grid with the same
    /// bilinear weights.
    pub fn resample_adjoint(&self, target: GridDims) -> Self {
        if target == self.dims {
            return self.clone();
        }
        let rows = resample_weights(target.height, self.dims.height);
        let cols = resample_weights(target.width, self.dims.width);
        let mut out = Self::zeros(target);
        for (i, wy) in rows.iter().enumerate() {
            for (j, wx) in cols.iter().enumerate() {
                let g = self.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let (gy0, gy1) = (g * (1.0 - wy.frac), g * wy.frac);
                out.data[target.index(wy.lo, wx.lo)] += gy0 * (1.0 - wx.frac);
                out.data[target.index(wy.lo, wx.hi)] += gy0 * wx.frac;
                out.data[target.index(wy.hi, wx.lo)] += gy1 * (1.0 - wx.frac);
                out.data[target.index(wy.hi, wx.hi)] += gy1 * wx.frac;
            }
        }
        out
    }
}

/// Per-target-node source position for align-corners resampling between axes
/// of `src` and `dst` nodes. Coinciding nodes get `frac == 0` exactly.
pub(crate) fn resample_weights(src: usize, dst: usize) -> Vec<AxisSample> {
    (0..dst)
        .map(|k| {
            let num = k * (src - 1);
            let den = dst - 1;
            let lo = (num / den).min(src - 1);
            let frac = (num - lo * den) as f64 / den as f64;
            AxisSample {
                lo,
                hi: (lo + 1).min(src - 1),
                frac,
            }
        })
        .collect()
}

/// Low-resolution displacement field `(dx, dy)` in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetField {
    dx: ScalarField,
    dy: ScalarField,
}

impl OffsetField {
    pub fn new(dx: ScalarField, dy: ScalarField) -> Result<Self> {
        dx.dims().expect(dy.dims())?;
        if !dx.is_finite() || !dy.is_finite() {
            return Err(Error::NonFinite("offset field"));
        }
        Ok(Self { dx, dy })
    }

    pub fn zeros(dims: GridDims) -> Self {
        Self {
            dx: ScalarField::zeros(dims),
            dy: ScalarField::zeros(dims),
        }
    }

    pub fn uniform(dims: GridDims, dx: f64, dy: f64) -> Self {
        Self {
            dx: ScalarField::filled(dims, dx),
            dy: ScalarField::filled(dims, dy),
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dx.dims()
    }

    pub fn dx(&self) -> &ScalarField {
        &self.dx
    }

    pub fn dy(&self) -> &ScalarField {
        &self.dy
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut ScalarField, &mut ScalarField) {
        (&mut self.dx, &mut self.dy)
    }

    /// Squared L2 norm over both channels.
    pub fn norm_sq(&self) -> f64 {
        self.dx.dot(&self.dx) + self.dy.dot(&self.dy)
    }

    pub fn max_abs(&self) -> f64 {
        self.dx
            .as_slice()
            .iter()
            .chain(self.dy.as_slice())
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Bilinearly interpolate both offset channels onto `target`.
pub fn upsample_offsets(field: &OffsetField, target: GridDims) -> OffsetField {
    OffsetField {
        dx: field.dx.resample(target),
        dy: field.dy.resample(target),
    }
}

/// Full-resolution mapping from output node `(x, y)` to original-space
/// coordinates `(u, v)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    u: ScalarField,
    v: ScalarField,
}

impl SamplingGrid {
    pub fn new(u: ScalarField, v: ScalarField) -> Result<Self> {
        u.dims().expect(v.dims())?;
        if !u.is_finite() || !v.is_finite() {
            return Err(Error::NonFinite("sampling grid"));
        }
        Ok(Self { u, v })
    }

    /// Grid whose node `(row, col)` maps to `f(x, y)` with `(x, y)` the node's
    /// own normalized coordinate.
    pub fn from_fn(dims: GridDims, f: impl Fn(f64, f64) -> (f64, f64)) -> Result<Self> {
        let u = ScalarField::from_fn(dims, |i, j| f(dims.x_of(j), dims.y_of(i)).0);
        let v = ScalarField::from_fn(dims, |i, j| f(dims.x_of(j), dims.y_of(i)).1);
        Self::new(u, v)
    }

    pub fn dims(&self) -> GridDims {
        self.u.dims()
    }

    pub fn u(&self) -> &ScalarField {
        &self.u
    }

    pub fn v(&self) -> &ScalarField {
        &self.v
    }

    /// Original-space coordinate sampled by output node `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> NormCoord {
        NormCoord::new(self.u.get(row, col), self.v.get(row, col))
    }

    /// Original-space coordinate for a continuous output-space position,
    /// by bilinear interpolation of both fields.
    pub fn interpolate(&self, at: NormCoord) -> NormCoord {
        NormCoord::new(self.u.sample(at), self.v.sample(at))
    }
}

/// The identity grid: node `(i, j)` holds `u = j/(W-1)`, `v = i/(H-1)`.
pub fn make_uniform_grid(dims: GridDims) -> SamplingGrid {
    SamplingGrid {
        u: ScalarField::from_fn(dims, |_, j| dims.x_of(j)),
        v: ScalarField::from_fn(dims, |i, _| dims.y_of(i)),
    }
}

/// Displace every node of `base` by `offsets`; with `clamp`, the results are
/// clamped to `[0, 1]`.
pub fn apply_offsets(base: &SamplingGrid, offsets: &OffsetField, clamp: bool) -> Result<SamplingGrid> {
    base.dims().expect(offsets.dims())?;
    let shift = |base: &ScalarField, delta: &ScalarField| {
        let data = base
            .as_slice()
            .iter()
            .zip(delta.as_slice())
            .map(|(b, d)| {
                let p = b + d;
                if clamp {
                    p.clamp(0.0, 1.0)
                } else {
                    p
                }
            })
            .collect();
        ScalarField {
            dims: base.dims(),
            data,
        }
    };
    Ok(SamplingGrid {
        u: shift(&base.u, &offsets.dx),
        v: shift(&base.v, &offsets.dy),
    })
}
