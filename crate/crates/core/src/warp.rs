//! Bilinear sampling and grid-driven warping: `out(x, y) = in(u(x, y), v(x, y))`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{GridDims, NormCoord, SamplingGrid, ScalarField};

/// Multi-channel image stored as one scalar field per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: Vec<ScalarField>,
}

impl Image {
    pub fn new(channels: Vec<ScalarField>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| Error::InvalidConfig("image needs at least one channel".into()))?;
        for c in &channels[1..] {
            first.dims().expect(c.dims())?;
        }
        if channels.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { channels })
    }

    pub fn gray(field: ScalarField) -> Result<Self> {
        Self::new(vec![field])
    }

    pub fn dims(&self) -> GridDims {
        self.channels[0].dims()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn channel(&self, c: usize) -> Result<&ScalarField> {
        self.channels.get(c).ok_or(Error::InvalidChannel {
            channel: c,
            channels: self.channels.len(),
        })
    }

    pub fn channels(&self) -> &[ScalarField] {
        &self.channels
    }
}

/// Bilinear interpolation of one channel at a normalized coordinate.
/// Coordinates outside `[0, 1]` replicate the border.
pub fn bilinear_sample(image: &Image, at: NormCoord, channel: usize) -> Result<f64> {
    Ok(image.channel(channel)?.sample(at))
}

/// Resample `field` through `grid`; the result has the grid's dims.
pub fn warp_field(field: &ScalarField, grid: &SamplingGrid, exec: Exec) -> ScalarField {
    let dims = grid.dims();
    let mut out = ScalarField::zeros(dims);
    let w = dims.width();
    exec.fill_rows(out.as_mut_slice(), w, |i, row| {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = field.sample(grid.at(i, j));
        }
    });
    out
}

pub fn warp_image(image: &Image, grid: &SamplingGrid) -> Image {
    warp_image_with(image, grid, Exec::default())
}

pub fn warp_image_with(image: &Image, grid: &SamplingGrid, exec: Exec) -> Image {
    Image {
        channels: image
            .channels
            .iter()
            .map(|c| warp_field(c, grid, exec))
            .collect(),
    }
}

/// Per-node Jacobian of `(u, v)` with respect to `(x, y)`, all in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub du_dx: ScalarField,
    pub du_dy: ScalarField,
    pub dv_dx: ScalarField,
    pub dv_dy: ScalarField,
}

impl JacobianField {
    pub fn dims(&self) -> GridDims {
        self.du_dx.dims()
    }

    /// Determinant field; values below 1 mean local magnification.
    pub fn det(&self) -> ScalarField {
        let data = (0..self.dims().len())
            .map(|k| {
                self.du_dx.as_slice()[k] * self.dv_dy.as_slice()[k]
                    - self.du_dy.as_slice()[k] * self.dv_dx.as_slice()[k]
            })
            .collect();
        ScalarField::from_vec(self.dims(), data).expect("same dims")
    }
}

/// Finite-difference derivative of `f` along columns (`along_x`) or rows.
/// Central in the interior, one-sided at the borders.
fn diff(f: &ScalarField, along_x: bool) -> ScalarField {
    let dims = f.dims();
    let (n, step) = if along_x {
        (dims.width(), dims.spacing_x())
    } else {
        (dims.height(), dims.spacing_y())
    };
    ScalarField::from_fn(dims, |i, j| {
        let k = if along_x { j } else { i };
        let at = |k: usize| if along_x { f.get(i, k) } else { f.get(k, j) };
        if k == 0 {
            (at(1) - at(0)) / step
        } else if k == n - 1 {
            (at(n - 1) - at(n - 2)) / step
        } else {
            (at(k + 1) - at(k - 1)) / (2.0 * step)
        }
    })
}

pub fn jacobian_field(grid: &SamplingGrid) -> JacobianField {
    JacobianField {
        du_dx: diff(grid.u(), true),
        du_dy: diff(grid.u(), false),
        dv_dx: diff(grid.v(), true),
        dv_dy: diff(grid.v(), false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_uniform_grid;
    use proptest::prelude::*;

    fn dims(h: usize, w: usize) -> GridDims {
        GridDims::new(h, w).unwrap()
    }

    fn tiny() -> Image {
        Image::gray(ScalarField::from_vec(dims(2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap()).unwrap()
    }

    fn central_zoom(d: GridDims) -> SamplingGrid {
        SamplingGrid::from_fn(d, |x, y| (0.25 + 0.5 * x, 0.25 + 0.5 * y)).unwrap()
    }

    #[test]
    fn sample_nodes_and_center() {
        let img = tiny();
        assert_eq!(bilinear_sample(&img, NormCoord::new(0.0, 0.0), 0).unwrap(), 0.0);
        assert_eq!(bilinear_sample(&img, NormCoord::new(0.5, 0.5), 0).unwrap(), 1.5);
        assert_eq!(bilinear_sample(&img, NormCoord::new(1.0, 1.0), 0).unwrap(), 3.0);
        assert_eq!(bilinear_sample(&img, NormCoord::new(1.7, -3.0), 0).unwrap(), 1.0);
        assert!(matches!(
            bilinear_sample(&img, NormCoord::new(0.0, 0.0), 1),
            Err(Error::InvalidChannel { .. })
        ));
    }

    #[test]
    fn identity_warp_is_bit_exact() {
        for (h, w) in [(2, 2), (7, 13), (50, 37), (64, 64), (100, 3)] {
            let d = dims(h, w);
            let field = ScalarField::from_fn(d, |i, j| ((i * 31 + j * 17) as f64 * 0.137).sin());
            let img = Image::new(vec![field.clone(), field]).unwrap();
            assert_eq!(warp_image(&img, &make_uniform_grid(d)), img);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let d = dims(9, 9);
        let img = Image::gray(ScalarField::filled(d, 0.42)).unwrap();
        let g = SamplingGrid::from_fn(d, |x, y| ((x * x).min(1.0), (0.3 + 0.2 * y * x))).unwrap();
        assert!(warp_image(&img, &g).channels()[0].as_slice().iter().all(|&v| v == 0.42));
    }

    #[test]
    fn central_zoom_magnifies_twice() {
        // A single bright node at the image center becomes a feature twice as
        // wide in the output.
        let d = dims(33, 33);
        let img = Image::gray(ScalarField::from_fn(d, |i, j| {
            if (14..=18).contains(&i) && (14..=18).contains(&j) {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let out = warp_image(&img, &central_zoom(d));
        let c = &out.channels()[0];
        let full = |row: usize| (0..33).filter(|&j| c.get(row, j) == 1.0).count();
        // original plateau is 5 nodes wide (4 spacings); output plateau spans 8 spacings
        assert_eq!(full(16), 9);
        assert_eq!(c.get(16, 16), 1.0);
        assert_eq!(c.get(16, 12), 1.0);
        assert_eq!(c.get(16, 20), 1.0);
        assert_eq!(c.get(16, 21), 0.5);
        assert_eq!(c.get(16, 22), 0.0);
    }

    #[test]
    fn jacobian_examples() {
        let d = dims(11, 11);
        let j = jacobian_field(&make_uniform_grid(d));
        for k in 0..d.len() {
            assert!((j.du_dx.as_slice()[k] - 1.0).abs() < 1e-12);
            assert!(j.du_dy.as_slice()[k].abs() < 1e-12);
            assert!((j.det().as_slice()[k] - 1.0).abs() < 1e-12);
        }
        let half = SamplingGrid::from_fn(d, |x, y| (0.5 * x, y)).unwrap();
        let j = jacobian_field(&half);
        assert!(j.du_dx.as_slice().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let j = jacobian_field(&central_zoom(d));
        for i in 1..10 {
            for k in 1..10 {
                assert!((j.det().get(i, k) - 0.25).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn warp_stays_in_input_range(
            vals in prop::collection::vec(-2.0f64..2.0, 20),
            us in prop::collection::vec(-0.2f64..1.2, 16),
            vs in prop::collection::vec(-0.2f64..1.2, 16),
        ) {
            let img = Image::gray(ScalarField::from_vec(dims(4, 5), vals.clone()).unwrap()).unwrap();
            let g = SamplingGrid::new(
                ScalarField::from_vec(dims(4, 4), us).unwrap(),
                ScalarField::from_vec(dims(4, 4), vs).unwrap(),
            ).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &o in warp_image(&img, &g).channels()[0].as_slice() {
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }

        #[test]
        fn sample_is_continuous(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let img = tiny();
            let a = bilinear_sample(&img, NormCoord::new(x, y), 0).unwrap();
            let b = bilinear_sample(&img, NormCoord::new((x + 1e-7).min(1.0), y), 0).unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn node_aligned_translation_conserves_mass() {
        let d = dims(20, 20);
        let mask = ScalarField::from_fn(d, |i, j| if (6..12).contains(&i) && (5..9).contains(&j) { 1.0 } else { 0.0 });
        let shift = 3.0 * d.spacing_x();
        let g = SamplingGrid::from_fn(d, |x, y| (x + shift, y)).unwrap();
        let out = warp_field(&mask, &g, Exec::Sequential);
        assert!((out.sum() - mask.sum()).abs() < 1e-9);
    }
}
