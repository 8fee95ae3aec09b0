//! Saliency-driven grid construction, kept as a comparison baseline.
//!
//! Each output node is mapped to the saliency-weighted, Gaussian-weighted
//! average of nearby saliency node coordinates, which pulls sampling toward
//! salient regions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{GridDims, SamplingGrid, ScalarField};

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    values: ScalarField,
}

impl SaliencyMap {
    pub fn new(values: ScalarField) -> Result<Self> {
        if values.as_slice().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig(
                "saliency values must be finite and non-negative".into(),
            ));
        }
        if !values.as_slice().iter().any(|&v| v > 0.0) {
            return Err(Error::ZeroSaliency);
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> GridDims {
        self.values.dims()
    }

    pub fn values(&self) -> &ScalarField {
        &self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernelConfig {
    /// Standard deviation in normalized units.
    pub sigma: f64,
    /// Support half-width in saliency-grid nodes.
    pub radius: usize,
}

impl Default for GaussianKernelConfig {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            radius: 8,
        }
    }
}

impl GaussianKernelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::InvalidConfig(format!("kernel sigma {} must be > 0", self.sigma)));
        }
        if self.radius < 1 {
            return Err(Error::InvalidConfig("kernel radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Build the saliency-weighted sampling grid at resolution `out`.
///
/// Output nodes whose kernel support holds no saliency keep their identity
/// coordinate.
pub fn saliency_grid(sal: &SaliencyMap, cfg: &GaussianKernelConfig, out: GridDims) -> Result<SamplingGrid> {
    saliency_grid_with(sal, cfg, out, Exec::default())
}

pub fn saliency_grid_with(
    sal: &SaliencyMap,
    cfg: &GaussianKernelConfig,
    out: GridDims,
    exec: Exec,
) -> Result<SamplingGrid> {
    cfg.validate()?;
    let sd = sal.dims();
    let inv_two_var = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
    let r = cfg.radius as isize;
    let eval = |row: usize, col: usize| -> (f64, f64) {
        let (x, y) = (out.x_of(col), out.y_of(row));
        let ci = (y * (sd.height() - 1) as f64).round() as isize;
        let cj = (x * (sd.width() - 1) as f64).round() as isize;
        let (mut num_u, mut num_v, mut den) = (0.0, 0.0, 0.0);
        for si in (ci - r).max(0)..=(ci + r).min(sd.height() as isize - 1) {
            let yp = sd.y_of(si as usize);
            for sj in (cj - r).max(0)..=(cj + r).min(sd.width() as isize - 1) {
                let s = sal.values.get(si as usize, sj as usize);
                if s == 0.0 {
                    continue;
                }
                let xp = sd.x_of(sj as usize);
                let d2 = (x - xp) * (x - xp) + (y - yp) * (y - yp);
                let w = s * (-d2 * inv_two_var).exp();
                num_u += w * xp;
                num_v += w * yp;
                den += w;
            }
        }
        if den > 0.0 {
            ((num_u / den).clamp(0.0, 1.0), (num_v / den).clamp(0.0, 1.0))
        } else {
            (x, y)
        }
    };
    let rows = exec.map_rows(out.height(), |i| {
        (0..out.width()).map(|j| eval(i, j)).collect::<Vec<_>>()
    });
    let u = rows.iter().flatten().map(|p| p.0).collect();
    let v = rows.iter().flatten().map(|p| p.1).collect();
    SamplingGrid::new(ScalarField::from_vec(out, u)?, ScalarField::from_vec(out, v)?)
}

/// Separable Gaussian blur with border renormalization; used to turn
/// rasterized boxes into a smooth saliency map.
pub fn gaussian_blur(field: &ScalarField, sigma_nodes: f64) -> ScalarField {
    if sigma_nodes <= 0.0 {
        return field.clone();
    }
    let radius = (3.0 * sigma_nodes).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_nodes * sigma_nodes)).exp())
        .collect();
    let dims = field.dims();
    let pass = |src: &ScalarField, along_x: bool| {
        ScalarField::from_fn(dims, |i, j| {
            let (pos, n) = if along_x {
                (j as isize, dims.width() as isize)
            } else {
                (i as isize, dims.height() as isize)
            };
            let (mut acc, mut norm) = (0.0, 0.0);
            for (t, w) in taps.iter().enumerate() {
                let q = pos + t as isize - radius;
                if q < 0 || q >= n {
                    continue;
                }
                let v = if along_x { src.get(i, q as usize) } else { src.get(q as usize, j) };
                acc += w * v;
                norm += w;
            }
            acc / norm
        })
    };
    pass(&pass(field, true), false)
}
