//! Self-checks exposed as subcommands: gradient checks on random
//! instances, IoU-bound verification and a parametrization comparison.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use zoomwarp::metrics::{ClassZr, Parametrization};
use zoomwarp::zoom_objective::{finite_diff_check_problem, FdOptions};
use zoomwarp::{
    iou_lower_bound, make_uniform_grid, BBox, GridDims, OffsetField, ScalarField, Space, ZoomLossConfig,
    ZoomProblem,
};

use crate::annotations::{CategoryRecord, Scene};
use crate::error::Result;
use crate::pipeline::{run_pipeline, OutputSpec, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub min_side: usize,
    pub max_side: usize,
    pub max_boxes: usize,
    /// Offsets are drawn from N(0, offset_scale) so that samples sit off the
    /// pixel lattice.
    pub offset_scale: f64,
    pub step: f64,
    /// Offset components checked per instance.
    pub max_nodes: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 11,
            min_side: 8,
            max_side: 64,
            max_boxes: 5,
            offset_scale: 0.02,
            step: 1e-4,
            max_nodes: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradInstance {
    pub index: usize,
    pub grid: GridDims,
    pub offsets: GridDims,
    pub boxes: usize,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub instances: Vec<GradInstance>,
}

pub fn random_box(rng: &mut impl Rng, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    BBox::from_coords(x, y, x + w, y + h, Space::Original).expect("box lies inside the unit square")
}

/// Compare analytic and central-difference gradients on seeded random
/// problems, mixing full-resolution and low-resolution offset fields.
pub fn check_gradients(cfg: &GradCheckConfig, loss: &ZoomLossConfig) -> Result<GradCheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = GradCheckSummary {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        instances: Vec::with_capacity(cfg.instances),
    };
    for index in 0..cfg.instances {
        let side = |rng: &mut ChaCha8Rng| rng.random_range(cfg.min_side..=cfg.max_side);
        let dims = GridDims::new(side(&mut rng), side(&mut rng))?;
        let factor = [1, 2, 4, 8][rng.random_range(0..4)];
        let odims = dims.downscaled(factor);
        let n_boxes = rng.random_range(1..=cfg.max_boxes);
        let boxes: Vec<BBox> = (0..n_boxes).map(|_| random_box(&mut rng, 0.1, 0.5)).collect();
        let mut draw = |_, _| cfg.offset_scale * (rng.random::<f64>() * 2.0 - 1.0);
        let dx = ScalarField::from_fn(odims, &mut draw);
        let dy = ScalarField::from_fn(odims, &mut draw);
        let offsets = OffsetField::new(dx, dy)?;
        let problem = ZoomProblem::new(&boxes, make_uniform_grid(dims), *loss)?;
        let report = finite_diff_check_problem(
            &problem,
            &offsets,
            &FdOptions {
                step: cfg.step,
                max_nodes: Some(cfg.max_nodes),
                ..FdOptions::default()
            },
        )?;
        summary.max_rel_error = summary.max_rel_error.max(report.max_rel_error);
        summary.checked += report.checked;
        summary.skipped += report.skipped;
        summary.instances.push(GradInstance {
            index,
            grid: dims,
            offsets: odims,
            boxes: n_boxes,
            max_rel_error: report.max_rel_error,
            checked: report.checked,
            skipped: report.skipped,
        });
    }
    Ok(summary)
}

/// IoU of a `w`×`h` box with its copy translated by `tau` along `theta`,
/// measured on actual boxes. Sides up to 0.5 and `tau` up to 0.25 fit.
pub fn translated_iou(w: f64, h: f64, tau: f64, theta: f64) -> f64 {
    let (sx, sy) = (tau * theta.cos(), tau * theta.sin());
    let make = |x: f64, y: f64| BBox::from_coords(x, y, x + w, y + h, Space::Original);
    match (make(0.25, 0.25), make(0.25 + sx, 0.25 + sy)) {
        (Ok(p), Ok(q)) => p.iou(&q),
        _ => analytic_translated_iou(w, h, sx, sy),
    }
}

fn analytic_translated_iou(w: f64, h: f64, sx: f64, sy: f64) -> f64 {
    let inter = (w - sx.abs()).max(0.0) * (h - sy.abs()).max(0.0);
    inter / (2.0 * w * h - inter)
}

/// First-order worst-case IoU when both corners move by `tau` along `theta`.
pub fn linearized_worst_iou(w: f64, h: f64, tau: f64, theta: f64) -> f64 {
    let s = tau * (h * theta.cos() + w * theta.sin());
    (w * h - s) / (w * h + s)
}

/// Worst-case IoU keeping the second-order term of the intersection.
pub fn full_worst_iou(w: f64, h: f64, tau: f64, theta: f64) -> f64 {
    let inter = (w - tau * theta.cos()).max(0.0) * (h - tau * theta.sin()).max(0.0);
    inter / (2.0 * w * h - inter)
}

/// Minimum of `f` over `[0, pi/2]`: dense sweep, then golden-section
/// refinement around the best sample.
pub fn sweep_min(f: impl Fn(f64) -> f64, samples: usize) -> (f64, f64) {
    let step = FRAC_PI_2 / samples as f64;
    let best = (0..=samples)
        .map(|k| k as f64 * step)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("at least one sample");
    let (mut lo, mut hi) = ((best - step).max(0.0), (best + step).min(FRAC_PI_2));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let t = 0.5 * (lo + hi);
    let candidates = [t, 0.0, FRAC_PI_2];
    candidates
        .iter()
        .map(|&t| (t, f(t)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub min_side: f64,
    pub max_side: f64,
    /// Largest `tau` as a fraction of the shorter side.
    pub max_tau_frac: f64,
    pub sweep_samples: usize,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            instances: 10_000,
            seed: 13,
            min_side: 0.01,
            max_side: 0.5,
            max_tau_frac: 0.5,
            sweep_samples: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundViolation {
    pub w: f64,
    pub h: f64,
    pub tau: f64,
    pub theta: f64,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckSummary {
    pub instances: usize,
    /// Measured IoU below the exact bound (beyond rounding).
    pub violations: Vec<BoundViolation>,
    /// Smallest `measured - bound` margin seen.
    pub min_margin: f64,
    /// Largest |sweep minimum - closed form| of the first-order expression.
    pub max_sweep_error: f64,
    /// Instances where the second-order worst case fell below the closed form.
    pub full_below_closed_form: usize,
    pub spot_exact: f64,
    pub spot_approx: f64,
}

impl BoundCheckSummary {
    pub fn passed(&self, sweep_tol: f64) -> bool {
        self.violations.is_empty() && self.max_sweep_error < sweep_tol && self.full_below_closed_form == 0
    }
}

/// Random corner-displacement instances against the closed-form bound.
pub fn verify_bound(cfg: &BoundCheckConfig) -> BoundCheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut violations = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut max_sweep_error: f64 = 0.0;
    let mut full_below = 0;
    for _ in 0..cfg.instances {
        let w = rng.random_range(cfg.min_side..cfg.max_side);
        let h = rng.random_range(cfg.min_side..cfg.max_side);
        let tau = rng.random_range(0.0..cfg.max_tau_frac * w.min(h));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let measured = translated_iou(w, h, tau, theta);
        let bound = iou_lower_bound(w, h, tau);
        let margin = measured - bound.exact;
        min_margin = min_margin.min(margin);
        if margin < -1e-12 {
            violations.push(BoundViolation {
                w,
                h,
                tau,
                theta,
                measured,
                bound: bound.exact,
            });
        }
        if !bound.saturated {
            let (_, lin) = sweep_min(|t| linearized_worst_iou(w, h, tau, t), cfg.sweep_samples);
            max_sweep_error = max_sweep_error.max((lin - bound.exact).abs());
            let (_, full) = sweep_min(|t| full_worst_iou(w, h, tau, t), cfg.sweep_samples);
            if full < bound.exact - 1e-12 {
                full_below += 1;
            }
        }
    }
    let spot = iou_lower_bound(0.1, 0.1, 0.005);
    BoundCheckSummary {
        instances: cfg.instances,
        violations,
        min_margin,
        max_sweep_error,
        full_below_closed_form: full_below,
        spot_exact: spot.exact,
        spot_approx: spot.approx,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub parametrization: Parametrization,
    pub mean_iou: Option<f64>,
    pub zr: Vec<ClassZr>,
    /// Mean Jacobian determinant over nodes sampling inside / outside boxes,
    /// averaged over scenes.
    pub det_inside: Option<f64>,
    pub det_outside: Option<f64>,
    /// Mean within-scene variance of the determinant outside boxes.
    pub det_outside_variance: Option<f64>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenes: usize,
    pub results: Vec<ParamSummary>,
}

/// Run both parametrizations on the same scenes, in memory.
pub fn compare_parametrizations(
    scenes: &[Scene],
    cfg: &RunConfig,
    categories: &[CategoryRecord],
) -> Result<Comparison> {
    let mut results = Vec::new();
    for p in [Parametrization::Offset, Parametrization::Saliency] {
        let run_cfg = RunConfig {
            parametrization: p,
            ..cfg.clone()
        };
        let out = run_pipeline(scenes, &run_cfg, categories, &OutputSpec::default())?;
        let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        let with_boxes: Vec<_> = out.reports.iter().filter(|r| !r.boxes.is_empty()).collect();
        results.push(ParamSummary {
            parametrization: p,
            mean_iou: out.report.mean_iou,
            zr: out.report.zr.clone(),
            det_inside: mean(with_boxes.iter().filter_map(|r| r.distortion.inside.map(|m| m.mean)).collect()),
            det_outside: mean(with_boxes.iter().filter_map(|r| r.distortion.outside.map(|m| m.mean)).collect()),
            det_outside_variance: mean(
                with_boxes.iter().filter_map(|r| r.distortion.outside.map(|m| m.variance)).collect(),
            ),
            failed: out.report.failed,
        });
    }
    Ok(Comparison {
        scenes: scenes.len(),
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let b = iou_lower_bound(0.1, 0.1, 0.005);
        assert!((b.exact - 0.8679).abs() < 1e-4);
        assert!((b.approx - 0.8586).abs() < 1e-4);
    }

    #[test]
    fn translated_iou_matches_analytic_form() {
        for &(w, h, tau, th) in &[(0.1, 0.2, 0.01, 0.3), (0.3, 0.05, 0.02, 2.0), (0.2, 0.2, 0.0, 1.0)] {
            let a = translated_iou(w, h, tau, th);
            let b = analytic_translated_iou(w, h, tau * f64::cos(th), tau * f64::sin(th));
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sweep_finds_interior_minimum() {
        let (t, v) = sweep_min(|t| (t - 0.7).powi(2), 64);
        assert!((t - 0.7).abs() < 1e-6 && v < 1e-12);
        let (_, v) = sweep_min(|t| linearized_worst_iou(0.1, 0.1, 0.005, t), 256);
        assert!((v - iou_lower_bound(0.1, 0.1, 0.005).exact).abs() < 1e-9);
    }

    #[test]
    fn small_bound_run_passes() {
        let s = verify_bound(&BoundCheckConfig {
            instances: 300,
            ..BoundCheckConfig::default()
        });
        assert!(s.passed(1e-6), "{s:?}");
    }

    #[test]
    fn small_gradient_run() {
        let s = check_gradients(
            &GradCheckConfig {
                instances: 3,
                max_side: 24,
                ..GradCheckConfig::default()
            },
            &ZoomLossConfig::default(),
        )
        .unwrap();
        assert!(s.checked > 0);
        assert!(s.max_rel_error < 1e-4, "{s:?}");
    }
}
