//! Per-image optimization of a low-resolution offset field against the zoom
//! objective, with momentum gradient descent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{make_uniform_grid, GridDims, OffsetField, ScalarField};
use crate::zoom_objective::{BBox, GradField, ZoomLossConfig, ZoomProblem};

/// Pull a full-resolution gradient back onto a coarser grid: the exact
/// adjoint of align-corners bilinear upsampling.
pub fn backproject_gradient(full: &GradField, low_dims: GridDims) -> Result<GradField> {
    if !low_dims.fits_within(&full.dims()) {
        return Err(Error::DimsMismatch {
            expected: full.dims(),
            got: low_dims,
        });
    }
    Ok(GradField {
        d_dx: full.d_dx.resample_adjoint(low_dims),
        d_dy: full.d_dy.resample_adjoint(low_dims),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Resolution of the optimized offset field.
    pub offset_dims: GridDims,
    pub loss: ZoomLossConfig,
    pub seed: u64,
    /// Standard deviation of the Gaussian initialization; 0 starts from the
    /// identity mapping.
    pub init_scale: f64,
    /// Stop once the objective moved less than this over `patience` steps.
    pub tolerance: f64,
    pub patience: usize,
    /// Rejected steps allowed per iteration. A step that would raise the
    /// objective is retried from zero velocity at half the learning rate;
    /// 0 disables the safeguard (plain heavy-ball).
    pub max_backtracks: usize,
}

impl SolverConfig {
    pub const DEFAULT_SEED: u64 = 0x5eed;

    /// Default settings for an output grid of `out_dims`, with the offset
    /// grid at 1/8 of its resolution.
    pub fn for_output(out_dims: GridDims) -> Self {
        Self {
            steps: 200,
            learning_rate: 1e-4,
            momentum: 0.9,
            offset_dims: out_dims.downscaled(8),
            loss: ZoomLossConfig::default(),
            seed: Self::DEFAULT_SEED,
            init_scale: 0.0,
            tolerance: 1e-8,
            patience: 10,
            max_backtracks: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.steps < 1 {
            return bad("solver needs at least one step".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return bad(format!("init scale {} must be >= 0", self.init_scale));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    /// Zoom loss plus regularizer.
    pub objective: f64,
    pub mean_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub offsets: OffsetField,
    /// One point per evaluated iterate, the final field included.
    pub trace: Vec<TracePoint>,
    pub initial_ratios: Vec<f64>,
    pub final_ratios: Vec<f64>,
}

impl SolveResult {
    pub fn initial_objective(&self) -> f64 {
        self.trace[0].objective
    }

    pub fn final_objective(&self) -> f64 {
        self.trace[self.trace.len() - 1].objective
    }
}

fn initial_field(cfg: &SolverConfig) -> Result<OffsetField> {
    let dims = cfg.offset_dims;
    if cfg.init_scale == 0.0 {
        return Ok(OffsetField::zeros(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_scale)
        .map_err(|e| Error::InvalidConfig(format!("init scale: {e}")))?;
    let mut draw = |_, _| normal.sample(&mut rng);
    let dx = ScalarField::from_fn(dims, &mut draw);
    let dy = ScalarField::from_fn(dims, &mut draw);
    OffsetField::new(dx, dy)
}

/// Optimize offsets so that every box approaches magnification `alpha`.
pub fn optimize_offsets(boxes: &[BBox], out_dims: GridDims, cfg: &SolverConfig) -> Result<SolveResult> {
    optimize_offsets_with(boxes, out_dims, cfg, Exec::default())
}

pub fn optimize_offsets_with(
    boxes: &[BBox],
    out_dims: GridDims,
    cfg: &SolverConfig,
    exec: Exec,
) -> Result<SolveResult> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::NoBoxes);
    }
    if !cfg.offset_dims.fits_within(&out_dims) {
        return Err(Error::InvalidConfig(format!(
            "offset grid {} exceeds output grid {out_dims}",
            cfg.offset_dims
        )));
    }
    let problem = ZoomProblem::new(boxes, make_uniform_grid(out_dims), cfg.loss)?.with_exec(exec);
    let mut offsets = initial_field(cfg)?;
    let mut velocity = GradField::zeros(cfg.offset_dims);
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let mut lr = cfg.learning_rate;

    let (mut eval, mut grad) = problem.evaluate_with_gradient(&offsets)?;
    let objective = eval.total();
    if !objective.is_finite() || grad.max_abs().is_nan() {
        return Err(Error::Diverged { iteration: 0, objective });
    }
    let initial_ratios = eval.ratios.clone();

    for iteration in 0..=cfg.steps {
        let objective = eval.total();
        trace.push(TracePoint {
            iteration,
            objective,
            mean_ratio: eval.mean_ratio(),
        });
        let stalled = trace.len() > cfg.patience
            && (trace[trace.len() - 1 - cfg.patience].objective - objective).abs() < cfg.tolerance;
        if iteration == cfg.steps || stalled {
            break;
        }

        let mut accepted = false;
        let mut last_objective = objective;
        for _ in 0..=cfg.max_backtracks {
            let mut next_velocity = velocity.clone();
            let mut candidate = offsets.clone();
            let (dx, dy) = candidate.parts_mut();
            for (field, vel, g) in [
                (dx, &mut next_velocity.d_dx, &grad.d_dx),
                (dy, &mut next_velocity.d_dy, &grad.d_dy),
            ] {
                for ((p, v), g) in field
                    .as_mut_slice()
                    .iter_mut()
                    .zip(vel.as_mut_slice())
                    .zip(g.as_slice())
                {
                    *v = cfg.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            let (next_eval, next_grad) = problem.evaluate_with_gradient(&candidate)?;
            last_objective = next_eval.total();
            let finite = last_objective.is_finite() && !next_grad.max_abs().is_nan();
            if finite && (cfg.max_backtracks == 0 || last_objective <= objective) {
                offsets = candidate;
                velocity = next_velocity;
                eval = next_eval;
                grad = next_grad;
                accepted = true;
                break;
            }
            if !finite && cfg.max_backtracks == 0 {
                break;
            }
            velocity = GradField::zeros(cfg.offset_dims);
            lr *= 0.5;
        }
        if !accepted {
            if !last_objective.is_finite() {
                return Err(Error::Diverged {
                    iteration: iteration + 1,
                    objective: last_objective,
                });
            }
            // No descent step at any tried rate: a stationary point.
            break;
        }
    }
    Ok(SolveResult {
        offsets,
        trace,
        initial_ratios,
        final_ratios: eval.ratios,
    })
}
