//! Non-uniform image zooming driven by an object-zooming loss.
//!
//! The mapping from zoomed (output) space to original space is the identity
//! grid plus a smooth offset field. Offsets are optimized so that annotated
//! boxes are magnified, and boxes are carried between the two spaces by
//! their corners: forward through a nearest-neighbour inverse lookup,
//! backward through bilinear interpolation of the grid.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: normalized coordinates, fields, offset fields, grids.
//! - [`warp`]: bilinear sampling, image warping, grid Jacobians.
//! - [`saliency`]: the saliency-weighted grid used as a baseline.
//! - [`zoom_objective`]: box masks, zoom ratio, loss and its gradient.
//! - [`offset_solver`]: per-image momentum descent on the offset field.
//! - [`box_transform`]: inverse index, box transforms, IoU bound.
//! - [`metrics`]: ZR, distortion and scene reports.
//!
//! Row loops run on rayon with the default `parallel` feature; see [`Exec`].

pub mod box_transform;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod metrics;
pub mod offset_solver;
pub mod saliency;
pub mod warp;
pub mod zoom_objective;

pub use box_transform::{
    backward_box_transform, build_inverse_index, forward_box_transform, iou_lower_bound, roundtrip,
    roundtrip_iou, ForwardBox, InverseIndex, IouBound, RoundTrip,
};
pub use error::{Error, Result};
pub use exec::Exec;
pub use geometry::{
    apply_offsets, make_uniform_grid, upsample_offsets, GridDims, NormCoord, OffsetField, SamplingGrid,
    ScalarField,
};
pub use metrics::{compute_zr, distortion_stats, emit_report, parse_report, GridSummary, SceneReport, SizeClass, SizeClasses};
pub use offset_solver::{backproject_gradient, optimize_offsets, optimize_offsets_with, SolveResult, SolverConfig, TracePoint};
pub use saliency::{saliency_grid, GaussianKernelConfig, SaliencyMap};
pub use warp::{bilinear_sample, jacobian_field, warp_image, Image};
pub use zoom_objective::{
    finite_diff_check, rasterize_box_mask, zoom_loss, zoom_loss_gradient, zoom_ratio, BBox, BoxMask,
    GradField, Space, ZoomLossConfig, ZoomProblem,
};
