//! The zoom pipeline: optimize (or build) a sampling grid per scene, warp the
//! image, transform the boxes and report.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomwarp::metrics::{box_records, emit_report, ClassZr, Parametrization, SizeClass};
use zoomwarp::offset_solver::optimize_offsets_with;
use zoomwarp::saliency::gaussian_blur;
use zoomwarp::{
    apply_offsets, make_uniform_grid, rasterize_box_mask, saliency_grid, upsample_offsets, warp_image, Exec,
    GaussianKernelConfig, GridDims, Image, OffsetField, SaliencyMap, SamplingGrid, ScalarField, SceneReport,
    SizeClasses, SolverConfig, ZoomLossConfig,
};

use crate::annotations::{
    norm_box_to_pixel, write_annotation_file, AnnotationFile, AnnotationRecord, CategoryRecord, ImageRecord, Scene,
};
use crate::error::{error_chain, io_err, Result};
use crate::image_io::{load_image, save_png};
use crate::offset_io::write_offset_field;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub parametrization: Parametrization,
    pub loss: ZoomLossConfig,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub init_scale: f64,
    pub seed: u64,
    /// Output resolution divided by offset-grid resolution.
    pub offset_scale: usize,
    /// Processing resolution `(height, width)`; derived from the scene when unset.
    pub resolution: Option<(usize, usize)>,
    /// Longest side of a derived processing resolution.
    pub max_side: usize,
    pub classes: SizeClasses,
    pub kernel: GaussianKernelConfig,
    /// Saliency grid resolution relative to the output.
    pub saliency_scale: usize,
    /// Blur applied to rasterized boxes, in saliency-grid nodes.
    pub saliency_blur: f64,
    /// Added to the saliency map, relative to its maximum.
    pub saliency_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let solver = SolverConfig::for_output(GridDims::new(2, 2).expect("valid"));
        Self {
            parametrization: Parametrization::Offset,
            loss: solver.loss,
            steps: solver.steps,
            learning_rate: solver.learning_rate,
            momentum: solver.momentum,
            init_scale: solver.init_scale,
            seed: solver.seed,
            offset_scale: 8,
            resolution: None,
            max_side: 1024,
            classes: SizeClasses::default(),
            kernel: GaussianKernelConfig::default(),
            saliency_scale: 4,
            saliency_blur: 1.0,
            saliency_floor: 0.05,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(zoomwarp::Error::InvalidConfig(msg).into());
        if self.offset_scale < 1 || self.saliency_scale < 1 {
            return bad("grid scales must be >= 1".into());
        }
        if self.max_side < 2 {
            return bad(format!("max side {} must be >= 2", self.max_side));
        }
        if !self.classes.is_valid() {
            return bad("size-class thresholds must satisfy 0 < small < medium".into());
        }
        if !(self.saliency_blur >= 0.0 && self.saliency_floor >= 0.0) {
            return bad("saliency blur and floor must be >= 0".into());
        }
        if let Some((h, w)) = self.resolution {
            GridDims::new(h, w)?;
        }
        self.kernel.validate()?;
        self.solver_config(GridDims::new(2, 2)?).validate()?;
        Ok(())
    }

    pub fn processing_dims(&self, scene: &Scene) -> Result<GridDims> {
        if let Some((h, w)) = self.resolution {
            return Ok(GridDims::new(h, w)?);
        }
        let longest = scene.width.max(scene.height) as f64;
        let scale = (self.max_side as f64 / longest).min(1.0);
        let side = |v: u32| ((v as f64 * scale).round() as usize).max(2);
        Ok(GridDims::new(side(scene.height), side(scene.width))?)
    }

    pub fn solver_config(&self, out: GridDims) -> SolverConfig {
        SolverConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            offset_dims: out.downscaled(self.offset_scale),
            loss: self.loss,
            seed: self.seed,
            init_scale: self.init_scale,
            ..SolverConfig::for_output(out)
        }
    }
}

/// In-memory results for one scene.
#[derive(Debug, Clone)]
pub struct SceneArtifacts {
    pub dims: GridDims,
    /// Offsets at their optimized resolution; for saliency grids, the grid
    /// minus the identity at full resolution.
    pub offsets: OffsetField,
    pub offset_scale: f64,
    pub grid: SamplingGrid,
    pub report: SceneReport,
    pub warped: Option<Image>,
}

fn saliency_from_boxes(scene: &Scene, out: GridDims, cfg: &RunConfig) -> Result<SamplingGrid> {
    let sdims = out.downscaled(cfg.saliency_scale);
    let mut acc = ScalarField::zeros(sdims);
    for b in &scene.boxes {
        let m = rasterize_box_mask(b, sdims)?;
        for (a, v) in acc.as_mut_slice().iter_mut().zip(m.values().as_slice()) {
            *a += v;
        }
    }
    let mut blurred = gaussian_blur(&acc, cfg.saliency_blur);
    let peak = blurred.as_slice().iter().cloned().fold(0.0, f64::max);
    for v in blurred.as_mut_slice() {
        *v += cfg.saliency_floor * peak;
    }
    Ok(saliency_grid(&SaliencyMap::new(blurred)?, &cfg.kernel, out)?)
}

/// Run one scene. Scenes without boxes get the identity grid.
pub fn process_scene(scene: &Scene, image: Option<&Image>, cfg: &RunConfig, exec: Exec) -> Result<SceneArtifacts> {
    let dims = cfg.processing_dims(scene)?;
    let base = make_uniform_grid(dims);
    let (grid, offsets, offset_scale, trace) = if scene.boxes.is_empty() {
        (base, OffsetField::zeros(dims.downscaled(cfg.offset_scale)), cfg.offset_scale as f64, None)
    } else {
        match cfg.parametrization {
            Parametrization::Offset => {
                let solved = optimize_offsets_with(&scene.boxes, dims, &cfg.solver_config(dims), exec)?;
                let grid = apply_offsets(&base, &upsample_offsets(&solved.offsets, dims), true)?;
                (grid, solved.offsets, cfg.offset_scale as f64, Some(solved.trace))
            }
            Parametrization::Saliency => {
                let grid = saliency_from_boxes(scene, dims, cfg)?;
                let dx = ScalarField::from_vec(
                    dims,
                    grid.u().as_slice().iter().zip(base.u().as_slice()).map(|(a, b)| a - b).collect(),
                )?;
                let dy = ScalarField::from_vec(
                    dims,
                    grid.v().as_slice().iter().zip(base.v().as_slice()).map(|(a, b)| a - b).collect(),
                )?;
                (grid, OffsetField::new(dx, dy)?, 1.0, None)
            }
        }
    };
    let records = box_records(&scene.boxes, Some(&scene.categories), &grid, &cfg.classes);
    let report = SceneReport::new(scene.id, cfg.parametrization, &grid, records, trace.as_deref());
    let warped = image.map(|img| warp_image(img, &grid));
    Ok(SceneArtifacts {
        dims,
        offsets,
        offset_scale,
        grid,
        report,
        warped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub scene_id: u64,
    pub status: SceneStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub boxes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_objective: Option<f64>,
}

/// Run-level aggregate over all boxes of all successful scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub parametrization: Parametrization,
    pub scenes: Vec<SceneSummary>,
    pub boxes: usize,
    pub mean_iou: Option<f64>,
    pub min_iou: Option<f64>,
    pub zr: Vec<ClassZr>,
    pub snapped: usize,
    /// Boxes whose round-trip IoU fell below the bound at their displacement.
    pub bound_violations: usize,
    pub failed: usize,
}

impl RunReport {
    pub fn zr_mean(&self, class: SizeClass) -> Option<f64> {
        self.zr.iter().find(|c| c.class == class).and_then(|c| c.mean)
    }
}

pub struct RunOutput {
    pub report: RunReport,
    pub reports: Vec<SceneReport>,
    pub artifacts: Vec<Option<SceneArtifacts>>,
}

pub fn summarize(parametrization: Parametrization, summaries: Vec<SceneSummary>, reports: &[SceneReport]) -> RunReport {
    let records: Vec<_> = reports.iter().flat_map(|r| r.boxes.iter()).collect();
    let n = records.len();
    let mut zr_acc = [(0.0, 0usize); 3];
    for r in records.iter().filter(|r| !r.boundary_snapped) {
        let slot = &mut zr_acc[r.size_class as usize];
        slot.0 += r.zr;
        slot.1 += 1;
    }
    RunReport {
        parametrization,
        failed: summaries.iter().filter(|s| s.status == SceneStatus::Failed).count(),
        scenes: summaries,
        boxes: n,
        mean_iou: (n > 0).then(|| records.iter().map(|r| r.roundtrip_iou).sum::<f64>() / n as f64),
        min_iou: (n > 0).then(|| records.iter().map(|r| r.roundtrip_iou).fold(f64::INFINITY, f64::min)),
        zr: SizeClass::ALL
            .iter()
            .map(|&class| {
                let (sum, count) = zr_acc[class as usize];
                ClassZr {
                    class,
                    mean: (count > 0).then(|| sum / count as f64),
                    count,
                }
            })
            .collect(),
        snapped: records.iter().filter(|r| r.boundary_snapped).count(),
        bound_violations: records.iter().filter(|r| r.roundtrip_iou < r.iou_bound).count(),
    }
}

/// Where per-scene files go; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    pub keep_artifacts: bool,
}

fn scene_stem(id: u64) -> String {
    format!("scene_{id:05}")
}

fn write_scene(dir: &Path, scene: &Scene, art: &SceneArtifacts, categories: &[CategoryRecord]) -> Result<()> {
    let stem = scene_stem(scene.id);
    write_offset_field(&dir.join(format!("{stem}.offsets")), &art.offsets, art.offset_scale)?;
    let report_path = dir.join(format!("{stem}.report.json"));
    fs::write(&report_path, emit_report(&art.report)).map_err(io_err(&report_path))?;
    let file_name = art.warped.as_ref().map(|_| format!("{stem}.zoomed.png"));
    if let (Some(img), Some(name)) = (&art.warped, &file_name) {
        save_png(&dir.join(name), img)?;
    }
    let (w, h) = (art.dims.width() as u32, art.dims.height() as u32);
    let zoomed = AnnotationFile {
        images: vec![ImageRecord {
            id: scene.id,
            width: w,
            height: h,
            file_name,
        }],
        annotations: art
            .report
            .boxes
            .iter()
            .map(|r| AnnotationRecord {
                id: Some(r.index as u64 + 1),
                image_id: scene.id,
                bbox: norm_box_to_pixel(&r.zoomed, w, h).to_vec(),
                category_id: r.category.unwrap_or(0),
            })
            .collect(),
        categories: categories.to_vec(),
    };
    write_annotation_file(&dir.join(format!("{stem}.zoomed.json")), &zoomed)
}

/// Process every scene on the worker pool, in scene-id order. Per-scene
/// failures are recorded, not propagated; the caller maps
/// `report.failed > 0` to a failing exit.
pub fn run_pipeline(
    scenes: &[Scene],
    cfg: &RunConfig,
    categories: &[CategoryRecord],
    output: &OutputSpec,
) -> Result<RunOutput> {
    if let Some(dir) = &output.dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut ordered: Vec<&Scene> = scenes.iter().collect();
    ordered.sort_by_key(|s| s.id);
    let outcomes = Exec::default().map_items(&ordered, |&scene| {
        let run = || -> Result<SceneArtifacts> {
            let image = scene.image_path.as_deref().map(load_image).transpose()?;
            let art = process_scene(scene, image.as_ref(), cfg, Exec::Sequential)?;
            if let Some(dir) = &output.dir {
                write_scene(dir, scene, &art, categories)?;
            }
            Ok(art)
        };
        run()
    });

    let mut summaries = Vec::with_capacity(scenes.len());
    let mut reports = Vec::new();
    let mut artifacts = Vec::new();
    for (scene, outcome) in ordered.into_iter().zip(outcomes) {
        match outcome {
            Ok(art) => {
                let status = if scene.boxes.is_empty() {
                    log::warn!("scene {}: no boxes, skipped by the solver", scene.id);
                    SceneStatus::Skipped
                } else {
                    SceneStatus::Ok
                };
                summaries.push(SceneSummary {
                    scene_id: scene.id,
                    status,
                    error: None,
                    boxes: scene.boxes.len(),
                    mean_iou: art.report.aggregates.as_ref().map(|a| a.mean_iou),
                    initial_objective: art.report.trace.as_ref().map(|t| t.initial_objective),
                    final_objective: art.report.trace.as_ref().map(|t| t.final_objective),
                });
                reports.push(art.report.clone());
                artifacts.push(output.keep_artifacts.then_some(art));
            }
            Err(e) => {
                let msg = error_chain(&e);
                log::error!("scene {}: {msg}", scene.id);
                summaries.push(SceneSummary {
                    scene_id: scene.id,
                    status: SceneStatus::Failed,
                    error: Some(msg),
                    boxes: scene.boxes.len(),
                    mean_iou: None,
                    initial_objective: None,
                    final_objective: None,
                });
                artifacts.push(None);
            }
        }
    }
    let report = summarize(cfg.parametrization, summaries, &reports);
    if let Some(dir) = &output.dir {
        let path = dir.join("run_report.json");
        fs::write(&path, emit_report(&report)).map_err(io_err(&path))?;
    }
    Ok(RunOutput {
        report,
        reports,
        artifacts,
    })
}
