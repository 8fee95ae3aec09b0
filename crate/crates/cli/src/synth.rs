//! Deterministic synthetic scenes: sparse, mostly small boxes on a textured
//! background.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use zoomwarp::{BBox, GridDims, Image, ScalarField, Space};

use crate::annotations::{to_annotation_file, write_annotation_file, CategoryRecord, Scene};
use crate::error::{io_err, Result};
use crate::image_io::save_png;

/// Box side-length distribution, in pixels of a 1000-pixel reference canvas
/// side (scaled to the actual canvas).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SizeProfile {
    /// Almost all boxes small, as in maritime search-and-rescue footage.
    SeadronesseeLike,
    /// Mostly small with a medium tail.
    VisdroneLike,
    /// Side lengths uniform over a broad range.
    Uniform,
}

impl SizeProfile {
    fn side(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            SizeProfile::SeadronesseeLike => LogNormal::new(45f64.ln(), 0.35).unwrap().sample(rng).clamp(20.0, 160.0),
            SizeProfile::VisdroneLike => LogNormal::new(70f64.ln(), 0.5).unwrap().sample(rng).clamp(20.0, 300.0),
            SizeProfile::Uniform => rng.random_range(20.0..300.0),
        }
    }
}

impl fmt::Display for SizeProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeProfile::SeadronesseeLike => "seadronessee-like",
            SizeProfile::VisdroneLike => "visdrone-like",
            SizeProfile::Uniform => "uniform",
        })
    }
}

impl FromStr for SizeProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "seadronessee-like" => Ok(SizeProfile::SeadronesseeLike),
            "visdrone-like" => Ok(SizeProfile::VisdroneLike),
            "uniform" => Ok(SizeProfile::Uniform),
            other => Err(format!("unknown size profile {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub profile: SizeProfile,
    /// Largest IoU allowed between two placed boxes; 0 forbids any overlap.
    pub max_overlap: f64,
    /// Placement attempts per box before giving up.
    pub max_attempts: usize,
    /// Keep boxes at least this far (normalized) from the image border.
    pub margin: f64,
    /// Lower limit on a box side in canvas pixels.
    pub min_side_px: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 7,
            width: 512,
            height: 512,
            min_boxes: 1,
            max_boxes: 5,
            profile: SizeProfile::SeadronesseeLike,
            max_overlap: 0.0,
            max_attempts: 200,
            margin: 0.02,
            min_side_px: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    /// Fewer boxes than requested could be placed.
    pub truncated: bool,
    pub requested: usize,
}

fn overlaps(a: &BBox, b: &BBox, max_overlap: f64) -> bool {
    let iou = a.iou(b);
    if max_overlap <= 0.0 {
        let iw = a.c2().x.min(b.c2().x) - a.c1().x.max(b.c1().x);
        let ih = a.c2().y.min(b.c2().y) - a.c1().y.max(b.c1().y);
        iw > 0.0 && ih > 0.0
    } else {
        iou > max_overlap
    }
}

/// Generate `cfg.count` scenes, ids starting at 1. Scene `k` depends only on
/// the seed and `k`.
pub fn synth_scenes(cfg: &SynthConfig) -> Vec<SynthScene> {
    (0..cfg.count).map(|k| synth_scene(cfg, k)).collect()
}

fn synth_scene(cfg: &SynthConfig, k: usize) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ k as u64);
    let requested = rng.random_range(cfg.min_boxes..=cfg.max_boxes.max(cfg.min_boxes));
    let scale = cfg.width.max(cfg.height) as f64 / 1000.0;
    let mut boxes: Vec<BBox> = Vec::new();
    let mut truncated = false;
    'boxes: for _ in 0..requested {
        for _ in 0..cfg.max_attempts {
            let side = cfg.profile.side(&mut rng) * scale;
            let aspect = rng.random_range(0.6..1.6f64);
            let w = ((side * aspect.sqrt()).max(cfg.min_side_px) / cfg.width as f64).min(0.9);
            let h = ((side / aspect.sqrt()).max(cfg.min_side_px) / cfg.height as f64).min(0.9);
            let m = cfg.margin;
            if w + 2.0 * m >= 1.0 || h + 2.0 * m >= 1.0 {
                continue;
            }
            let x1 = rng.random_range(m..1.0 - m - w);
            let y1 = rng.random_range(m..1.0 - m - h);
            let Ok(b) = BBox::from_coords(x1, y1, x1 + w, y1 + h, Space::Original) else {
                continue;
            };
            if boxes.iter().any(|o| overlaps(o, &b, cfg.max_overlap)) {
                continue;
            }
            boxes.push(b);
            continue 'boxes;
        }
        truncated = true;
        break;
    }
    let categories = boxes.iter().map(|_| rng.random_range(1..=3u64)).collect();
    SynthScene {
        scene: Scene {
            id: k as u64 + 1,
            image_path: None,
            file_name: Some(format!("scene_{:05}.png", k + 1)),
            width: cfg.width,
            height: cfg.height,
            boxes,
            categories,
        },
        truncated,
        requested,
    }
}

/// Procedural RGB texture with the boxes drawn as bright, ringed targets,
/// so warps are easy to inspect.
pub fn render_scene(scene: &Scene) -> Image {
    let dims = GridDims::new(scene.height as usize, scene.width as usize).expect("scene dims >= 2");
    let seed = scene.id as f64;
    let (w, h) = (scene.width as f64, scene.height as f64);
    let inside = |x: f64, y: f64| -> Option<(usize, f64)> {
        scene.boxes.iter().enumerate().find_map(|(k, b)| {
            let (u, v) = ((x - b.c1().x) / b.width(), (y - b.c1().y) / b.height());
            ((0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v)).then(|| {
                let edge = u.min(v).min(1.0 - u).min(1.0 - v);
                (k, edge)
            })
        })
    };
    let channel = |c: usize| {
        ScalarField::from_fn(dims, |i, j| {
            let (x, y) = ((j as f64 + 0.5) / w, (i as f64 + 0.5) / h);
            if let Some((k, edge)) = inside(x, y) {
                return if edge < 0.12 {
                    [1.0, 0.9, 0.1][c]
                } else {
                    [0.95, 0.3 + 0.2 * (k % 3) as f64, 0.2][c]
                };
            }
            let waves = 0.5 + 0.25 * ((x * 23.0 + seed).sin() * (y * 17.0 - seed).cos());
            let checker = if ((x * 16.0).floor() + (y * 16.0).floor()) as i64 % 2 == 0 { 0.08 } else { 0.0 };
            let tint = [0.35, 0.5, 0.7][c];
            (tint * waves + checker).clamp(0.0, 1.0)
        })
    };
    Image::new(vec![channel(0), channel(1), channel(2)]).expect("finite texture")
}

pub fn synth_categories() -> Vec<CategoryRecord> {
    ["boat", "swimmer", "buoy"]
        .iter()
        .zip(1u64..)
        .map(|(name, id)| CategoryRecord { id, name: name.to_string() })
        .collect()
}

/// Write rendered images (when `images`) and `annotations.json` into `dir`;
/// returns the annotation path.
pub fn write_dataset(dir: &Path, scenes: &[SynthScene], images: bool) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut plain: Vec<Scene> = scenes.iter().map(|s| s.scene.clone()).collect();
    for scene in &mut plain {
        if !images {
            scene.file_name = None;
            continue;
        }
        if let Some(name) = &scene.file_name {
            save_png(&dir.join(name), &render_scene(scene))?;
        }
    }
    let path = dir.join("annotations.json");
    write_annotation_file(&path, &to_annotation_file(&plain, &synth_categories()))?;
    Ok(path)
}
