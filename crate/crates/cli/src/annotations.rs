//! Scenes and the detection-style annotation file.
//!
//! The file is JSON with the usual detection-dataset layout:
//!
//! ```json
//! {
//!   "images": [{"id": 1, "width": 1000, "height": 500, "file_name": "a.png"}],
//!   "annotations": [{"id": 1, "image_id": 1, "bbox": [100, 50, 200, 100], "category_id": 3}],
//!   "categories": [{"id": 3, "name": "boat"}]
//! }
//! ```
//!
//! Boxes are `[x, y, width, height]` in pixels; internally they become
//! normalized corners `(x / W, y / H) - ((x + w) / W, (y + h) / H)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zoomwarp::{BBox, Space};

use crate::error::{io_err, CliError, Result};

/// One image and its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image_path: Option<PathBuf>,
    pub file_name: Option<String>,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
    pub categories: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub bbox: Vec<f64>,
    #[serde(default)]
    pub category_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    #[serde(default)]
    pub categories: Vec<CategoryRecord>,
}

#[derive(Deserialize)]
struct LooseFile {
    images: Vec<serde_json::Value>,
    #[serde(default)]
    annotations: Vec<serde_json::Value>,
    #[serde(default)]
    categories: Vec<CategoryRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ingested {
    pub scenes: Vec<Scene>,
    pub categories: Vec<CategoryRecord>,
    /// Rejected records and other non-fatal problems.
    pub warnings: Vec<String>,
}

/// Normalized corners of a pixel `[x, y, w, h]` box, clipped to the image.
/// `None` when nothing of positive area remains.
pub fn pixel_box_to_norm(bbox: [f64; 4], width: u32, height: u32) -> Option<BBox> {
    let [x, y, w, h] = bbox;
    let (fw, fh) = (width as f64, height as f64);
    let x1 = (x / fw).clamp(0.0, 1.0);
    let y1 = (y / fh).clamp(0.0, 1.0);
    let x2 = ((x + w) / fw).clamp(0.0, 1.0);
    let y2 = ((y + h) / fh).clamp(0.0, 1.0);
    BBox::from_coords(x1, y1, x2, y2, Space::Original).ok()
}

pub fn norm_box_to_pixel(bbox: &BBox, width: u32, height: u32) -> [f64; 4] {
    let (fw, fh) = (width as f64, height as f64);
    [
        bbox.c1().x * fw,
        bbox.c1().y * fh,
        bbox.width() * fw,
        bbox.height() * fh,
    ]
}

fn record_err(path: &Path, kind: &'static str, index: usize, reason: impl Into<String>) -> CliError {
    CliError::Record {
        path: path.to_path_buf(),
        kind,
        index,
        reason: reason.into(),
    }
}

/// Load scenes from an annotation file. Image paths are resolved relative to
/// the file's directory; missing images leave the scene annotation-only.
pub fn ingest_annotations(path: &Path) -> Result<Ingested> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let loose: LooseFile = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut warnings = Vec::new();

    let mut scenes = Vec::with_capacity(loose.images.len());
    let mut by_id = BTreeMap::new();
    for (k, value) in loose.images.into_iter().enumerate() {
        let rec: ImageRecord = serde_json::from_value(value).map_err(|e| record_err(path, "image", k, e.to_string()))?;
        if rec.width < 2 || rec.height < 2 {
            return Err(record_err(path, "image", k, format!("size {}x{} is too small", rec.width, rec.height)));
        }
        if by_id.insert(rec.id, scenes.len()).is_some() {
            return Err(record_err(path, "image", k, format!("duplicate image id {}", rec.id)));
        }
        let mut image_path = None;
        if let Some(name) = &rec.file_name {
            let p = base_dir.join(name);
            if p.is_file() {
                let (w, h) = image::image_dimensions(&p).map_err(|source| CliError::Image {
                    path: p.clone(),
                    source,
                })?;
                if (w, h) != (rec.width, rec.height) {
                    return Err(CliError::ImageDims {
                        path: p,
                        declared_w: rec.width,
                        declared_h: rec.height,
                        actual_w: w,
                        actual_h: h,
                    });
                }
                image_path = Some(p);
            } else {
                warnings.push(format!("image #{k}: {} not found, annotation-only", p.display()));
            }
        }
        scenes.push(Scene {
            id: rec.id,
            image_path,
            file_name: rec.file_name,
            width: rec.width,
            height: rec.height,
            boxes: Vec::new(),
            categories: Vec::new(),
        });
    }

    for (k, value) in loose.annotations.into_iter().enumerate() {
        let rec: AnnotationRecord =
            serde_json::from_value(value).map_err(|e| record_err(path, "annotation", k, e.to_string()))?;
        let bbox: [f64; 4] = rec
            .bbox
            .as_slice()
            .try_into()
            .map_err(|_| record_err(path, "annotation", k, format!("bbox has {} values, expected 4", rec.bbox.len())))?;
        if bbox.iter().any(|v| !v.is_finite()) {
            return Err(record_err(path, "annotation", k, "bbox has non-finite values"));
        }
        let Some(&slot) = by_id.get(&rec.image_id) else {
            return Err(record_err(path, "annotation", k, format!("unknown image id {}", rec.image_id)));
        };
        let scene = &mut scenes[slot];
        match pixel_box_to_norm(bbox, scene.width, scene.height) {
            Some(b) if bbox[2] > 0.0 && bbox[3] > 0.0 => {
                scene.boxes.push(b);
                scene.categories.push(rec.category_id);
            }
            _ => {
                let msg = format!("annotation #{k}: zero-area box {bbox:?} rejected");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    for s in &scenes {
        if s.boxes.is_empty() {
            warnings.push(format!("image {}: no boxes", s.id));
        }
    }
    Ok(Ingested {
        scenes,
        categories: loose.categories,
        warnings,
    })
}

/// Annotation file for `scenes`, boxes converted back to pixels.
pub fn to_annotation_file(scenes: &[Scene], categories: &[CategoryRecord]) -> AnnotationFile {
    let mut annotations = Vec::new();
    for s in scenes {
        for (b, &c) in s.boxes.iter().zip(&s.categories) {
            annotations.push(AnnotationRecord {
                id: Some(annotations.len() as u64 + 1),
                image_id: s.id,
                bbox: norm_box_to_pixel(b, s.width, s.height).to_vec(),
                category_id: c,
            });
        }
    }
    AnnotationFile {
        images: scenes
            .iter()
            .map(|s| ImageRecord {
                id: s.id,
                width: s.width,
                height: s.height,
                file_name: s.file_name.clone(),
            })
            .collect(),
        annotations,
        categories: categories.to_vec(),
    }
}

pub fn write_annotation_file(path: &Path, file: &AnnotationFile) -> Result<()> {
    let text = serde_json::to_string_pretty(file).expect("annotation types serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}
