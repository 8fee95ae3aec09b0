use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::json;
use zoomwarp::metrics::{parse_report, Parametrization, SizeClass};
use zoomwarp::Exec;
use zoomwarp_cli::annotations::{ingest_annotations, to_annotation_file, write_annotation_file, AnnotationFile};
use zoomwarp_cli::offset_io::read_offset_field;
use zoomwarp_cli::pipeline::{process_scene, run_pipeline, OutputSpec, RunConfig, SceneStatus};
use zoomwarp_cli::synth::{synth_categories, synth_scenes, write_dataset, SynthConfig};
use zoomwarp_cli::CliError;

fn write_json(path: &Path, value: serde_json::Value) {
    fs::write(path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn small_synth(count: usize) -> SynthConfig {
    SynthConfig {
        count,
        width: 96,
        height: 80,
        ..SynthConfig::default()
    }
}

#[test]
fn ingest_converts_rejects_and_keeps_empty_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ann.json");
    write_json(
        &path,
        json!({
            "images": [
                {"id": 1, "width": 1000, "height": 500},
                {"id": 2, "width": 64, "height": 64}
            ],
            "annotations": [
                {"image_id": 1, "bbox": [100, 50, 200, 100], "category_id": 3},
                {"image_id": 1, "bbox": [10, 10, 0, 20], "category_id": 1}
            ],
            "categories": [{"id": 1, "name": "a"}, {"id": 3, "name": "c"}]
        }),
    );
    let ing = ingest_annotations(&path).unwrap();
    assert_eq!(ing.scenes.len(), 2);
    let b = ing.scenes[0].boxes[0];
    for (got, want) in [(b.c1().x, 0.1), (b.c1().y, 0.1), (b.c2().x, 0.3), (b.c2().y, 0.3)] {
        assert!((got - want).abs() < 1e-15);
    }
    assert_eq!(ing.scenes[0].boxes.len(), 1);
    assert_eq!(ing.scenes[0].categories, vec![3]);
    assert!(ing.scenes[1].boxes.is_empty());
    assert!(ing.warnings.iter().any(|w| w.contains("zero-area")));
    assert!(ing.warnings.iter().any(|w| w.contains("no boxes")));

    let out = run_pipeline(&ing.scenes, &RunConfig::default(), &ing.categories, &OutputSpec::default()).unwrap();
    assert_eq!(out.report.failed, 0);
    assert_eq!(out.report.scenes[1].status, SceneStatus::Skipped);
}

#[test]
fn malformed_records_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    write_json(
        &path,
        json!({
            "images": [{"id": 1, "width": 10, "height": 10}],
            "annotations": [
                {"image_id": 1, "bbox": [1, 1, 2, 2], "category_id": 1},
                {"image_id": 1, "bbox": [1, 1, 2], "category_id": 1}
            ]
        }),
    );
    match ingest_annotations(&path) {
        Err(CliError::Record { kind, index, .. }) => assert_eq!((kind, index), ("annotation", 1)),
        other => panic!("unexpected {other:?}"),
    }

    write_json(&path, json!({"images": [{"id": 1, "width": "ten", "height": 10}], "annotations": []}));
    assert!(matches!(ingest_annotations(&path), Err(CliError::Record { kind: "image", index: 0, .. })));
    fs::write(&path, "{ not json").unwrap();
    assert!(matches!(ingest_annotations(&path), Err(CliError::Json { .. })));
}

#[test]
fn image_dims_must_match_declaration() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_scenes(&small_synth(1));
    let ann = write_dataset(dir.path(), &synth, true).unwrap();
    let mut file: AnnotationFile = serde_json::from_str(&fs::read_to_string(&ann).unwrap()).unwrap();
    file.images[0].width += 1;
    write_annotation_file(&ann, &file).unwrap();
    assert!(matches!(ingest_annotations(&ann), Err(CliError::ImageDims { .. })));
}

#[test]
fn annotations_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let synth: Vec<_> = synth_scenes(&SynthConfig {
        count: 20,
        width: 1333,
        height: 800,
        ..SynthConfig::default()
    })
    .into_iter()
    .map(|s| s.scene)
    .collect();
    let path = dir.path().join("rt.json");
    write_annotation_file(&path, &to_annotation_file(&synth, &synth_categories())).unwrap();
    let back = ingest_annotations(&path).unwrap();
    assert_eq!(back.scenes.len(), synth.len());
    for (a, b) in synth.iter().zip(&back.scenes) {
        assert_eq!(a.boxes.len(), b.boxes.len());
        assert_eq!(a.categories, b.categories);
        for (p, q) in a.boxes.iter().zip(&b.boxes) {
            for (u, v) in [(p.c1().x, q.c1().x), (p.c1().y, q.c1().y), (p.c2().x, q.c2().x), (p.c2().y, q.c2().y)] {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn pipeline_writes_artifacts_and_shrinks_loss() {
    let dir = tempfile::tempdir().unwrap();
    let synth = synth_scenes(&SynthConfig {
        min_boxes: 1,
        max_boxes: 1,
        ..small_synth(2)
    });
    let ann = write_dataset(&dir.path().join("data"), &synth, true).unwrap();
    let ing = ingest_annotations(&ann).unwrap();
    let out_dir = dir.path().join("out");
    let spec = OutputSpec {
        dir: Some(out_dir.clone()),
        keep_artifacts: true,
    };
    let out = run_pipeline(&ing.scenes, &RunConfig::default(), &ing.categories, &spec).unwrap();
    assert_eq!(out.report.failed, 0);
    for scene in &ing.scenes {
        let stem = out_dir.join(format!("scene_{:05}", scene.id));
        let report = parse_report(&fs::read_to_string(stem.with_extension("report.json")).unwrap()).unwrap();
        let trace = report.trace.unwrap();
        assert!(trace.final_objective < trace.initial_objective);
        assert!(report.boxes.iter().all(|b| b.zr > 1.0));
        assert!(stem.with_extension("zoomed.png").is_file());

        let (header, field) = read_offset_field(&stem.with_extension("offsets")).unwrap();
        assert_eq!(header.scale, 8.0);
        let art = out.artifacts.iter().flatten().find(|a| a.report.scene_id == scene.id).unwrap();
        for (a, b) in field.dx().as_slice().iter().zip(art.offsets.dx().as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }

        let zoomed = ingest_annotations(&stem.with_extension("zoomed.json")).unwrap();
        let zs = &zoomed.scenes[0];
        assert_eq!((zs.width as usize, zs.height as usize), (art.dims.width(), art.dims.height()));
        assert_eq!(zs.boxes.len(), scene.boxes.len());
        for (b, rec) in zs.boxes.iter().zip(&report.boxes) {
            assert!((b.c1().x - rec.zoomed.c1().x).abs() < 1e-9);
            assert!((b.c2().y - rec.zoomed.c2().y).abs() < 1e-9);
        }
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run_report.json")).unwrap()).unwrap();
    assert_eq!(run["scenes"].as_array().unwrap().len(), 2);
}

#[test]
fn saliency_mode_uses_the_same_report_schema() {
    let scenes: Vec<_> = synth_scenes(&small_synth(3)).into_iter().map(|s| s.scene).collect();
    let cfg = RunConfig {
        parametrization: Parametrization::Saliency,
        ..RunConfig::default()
    };
    let out = run_pipeline(&scenes, &cfg, &synth_categories(), &OutputSpec::default()).unwrap();
    assert_eq!(out.report.failed, 0);
    for r in &out.reports {
        assert_eq!(r.parametrization, Parametrization::Saliency);
        assert!(r.trace.is_none());
        assert!(r.boxes.iter().all(|b| b.zoomed.c1().x >= 0.0 && b.zoomed.c2().x <= 1.0));
    }
    assert!(out.report.zr_mean(SizeClass::Small).unwrap() > 1.0);
}

#[test]
fn scene_processing_is_mode_independent() {
    let scene = synth_scenes(&small_synth(1)).remove(0).scene;
    let cfg = RunConfig::default();
    let a = process_scene(&scene, None, &cfg, Exec::Sequential).unwrap();
    let b = process_scene(&scene, None, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.offsets, b.offsets);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_zoomwarp"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = cli()
        .args(["synth", "--count", "2", "--width", "96", "--height", "80", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let status = cli()
        .args(["run", "--annotations"])
        .arg(data.join("annotations.json"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(dir.path().join("out/run_report.json").is_file());

    let status = cli()
        .args(["run", "--annotations"])
        .arg(dir.path().join("missing.json"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = cli().args(["run", "--learning-rate=-1"]).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let out = cli().args(["verify-bound", "--instances", "500"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 violations"));

    let out = cli()
        .args(["check-gradients", "--instances", "3", "--max-side", "16"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn failing_scene_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("broken.png");
    fs::write(&bad, b"not a png").unwrap();
    let mut scenes: Vec<_> = synth_scenes(&small_synth(3)).into_iter().map(|s| s.scene).collect();
    scenes[1].image_path = Some(bad);
    let out = run_pipeline(&scenes, &RunConfig::default(), &synth_categories(), &OutputSpec::default()).unwrap();
    assert_eq!(out.report.failed, 1);
    let statuses: Vec<_> = out.report.scenes.iter().map(|s| s.status).collect();
    assert_eq!(statuses, vec![SceneStatus::Ok, SceneStatus::Failed, SceneStatus::Ok]);
    assert!(out.report.scenes[1].error.as_deref().unwrap().contains("broken.png"));
    assert_eq!(out.reports.len(), 2);
}
