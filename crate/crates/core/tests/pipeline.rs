use std::path::Path;

use protood_core::detector::NormScope;
use protood_core::pipeline::{self, ConfigOverrides, Mode, RunConfig, SweepAxis};
use protood_core::synthetic::{self, SyntheticFixture};
use protood_core::tensor_io::{read_feature_map, read_label_map, read_mask, read_rgb};
use protood_core::Error;

fn fixture() -> (tempfile::TempDir, SyntheticFixture) {
    let dir = tempfile::tempdir().unwrap();
    let f = synthetic::write_fixture(dir.path().join("data")).unwrap();
    (dir, f)
}

fn config(f: &SyntheticFixture, out: &Path, mode: Mode) -> RunConfig {
    let file = ConfigOverrides::load(&f.config).unwrap();
    RunConfig::resolve(
        ConfigOverrides {
            mode: Some(mode),
            out: Some(out.to_owned()),
            jobs: Some(2),
            ..Default::default()
        }
        .over(file),
    )
    .unwrap()
}

#[test]
fn infer_writes_declared_layout() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let cfg = config(&f, &out, Mode::Masked);
    let outcome = pipeline::infer(&cfg, &[]).unwrap();
    assert_eq!(outcome.written, ["scene-0", "scene-1", "scene-2"]);
    assert!(outcome.failures.is_empty());

    let incs = read_feature_map(out.join("scene-0/incs.pft")).unwrap();
    assert_eq!(
        (incs.dim(), incs.grid_h(), incs.grid_w(), incs.patch_size()),
        (1, 112, 112, 1)
    );
    assert_eq!(incs.image_id(), "scene-0");
    let gt = read_mask(f.root.join("gt/scene-0.png")).unwrap();
    assert_eq!(read_mask(out.join("scene-0/refined.png")).unwrap(), gt);
    let legend = (0..3u16)
        .map(|i| (i, synthetic::CLASSES[i as usize].to_owned()))
        .collect();
    let labels = read_label_map(out.join("scene-2/labels.png"), legend).unwrap();
    assert_eq!(labels.ids[[0, 0]], 2);
    assert_eq!(labels.ids[[111, 0]], 0);
}

#[test]
fn masked_ood_stays_inside_proposals() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    pipeline::infer(&config(&f, &out, Mode::Masked), &["scene-1".into()]).unwrap();
    let pixel = read_mask(out.join("scene-1/ood.png")).unwrap();
    let refined = read_mask(out.join("scene-1/refined.png")).unwrap();
    let object = read_mask(f.root.join("proposals/scene-1-object.png")).unwrap();
    assert!(refined
        .bits()
        .iter()
        .zip(object.bits())
        .all(|(&r, &o)| !r || o));
    // Pixel mode misses part of the object boundary.
    assert!(pixel.count() < refined.count());
    assert!(!out.join("scene-0").exists());
}

#[test]
fn no_proposals_gives_empty_refined_mask() {
    let (dir, f) = fixture();
    let manifest = std::fs::read_to_string(&f.manifest).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    v["images"][0]["proposals"] = serde_json::json!([]);
    std::fs::write(&f.manifest, v.to_string()).unwrap();
    let out = dir.path().join("out");
    pipeline::infer(&config(&f, &out, Mode::Masked), &["scene-0".into()]).unwrap();
    assert!(read_mask(out.join("scene-0/refined.png"))
        .unwrap()
        .is_blank());
    assert!(!read_mask(out.join("scene-0/ood.png")).unwrap().is_blank());
}

#[test]
fn eval_scores_fixture_perfectly_in_masked_mode() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let report = pipeline::eval(&config(&f, &out, Mode::Masked)).unwrap();
    let s = &report.summary;
    assert_eq!((s.iou, s.f1, s.aupr, s.fpr_at_95tpr), (1.0, 1.0, 1.0, 0.0));
    assert_eq!(report.per_image.len(), 3);
    assert_eq!(report.per_image[2].aupr, None);
    assert!(out.join("report.json").exists() && out.join("curves.csv").exists());

    let pixel = pipeline::eval(&config(&f, &out, Mode::Pixel)).unwrap();
    assert!(pixel.summary.iou < 1.0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["mode"], "pixel");
    assert_eq!(json["config"]["incs_threshold"], 0.55);
    assert_eq!(json["integration"], "ap-step");
}

#[test]
fn dataset_scope_is_recorded_and_usable() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let mut cfg = config(&f, &out, Mode::Masked);
    cfg.normalization_scope = NormScope::PerDataset;
    let report = pipeline::eval(&cfg).unwrap();
    assert_eq!(report.summary.iou, 1.0);
    let json = std::fs::read_to_string(out.join("report.json")).unwrap();
    assert!(json.contains("\"normalization_scope\": \"per-dataset\""));
}

#[test]
fn eval_without_ood_pixels_fails() {
    let (dir, f) = fixture();
    let manifest = std::fs::read_to_string(&f.manifest).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    for i in 0..2 {
        v["images"][i]["ood_gt_path"] = serde_json::json!("gt/scene-2.png");
    }
    std::fs::write(&f.manifest, v.to_string()).unwrap();
    let err = pipeline::eval(&config(&f, &dir.path().join("out"), Mode::Pixel)).unwrap_err();
    assert!(matches!(err, Error::EmptyGroundTruth));
}

#[test]
fn sweeps_write_one_row_per_value() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let cfg = config(&f, &out, Mode::Masked);
    let s = pipeline::sweep(&cfg, SweepAxis::Incs, &[0.5, 0.55, 0.6]).unwrap();
    assert_eq!(s.rows.len(), 3);
    let csv = std::fs::read_to_string(out.join("sweep_incs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv.lines().next(), Some("value,iou,f1,aupr,fpr"));

    // Every proposal is dropped at 0.95, so nothing is OOD.
    let d = pipeline::sweep(&cfg, SweepAxis::Detector, &[0.2, 0.95]).unwrap();
    assert_eq!(d.rows[0].iou, 1.0);
    assert_eq!(d.rows[1].iou, 0.0);

    let p = pipeline::sweep(&cfg, SweepAxis::Prototypes, &[1.0, 2.0]).unwrap();
    assert!(p.rows.iter().all(|r| r.aupr == 1.0));
    assert!(pipeline::sweep(&cfg, SweepAxis::Prototypes, &[1.5]).is_err());
    assert!(pipeline::sweep(&cfg, SweepAxis::Incs, &[]).is_err());
}

#[test]
fn render_blends_and_is_deterministic() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let cfg = config(&f, &out, Mode::Masked);
    assert!(matches!(
        pipeline::render(&cfg, "scene-0"),
        Err(Error::MissingInference(_))
    ));
    pipeline::infer(&cfg, &[]).unwrap();
    let path = pipeline::render(&cfg, "scene-0").unwrap();
    let first = std::fs::read(&path).unwrap();
    pipeline::render(&cfg, "scene-0").unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);

    let input = read_rgb(f.root.join("images/scene-0.png")).unwrap();
    let overlay = read_rgb(&path).unwrap();
    let gt = read_mask(f.root.join("gt/scene-0.png")).unwrap();
    for (x, y, p) in overlay.enumerate_pixels() {
        let q = input.get_pixel(x, y);
        if gt.get(y as usize, x as usize) {
            assert_eq!(p.0[0], ((u16::from(q.0[0]) + 256) / 2) as u8);
        } else {
            assert_eq!(p, q);
        }
    }

    // No OOD pixels in scene-2: overlay equals the input.
    let path = pipeline::render(&cfg, "scene-2").unwrap();
    assert_eq!(
        read_rgb(path).unwrap(),
        read_rgb(f.root.join("images/scene-2.png")).unwrap()
    );
}

#[test]
fn bank_build_matches_fixture_bank() {
    let (dir, f) = fixture();
    let mut cfg = config(&f, &dir.path().join("out"), Mode::Pixel);
    cfg.bank = Some(dir.path().join("rebuilt.pbk"));
    pipeline::bank_build(&cfg).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("rebuilt.pbk")).unwrap(),
        std::fs::read(&f.bank).unwrap()
    );
}

#[test]
fn mock_backend_runs_end_to_end() {
    let (dir, f) = fixture();
    let out = dir.path().join("out");
    let mut cfg = config(&f, &out, Mode::Masked);
    cfg.backend = "mock:11".into();
    cfg.bank = Some(dir.path().join("mock.pbk"));
    pipeline::bank_build(&cfg).unwrap();
    let report = pipeline::eval(&cfg).unwrap();
    assert!(report.failures.is_empty());
    assert!((0.0..=1.0).contains(&report.summary.aupr));
}
