use std::path::Path;

use image::{Rgb, RgbImage};
use protood_core::bank::{build_bank, instance_prototype};
use protood_core::extractor::{ExtractorBackend, MockExtractor};
use protood_core::tensor_io::{
    load_manifest, read_mask, read_rgb, write_mask, write_rgb, BinaryMask,
};
use protood_core::Error;
use serde_json::json;

const PATCH: usize = 14;

fn colour(k: usize) -> Rgb<u8> {
    Rgb([
        (40 + k * 37 % 200) as u8,
        (20 + k * 91 % 220) as u8,
        (10 + k * 53 % 230) as u8,
    ])
}

/// One image per entry of `images`; each image is a row of 14-pixel-wide
/// class columns and gets one instance mask per column.
fn dataset(dir: &Path, classes: &[&str], images: &[Vec<usize>]) -> std::path::PathBuf {
    let mut recs = Vec::new();
    for (i, cols) in images.iter().enumerate() {
        let id = format!("img{i}");
        let img = RgbImage::from_fn((cols.len() * PATCH) as u32, (2 * PATCH) as u32, |x, _| {
            colour(cols[x as usize / PATCH])
        });
        write_rgb(&img, dir.join(format!("{id}.png"))).unwrap();
        let mut inst = Vec::new();
        for (c, &class) in cols.iter().enumerate() {
            let mask = BinaryMask::from_fn(2 * PATCH, cols.len() * PATCH, |_, x| x / PATCH == c);
            let name = format!("{id}-{c}.png");
            write_mask(&mask, dir.join(&name)).unwrap();
            inst.push(json!({"class": classes[class], "mask_path": name}));
        }
        recs.push(json!({"id": id, "image_path": format!("{id}.png"), "instance_masks": inst}));
    }
    let path = dir.join("manifest.json");
    std::fs::write(
        &path,
        json!({"class_list": classes, "images": recs}).to_string(),
    )
    .unwrap();
    path
}

fn mock() -> ExtractorBackend {
    ExtractorBackend::Mock(Box::new(MockExtractor::new(3)))
}

#[test]
fn bank_has_one_entry_per_class() {
    let names: Vec<String> = (0..19).map(|i| format!("class{i}")).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    for (k, classes) in [
        (19, names.clone()),
        (2, vec!["sky", "sea"]),
        (6, names[..6].to_vec()),
    ] {
        let dir = tempfile::tempdir().unwrap();
        let cols: Vec<usize> = (0..k).collect();
        let m = load_manifest(dataset(dir.path(), &classes, &[cols.clone(), cols])).unwrap();
        let bank = build_bank(&m, &mock(), 20).unwrap();
        assert_eq!(bank.num_classes(), k);
        assert_eq!(bank.class_names(), classes);
        assert!(bank.summary().iter().all(|(_, n)| *n == 2));
        assert_eq!(bank.dim(), 16);
    }
}

#[test]
fn limit_keeps_first_instances_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_manifest(dataset(
        dir.path(),
        &["a", "b"],
        &[vec![0, 1, 0], vec![0, 1], vec![1, 0]],
    ))
    .unwrap();
    let bank = build_bank(&m, &mock(), 2).unwrap();
    let a = &bank.classes()[0];
    let got: Vec<(&str, usize)> = a
        .provenance
        .iter()
        .map(|p| (p.image_id.as_str(), p.instance))
        .collect();
    assert_eq!(got, [("img0", 0), ("img0", 2)]);
    let b: Vec<&str> = bank.classes()[1]
        .provenance
        .iter()
        .map(|p| p.image_id.as_str())
        .collect();
    assert_eq!(b, ["img0", "img1"]);

    let rec = &m.images[0];
    let fm = mock().extract(rec).unwrap();
    let v = instance_prototype(&fm, &read_mask(&rec.instance_masks[1].mask_path).unwrap()).unwrap();
    assert_eq!(bank.classes()[1].vectors.row(0).to_vec(), v);
}

#[test]
fn unusable_instances_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dataset(dir.path(), &["a", "b"], &[vec![0, 1]]);
    // Blank out b's only mask; a black image region makes a zero embedding.
    let m = load_manifest(&path).unwrap();
    write_mask(
        &BinaryMask::empty(28, 28),
        &m.images[0].instance_masks[1].mask_path,
    )
    .unwrap();
    assert!(matches!(build_bank(&m, &mock(), 20), Err(Error::NoInstancesForClass(c)) if c == "b"));

    let img = read_rgb(&m.images[0].image_path).unwrap();
    let black = RgbImage::from_fn(img.width(), img.height(), |x, y| {
        if x < 14 {
            Rgb([0, 0, 0])
        } else {
            *img.get_pixel(x, y)
        }
    });
    write_rgb(&black, &m.images[0].image_path).unwrap();
    write_mask(
        &BinaryMask::from_fn(28, 28, |_, x| x >= 14),
        &m.images[0].instance_masks[1].mask_path,
    )
    .unwrap();
    assert!(matches!(build_bank(&m, &mock(), 20), Err(Error::NoInstancesForClass(c)) if c == "a"));
}

#[test]
fn file_backend_needs_features() {
    let dir = tempfile::tempdir().unwrap();
    let m = load_manifest(dataset(dir.path(), &["a"], &[vec![0]])).unwrap();
    let err = build_bank(&m, &ExtractorBackend::File, 20).unwrap_err();
    assert!(matches!(err.root(), Error::BackendUnavailable(_)), "{err}");
    assert!(matches!(err, Error::Image { ref image_id, .. } if image_id == "img0"));
    assert!(matches!(
        build_bank(&m, &mock(), 0),
        Err(Error::InvalidConfig(_))
    ));
}
