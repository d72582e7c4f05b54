//! Small synthetic dataset with a known answer.
//!
//! Every scene is 112 x 112 pixels (an 8 x 8 grid of 14-pixel patches) made
//! of three horizontal class bands. Each class token is a distinct basis
//! vector; injected OOD blocks use a fourth, orthogonal one. Regions are
//! patch-aligned and the proposals tile each scene exactly, so masked-mode
//! inference recovers the OOD blocks without error.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;
use serde_json::json;

use crate::bank::{build_bank, save_bank, DEFAULT_PER_CLASS_LIMIT};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorBackend, FeatureMap};
use crate::tensor_io::{load_manifest, write_feature_map, write_mask, write_rgb, BinaryMask};

pub const CLASSES: [&str; 3] = ["road", "building", "sky"];
pub const FEATURE_DIM: usize = 8;
pub const PATCH: usize = 14;
pub const GRID: usize = 8;
pub const EXTRACTOR_ID: &str = "synthetic-orthogonal";

const OOD: usize = CLASSES.len();
const COLOURS: [[u8; 3]; 4] = [
    [70, 70, 70],
    [150, 120, 100],
    [120, 180, 230],
    [240, 130, 20],
];

/// Token rectangle `[y0, y1) x [x0, x1)`.
#[derive(Debug, Clone, Copy)]
struct Block {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

impl Block {
    fn contains(&self, ty: usize, tx: usize) -> bool {
        (self.y0..self.y1).contains(&ty) && (self.x0..self.x1).contains(&tx)
    }
}

/// Class of token row `ty`: sky on top, building, road below.
fn band(ty: usize) -> usize {
    match ty {
        0..=1 => 2,
        2..=3 => 1,
        _ => 0,
    }
}

struct Scene {
    id: &'static str,
    ood: Option<Block>,
}

const BANK_SCENES: [&str; 2] = ["bank-0", "bank-1"];
const SCENES: [Scene; 3] = [
    Scene {
        id: "scene-0",
        ood: Some(Block {
            y0: 5,
            y1: 7,
            x0: 2,
            x1: 4,
        }),
    },
    Scene {
        id: "scene-1",
        ood: Some(Block {
            y0: 3,
            y1: 6,
            x0: 4,
            x1: 7,
        }),
    },
    Scene {
        id: "scene-2",
        ood: None,
    },
];

fn token_class(scene_ood: Option<Block>, ty: usize, tx: usize) -> usize {
    match scene_ood {
        Some(b) if b.contains(ty, tx) => OOD,
        _ => band(ty),
    }
}

fn pixel_mask(f: impl Fn(usize, usize) -> bool) -> BinaryMask {
    BinaryMask::from_fn(GRID * PATCH, GRID * PATCH, |y, x| f(y / PATCH, x / PATCH))
}

fn create_dirs(root: &Path) -> Result<()> {
    for sub in ["images", "features", "masks", "gt", "proposals"] {
        let p = root.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_scene(root: &Path, id: &str, ood: Option<Block>) -> Result<()> {
    let side = (GRID * PATCH) as u32;
    let img = RgbImage::from_fn(side, side, |x, y| {
        Rgb(COLOURS[token_class(ood, y as usize / PATCH, x as usize / PATCH)])
    });
    write_rgb(&img, root.join(format!("images/{id}.png")))?;
    let values = Array3::from_shape_fn((FEATURE_DIM, GRID, GRID), |(d, ty, tx)| {
        if d == token_class(ood, ty, tx) {
            1.0
        } else {
            0.0
        }
    });
    let features = FeatureMap::new(values, PATCH as u32, EXTRACTOR_ID, id)?;
    write_feature_map(&features, root.join(format!("features/{id}.pft")))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFixture {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub bank_manifest: PathBuf,
    pub bank: PathBuf,
    pub config: PathBuf,
}

/// Writes the dataset, its manifests, a prebuilt bank and a masked-mode
/// `config.json` under `root`. Output is byte-for-byte reproducible.
pub fn write_fixture(root: impl AsRef<Path>) -> Result<SyntheticFixture> {
    let root = root.as_ref();
    create_dirs(root)?;

    let mut bank_images = Vec::new();
    for (i, id) in BANK_SCENES.iter().enumerate() {
        write_scene(root, id, None)?;
        let mut instances = Vec::new();
        for (c, class) in CLASSES.iter().enumerate() {
            // The second bank image only labels the left half of each band.
            let mask = pixel_mask(|ty, tx| band(ty) == c && (i == 0 || tx < GRID / 2));
            let rel = format!("masks/{id}-{class}.png");
            write_mask(&mask, root.join(&rel))?;
            instances.push(json!({"class": class, "mask_path": rel}));
        }
        bank_images.push(json!({
            "id": id,
            "image_path": format!("images/{id}.png"),
            "features_path": format!("features/{id}.pft"),
            "instance_masks": instances,
        }));
    }

    let mut images = Vec::new();
    for scene in &SCENES {
        let id = scene.id;
        write_scene(root, id, scene.ood)?;
        let in_ood = |ty: usize, tx: usize| scene.ood.is_some_and(|b| b.contains(ty, tx));
        write_mask(&pixel_mask(in_ood), root.join(format!("gt/{id}.png")))?;

        let mut proposals = Vec::new();
        let mut add = |name: String, mask: BinaryMask, score: f64| -> Result<()> {
            let rel = format!("proposals/{id}-{name}.png");
            write_mask(&mask, root.join(&rel))?;
            proposals.push(json!({"mask_path": rel, "score": score}));
            Ok(())
        };
        if scene.ood.is_some() {
            add("object".into(), pixel_mask(in_ood), 0.9)?;
        }
        for (c, class) in CLASSES.iter().enumerate() {
            let score = 0.6 - 0.1 * c as f64;
            add(
                class.to_string(),
                pixel_mask(|ty, tx| band(ty) == c && !in_ood(ty, tx)),
                score,
            )?;
        }
        // Below the default detector threshold.
        add(
            "faint".into(),
            pixel_mask(|ty, tx| ty == 0 && tx == GRID - 1),
            0.1,
        )?;

        images.push(json!({
            "id": id,
            "image_path": format!("images/{id}.png"),
            "features_path": format!("features/{id}.pft"),
            "ood_gt_path": format!("gt/{id}.png"),
            "proposals": proposals,
        }));
    }

    let fixture = SyntheticFixture {
        root: root.to_owned(),
        manifest: root.join("manifest.json"),
        bank_manifest: root.join("bank_manifest.json"),
        bank: root.join("bank.pbk"),
        config: root.join("config.json"),
    };
    write_json(
        &fixture.bank_manifest,
        &json!({"class_list": CLASSES, "images": bank_images}),
    )?;
    write_json(
        &fixture.manifest,
        &json!({"class_list": CLASSES, "images": images}),
    )?;
    write_json(
        &fixture.config,
        &json!({
            "manifest": "manifest.json",
            "bank_manifest": "bank_manifest.json",
            "bank": "bank.pbk",
            "backend": "file",
            "mode": "masked",
        }),
    )?;

    let bank = build_bank(
        &load_manifest(&fixture.bank_manifest)?,
        &ExtractorBackend::File,
        DEFAULT_PER_CLASS_LIMIT,
    )?;
    save_bank(&bank, &fixture.bank)?;
    Ok(fixture)
}
