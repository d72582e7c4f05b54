//! JSON dataset manifests.
//!
//! ```json
//! {
//!   "class_list": ["road", "car"],
//!   "images": [{
//!     "id": "frame-0001",
//!     "image_path": "images/frame-0001.png",
//!     "features_path": "features/frame-0001.pft",
//!     "instance_masks": [{"class": "car", "mask_path": "masks/frame-0001-car0.png"}],
//!     "ood_gt_path": "gt/frame-0001.png",
//!     "ignore_path": "gt/frame-0001-void.png",
//!     "proposals": [{"mask_path": "proposals/frame-0001-0.png", "score": 0.83}]
//!   }]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub path: PathBuf,
    pub class_list: Vec<String>,
    pub images: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub features_path: Option<PathBuf>,
    pub instance_masks: Vec<InstanceMask>,
    pub ood_gt_path: Option<PathBuf>,
    pub ignore_path: Option<PathBuf>,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub class: String,
    pub mask_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub mask_path: PathBuf,
    pub score: f64,
    pub source_id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    class_list: Vec<String>,
    images: Vec<RawImage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    id: String,
    image_path: PathBuf,
    features_path: Option<PathBuf>,
    #[serde(default)]
    instance_masks: Vec<RawInstance>,
    ood_gt_path: Option<PathBuf>,
    ignore_path: Option<PathBuf>,
    #[serde(default)]
    proposals: Vec<RawProposal>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    class: String,
    mask_path: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProposal {
    mask_path: PathBuf,
    score: f64,
    source_id: Option<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_list.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_list.iter().position(|c| c == name)
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }

    /// Parses and validates manifest text; relative paths resolve against the
    /// directory containing `path`.
    pub fn from_json(text: &str, path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let raw: RawManifest =
            serde_json::from_str(text).map_err(|e| Error::InvalidManifest(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let resolve = |p: PathBuf| -> Result<PathBuf> {
            let full = if p.is_absolute() { p } else { base.join(p) };
            if full.exists() {
                Ok(full)
            } else {
                Err(Error::MissingPath(full))
            }
        };

        let mut seen = HashSet::new();
        for class in &raw.class_list {
            if !seen.insert(class.as_str()) {
                return Err(Error::DuplicateClassName(class.clone()));
            }
        }

        let mut ids = HashSet::new();
        let mut images = Vec::with_capacity(raw.images.len());
        for img in raw.images {
            if img.id.is_empty() || img.id.contains(['/', '\\']) || img.id == "." || img.id == ".."
            {
                return Err(Error::InvalidManifest(format!(
                    "image id {:?} is not a valid file name",
                    img.id
                )));
            }
            if !ids.insert(img.id.clone()) {
                return Err(Error::DuplicateImageId(img.id));
            }
            let mut instance_masks = Vec::with_capacity(img.instance_masks.len());
            for inst in img.instance_masks {
                if !seen.contains(inst.class.as_str()) {
                    return Err(Error::UnknownClassName {
                        class: inst.class,
                        image_id: img.id,
                    });
                }
                instance_masks.push(InstanceMask {
                    class: inst.class,
                    mask_path: resolve(inst.mask_path)?,
                });
            }
            let mut proposals = Vec::with_capacity(img.proposals.len());
            for (i, prop) in img.proposals.into_iter().enumerate() {
                if !(0.0..=1.0).contains(&prop.score) {
                    return Err(Error::InvalidScore(prop.score));
                }
                proposals.push(ProposalRecord {
                    mask_path: resolve(prop.mask_path)?,
                    score: prop.score,
                    source_id: prop.source_id.unwrap_or_else(|| format!("{}#{i}", img.id)),
                });
            }
            images.push(ImageRecord {
                image_path: resolve(img.image_path)?,
                features_path: img.features_path.map(resolve).transpose()?,
                instance_masks,
                ood_gt_path: img.ood_gt_path.map(resolve).transpose()?,
                ignore_path: img.ignore_path.map(resolve).transpose()?,
                proposals,
                id: img.id,
            });
        }

        Ok(Self {
            path,
            class_list: raw.class_list,
            images,
        })
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text, path)
}
