//! On-disk formats: `PFT1` feature tensors, PNG masks and label maps, JSON
//! manifests. The `PBK1` bank container lives in [`crate::bank`].

pub(crate) mod container;
mod features;
mod manifest;
mod png;

pub use features::{
    decode_feature_map, encode_feature_map, read_feature_map, write_feature_map, FEATURE_MAGIC,
};
pub use manifest::{load_manifest, DatasetManifest, ImageRecord, InstanceMask, ProposalRecord};
pub use png::{
    png_dimensions, read_label_map, read_mask, read_rgb, write_label_map, write_mask, write_rgb,
    BinaryMask, LabelMapFile, IGNORE_ID,
};
