//! `PFT1` feature tensor files.
//!
//! Layout: magic `PFT1`, u64 LE header length, JSON header
//! `{"dtype":"f32","extractor_id":..,"image_id":..,"patch_size":..,"shape":[D,h,w]}`,
//! then `D*h*w` little-endian f32 values with D outermost.

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::container;
use crate::error::{Error, Result};
use crate::extractor::FeatureMap;

pub const FEATURE_MAGIC: &[u8; 4] = b"PFT1";

// Field order is the serialized key order; keep it sorted.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    dtype: String,
    extractor_id: String,
    image_id: String,
    patch_size: u32,
    shape: Vec<usize>,
}

pub fn encode_feature_map(map: &FeatureMap) -> Vec<u8> {
    let header = FeatureHeader {
        dtype: "f32".into(),
        extractor_id: map.extractor_id().to_owned(),
        image_id: map.image_id().to_owned(),
        patch_size: map.patch_size(),
        shape: vec![map.dim(), map.grid_h(), map.grid_w()],
    };
    let values = map.values();
    match values.as_slice() {
        Some(slice) => container::assemble(FEATURE_MAGIC, &header, slice),
        None => container::assemble(
            FEATURE_MAGIC,
            &header,
            &values.iter().copied().collect::<Vec<_>>(),
        ),
    }
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let (header, payload): (FeatureHeader, _) = container::split(FEATURE_MAGIC, bytes)?;
    if header.dtype != "f32" {
        return Err(Error::HeaderParse(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let [d, h, w] = <[usize; 3]>::try_from(header.shape.as_slice()).map_err(|_| {
        Error::HeaderParse(format!("shape must have 3 entries, got {:?}", header.shape))
    })?;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::HeaderParse(format!(
            "shape entries must be >= 1, got {:?}",
            header.shape
        )));
    }
    let count = d
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| Error::HeaderParse("shape overflows".into()))?;
    let values = container::decode_f32s(payload, count)?;
    let values = Array3::from_shape_vec((d, h, w), values).expect("length checked above");
    FeatureMap::new(
        values,
        header.patch_size,
        header.extractor_id,
        header.image_id,
    )
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_feature_map(&container::read_file(path.as_ref())?)
}

pub fn write_feature_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_feature_map(map))
}
