//! Offline prototype feature bank.
//!
//! Every labelled instance of a known class contributes one prototype: the
//! mean of its token embeddings under the instance mask, L2-normalized. Classes
//! keep their individual prototypes (no clustering); matching later takes the
//! maximum similarity over them.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::{ExtractorBackend, FeatureMap};
use crate::tensor_io::container;
use crate::tensor_io::{read_mask, BinaryMask, DatasetManifest};

pub const BANK_MAGIC: &[u8; 4] = b"PBK1";
pub const DEFAULT_PER_CLASS_LIMIT: usize = 20;

const NORM_TOLERANCE: f64 = 1e-6;
const MIN_NORM: f64 = 1e-12;

/// Token-resolution instance mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Array2<bool>,
}

impl TokenMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Reduces an image-resolution mask to the token grid.
///
/// Token `(ty, tx)` covers pixel rows `ty*patch..(ty+1)*patch` and the matching
/// columns; pixels beyond the grid are dropped and pixels missing from a
/// smaller mask count as unset. A token is set when at least half of its
/// `patch*patch` pixels are set. If that selects nothing, the single token with
/// the most set pixels (first in row-major order on ties) is used instead.
pub fn downsample_mask(
    mask: &BinaryMask,
    grid_h: usize,
    grid_w: usize,
    patch_size: usize,
) -> Result<TokenMask> {
    let (mh, mw) = mask.dims();
    let mut counts = Array2::<usize>::zeros((grid_h, grid_w));
    for ((ty, tx), count) in counts.indexed_iter_mut() {
        let rows = (ty * patch_size).min(mh)..((ty + 1) * patch_size).min(mh);
        for y in rows {
            let cols = (tx * patch_size).min(mw)..((tx + 1) * patch_size).min(mw);
            *count += cols.filter(|&x| mask.get(y, x)).count();
        }
    }

    let area = patch_size * patch_size;
    let mut bits = counts.mapv(|c| c > 0 && 2 * c >= area);
    if !bits.iter().any(|&b| b) {
        let mut best: Option<((usize, usize), usize)> = None;
        for (idx, &c) in counts.indexed_iter() {
            if c > best.map_or(0, |(_, b)| b) {
                best = Some((idx, c));
            }
        }
        let (idx, _) = best.ok_or(Error::EmptySourceMask)?;
        bits[idx] = true;
    }
    Ok(TokenMask::new(bits))
}

/// Nearest-neighbour resample, used when a mask was drawn at a different
/// resolution than the one the features were extracted at.
pub fn resize_mask_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let (mh, mw) = mask.dims();
    let src = |i: usize, n: usize, m: usize| {
        (((i as f64 + 0.5) * m as f64 / n as f64) as usize).min(m - 1)
    };
    BinaryMask::from_fn(height, width, |y, x| {
        mask.get(src(y, height, mh), src(x, width, mw))
    })
}

/// Mean of the selected token vectors, L2-normalized.
///
/// Averaging over all `h*w` positions of the masked features instead differs
/// by the positive factor `|mask| / (h*w)`, which normalization removes.
pub fn masked_mean_embedding(features: &FeatureMap, tmask: &TokenMask) -> Result<Vec<f32>> {
    let grid = (features.grid_h(), features.grid_w());
    if tmask.bits.dim() != grid {
        return Err(Error::ShapeMismatch {
            expected: grid,
            actual: tmask.bits.dim(),
        });
    }
    let selected = tmask.count();
    if selected == 0 {
        return Err(Error::EmptyTokenMask);
    }
    let values = features.values();
    let mut mean = vec![0.0f64; features.dim()];
    for ((y, x), _) in tmask.bits.indexed_iter().filter(|(_, &b)| b) {
        for (d, m) in mean.iter_mut().enumerate() {
            *m += f64::from(values[[d, y, x]]);
        }
    }
    for m in &mut mean {
        *m /= selected as f64;
    }
    normalize(&mean).ok_or(Error::ZeroVector)
}

fn normalize(v: &[f64]) -> Option<Vec<f32>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm >= MIN_NORM).then(|| v.iter().map(|x| (x / norm) as f32).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub image_id: String,
    /// Index into the image's `instance_masks` list.
    pub instance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub name: String,
    /// One unit-norm prototype per row.
    pub vectors: Array2<f32>,
    pub provenance: Vec<Provenance>,
}

impl ClassPrototypes {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    dim: usize,
    classes: Vec<ClassPrototypes>,
}

impl PrototypeBank {
    pub fn new(dim: usize, classes: Vec<ClassPrototypes>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidBank("dim must be >= 1".into()));
        }
        if classes.is_empty() {
            return Err(Error::InvalidBank("bank needs at least one class".into()));
        }
        for class in &classes {
            if class.is_empty() {
                return Err(Error::InvalidBank(format!(
                    "class {:?} has no prototypes",
                    class.name
                )));
            }
            if class.vectors.ncols() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    actual: class.vectors.ncols(),
                });
            }
            if class.provenance.len() != class.len() {
                return Err(Error::InvalidBank(format!(
                    "class {:?}: {} prototypes but {} provenance entries",
                    class.name,
                    class.len(),
                    class.provenance.len()
                )));
            }
            for row in class.vectors.rows() {
                let norm = row
                    .iter()
                    .map(|&v| f64::from(v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if norm.is_nan() || (1.0 - norm).abs() > NORM_TOLERANCE {
                    return Err(Error::InvalidBank(format!(
                        "class {:?} has a prototype with norm {norm}",
                        class.name
                    )));
                }
            }
        }
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassPrototypes] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    /// `(name, prototype count)` per class.
    pub fn summary(&self) -> Vec<(String, usize)> {
        self.classes
            .iter()
            .map(|c| (c.name.clone(), c.len()))
            .collect()
    }
}

/// Builds a bank from the first `per_class_limit` usable instances of each
/// class, in manifest order.
///
/// Instances whose mask is empty on the token grid, or whose mean embedding is
/// the zero vector, are skipped with a warning. A class left with no
/// prototypes is an error.
pub fn build_bank(
    manifest: &DatasetManifest,
    backend: &ExtractorBackend,
    per_class_limit: usize,
) -> Result<PrototypeBank> {
    if per_class_limit == 0 {
        return Err(Error::InvalidConfig(
            "per-class prototype limit must be >= 1".into(),
        ));
    }
    if manifest.class_list.is_empty() {
        return Err(Error::InvalidManifest("class list is empty".into()));
    }
    let k = manifest.num_classes();
    let mut vectors: Vec<Vec<Vec<f32>>> = vec![Vec::new(); k];
    let mut provenance: Vec<Vec<Provenance>> = vec![Vec::new(); k];
    let mut dim = None;

    for record in &manifest.images {
        let wanted: Vec<(usize, usize)> = record
            .instance_masks
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                (
                    i,
                    manifest
                        .class_index(&inst.class)
                        .expect("validated manifest"),
                )
            })
            .collect();
        if wanted
            .iter()
            .all(|&(_, c)| vectors[c].len() >= per_class_limit)
        {
            continue;
        }

        let features = backend
            .extract(record)
            .map_err(|e| e.in_image(&record.id))?;
        match dim {
            None => dim = Some(features.dim()),
            Some(d) if d != features.dim() => {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: features.dim(),
                }
                .in_image(&record.id))
            }
            _ => {}
        }

        for (i, class) in wanted {
            if vectors[class].len() >= per_class_limit {
                continue;
            }
            let inst = &record.instance_masks[i];
            let mask = read_mask(&inst.mask_path).map_err(|e| e.in_image(&record.id))?;
            match instance_prototype(&features, &mask) {
                Ok(v) => {
                    vectors[class].push(v);
                    provenance[class].push(Provenance {
                        image_id: record.id.clone(),
                        instance: i,
                    });
                }
                Err(e @ (Error::EmptySourceMask | Error::ZeroVector)) => {
                    log::warn!(
                        "image {}: skipping instance {i} ({}): {e}",
                        record.id,
                        inst.class
                    );
                }
                Err(e) => return Err(e.in_image(&record.id)),
            }
        }
    }

    if let Some(c) = vectors.iter().position(Vec::is_empty) {
        return Err(Error::NoInstancesForClass(manifest.class_list[c].clone()));
    }
    let dim = dim.expect("at least one class has prototypes");
    let classes = manifest
        .class_list
        .iter()
        .zip(vectors)
        .zip(provenance)
        .map(|((name, rows), provenance)| ClassPrototypes {
            name: name.clone(),
            vectors: Array2::from_shape_vec((rows.len(), dim), rows.concat())
                .expect("rows have length dim"),
            provenance,
        })
        .collect();
    PrototypeBank::new(dim, classes)
}

/// Prototype for one instance mask drawn at image resolution.
pub fn instance_prototype(features: &FeatureMap, mask: &BinaryMask) -> Result<Vec<f32>> {
    let ps = features.patch_size() as usize;
    let (gh, gw) = (features.grid_h(), features.grid_w());
    let (mh, mw) = mask.dims();
    let tmask = if mh / ps == gh && mw / ps == gw {
        downsample_mask(mask, gh, gw, ps)?
    } else {
        // Features came from a resized image; bring the mask to the token-covered size.
        downsample_mask(&resize_mask_nearest(mask, gh * ps, gw * ps), gh, gw, ps)?
    };
    masked_mean_embedding(features, &tmask)
}

// Keys are serialized in declaration order; keep them sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    classes: Vec<BankClassHeader>,
    dim: usize,
    provenance: Vec<Vec<Provenance>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankClassHeader {
    count: usize,
    name: String,
}

pub fn encode_bank(bank: &PrototypeBank) -> Vec<u8> {
    let header = BankHeader {
        classes: bank
            .classes
            .iter()
            .map(|c| BankClassHeader {
                count: c.len(),
                name: c.name.clone(),
            })
            .collect(),
        dim: bank.dim,
        provenance: bank.classes.iter().map(|c| c.provenance.clone()).collect(),
    };
    let payload: Vec<f32> = bank
        .classes
        .iter()
        .flat_map(|c| c.vectors.iter().copied())
        .collect();
    container::assemble(BANK_MAGIC, &header, &payload)
}

pub fn decode_bank(bytes: &[u8]) -> Result<PrototypeBank> {
    let (header, payload): (BankHeader, _) = container::split(BANK_MAGIC, bytes)?;
    if header.provenance.len() != header.classes.len() {
        return Err(Error::HeaderParse(format!(
            "{} classes but {} provenance lists",
            header.classes.len(),
            header.provenance.len()
        )));
    }
    let total: usize = header.classes.iter().map(|c| c.count).sum();
    if header.dim == 0 || total == 0 {
        return Err(Error::HeaderParse("bank header declares no data".into()));
    }
    let floats = payload.len() / 4;
    if payload.len() % 4 != 0 || floats != total * header.dim {
        return Err(Error::DimMismatch {
            expected: header.dim,
            actual: floats / total,
        });
    }
    let values = container::decode_f32s(payload, total * header.dim)?;

    let mut offset = 0;
    let mut classes = Vec::with_capacity(header.classes.len());
    for (class, provenance) in header.classes.into_iter().zip(header.provenance) {
        let n = class.count * header.dim;
        let vectors = Array2::from_shape_vec(
            (class.count, header.dim),
            values[offset..offset + n].to_vec(),
        )
        .expect("sized from header");
        offset += n;
        classes.push(ClassPrototypes {
            name: class.name,
            vectors,
            provenance,
        });
    }
    PrototypeBank::new(header.dim, classes)
}

pub fn save_bank(bank: &PrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_bank(bank))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    decode_bank(&container::read_file(path.as_ref())?)
}
