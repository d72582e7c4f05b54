//! Inverse normalized cosine similarity (INCS) and the per-pixel OOD decision.
//!
//! `w = 1 - (v - min v) / (max v - min v)`; a pixel is OOD when `w > t`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INCS_THRESHOLD: f64 = 0.55;

/// Population the min/max normalization is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    #[default]
    PerImage,
    PerDataset,
}

impl FromStr for NormScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-image" => Ok(NormScope::PerImage),
            "per-dataset" => Ok(NormScope::PerDataset),
            other => Err(Error::InvalidConfig(format!(
                "unknown normalization scope {other:?} (expected per-image or per-dataset)"
            ))),
        }
    }
}

impl fmt::Display for NormScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormScope::PerImage => "per-image",
            NormScope::PerDataset => "per-dataset",
        })
    }
}

/// Closed range of similarity scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreRange {
    pub min: f64,
    pub max: f64,
}

impl ScoreRange {
    pub fn of(scores: ArrayView2<'_, f32>) -> Option<Self> {
        scores.iter().fold(None, |acc, &v| {
            let v = f64::from(v);
            Some(match acc {
                None => ScoreRange { min: v, max: v },
                Some(r) => ScoreRange {
                    min: r.min.min(v),
                    max: r.max.max(v),
                },
            })
        })
    }

    pub fn merge(self, other: ScoreRange) -> ScoreRange {
        ScoreRange {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }
}

/// Per-pixel INCS values in `[0, 1]`; high means unlike every known class.
#[derive(Debug, Clone, PartialEq)]
pub struct IncsMap {
    values: Array2<f32>,
}

impl IncsMap {
    pub fn new(values: Array2<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// INCS normalized over this image's own score range.
///
/// A constant score map carries no anomaly evidence and maps to all zeros.
pub fn incs_map(scores: ArrayView2<'_, f32>) -> IncsMap {
    match ScoreRange::of(scores) {
        Some(range) => incs_map_in_range(scores, range),
        None => IncsMap::new(Array2::zeros(scores.dim())),
    }
}

/// INCS normalized over an externally supplied range (e.g. a whole dataset).
/// Values outside the range are clamped.
pub fn incs_map_in_range(scores: ArrayView2<'_, f32>, range: ScoreRange) -> IncsMap {
    let span = range.max - range.min;
    if span.is_nan() || span <= 0.0 {
        return IncsMap::new(Array2::zeros(scores.dim()));
    }
    IncsMap::new(scores.mapv(|v| {
        let norm = (f64::from(v) - range.min) / span;
        (1.0 - norm).clamp(0.0, 1.0) as f32
    }))
}

pub fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::ThresholdOutOfRange(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OodDecision {
    /// `w > threshold`, per pixel.
    pub ood: Array2<bool>,
    /// Argmax class labels; meaningful where `ood` is false.
    pub labels: Array2<u16>,
    pub threshold: f64,
}

impl OodDecision {
    pub fn dims(&self) -> (usize, usize) {
        self.ood.dim()
    }
}

pub fn threshold_ood(incs: &IncsMap, labels: &Array2<u16>, threshold: f64) -> Result<OodDecision> {
    check_threshold(threshold)?;
    if labels.dim() != incs.dims() {
        return Err(Error::ShapeMismatch {
            expected: incs.dims(),
            actual: labels.dim(),
        });
    }
    let mut ood = Array2::from_elem(incs.dims(), false);
    Zip::from(&mut ood)
        .and(&incs.values)
        .for_each(|o, &w| *o = f64::from(w) > threshold);
    Ok(OodDecision {
        ood,
        labels: labels.clone(),
        threshold,
    })
}
