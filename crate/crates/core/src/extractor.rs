//! Feature extraction backends.
//!
//! Production features come from an offline exporter and are read through the
//! `file` backend. The `mock:<seed>` backend is a cheap deterministic stand-in
//! that projects each patch's mean colour through a seeded random matrix.

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::{Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor_io::{read_feature_map, read_rgb, ImageRecord};

pub const MOCK_DIM: usize = 16;
pub const MOCK_PATCH_SIZE: u32 = 14;

/// Dense `D x h x w` patch features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f32>,
    patch_size: u32,
    extractor_id: String,
    image_id: String,
}

impl FeatureMap {
    pub fn new(
        values: Array3<f32>,
        patch_size: u32,
        extractor_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        let (d, h, w) = values.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::HeaderParse(format!(
                "feature shape entries must be >= 1, got {:?}",
                values.dim()
            )));
        }
        if patch_size == 0 {
            return Err(Error::HeaderParse("patch_size must be >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::PayloadInvalid(
                "feature map contains non-finite values".into(),
            ));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
            patch_size,
            extractor_id: extractor_id.into(),
            image_id: image_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_h(&self) -> usize {
        self.values.dim().1
    }

    pub fn grid_w(&self) -> usize {
        self.values.dim().2
    }

    pub fn patch_size(&self) -> u32 {
        self.patch_size
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn token(&self, y: usize, x: usize) -> ArrayView1<'_, f32> {
        self.values.slice(ndarray::s![.., y, x])
    }

    /// Token-major copy: row `y * grid_w + x` holds the token at `(y, x)`.
    pub fn tokens(&self) -> Array2<f32> {
        let (d, h, w) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((d, h * w))
            .expect("standard layout")
            .t()
            .as_standard_layout()
            .into_owned()
    }
}

/// A seeded linear map from mean patch colour to a [`MOCK_DIM`]-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MockExtractor {
    seed: u64,
    projection: [[f64; 3]; MOCK_DIM],
}

impl MockExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut projection = [[0.0; 3]; MOCK_DIM];
        for row in &mut projection {
            for v in row.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        Self { seed, projection }
    }

    pub fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    pub fn extract(&self, image: &RgbImage, image_id: &str) -> Result<FeatureMap> {
        let (width, height) = image.dimensions();
        let ps = MOCK_PATCH_SIZE;
        if width < ps || height < ps {
            return Err(Error::ImageTooSmall {
                width,
                height,
                patch_size: ps,
            });
        }
        // Trailing pixels beyond the last full patch are dropped.
        let (gh, gw) = ((height / ps) as usize, (width / ps) as usize);
        let area = f64::from(ps * ps) * 255.0;
        let mut values = Array3::<f32>::zeros((MOCK_DIM, gh, gw));
        for ty in 0..gh {
            for tx in 0..gw {
                let mut sum = [0.0f64; 3];
                for y in ty as u32 * ps..(ty as u32 + 1) * ps {
                    for x in tx as u32 * ps..(tx as u32 + 1) * ps {
                        let p = image.get_pixel(x, y).0;
                        for c in 0..3 {
                            sum[c] += f64::from(p[c]);
                        }
                    }
                }
                let mean = sum.map(|s| s / area);
                for (d, row) in self.projection.iter().enumerate() {
                    values[[d, ty, tx]] =
                        (row[0] * mean[0] + row[1] * mean[1] + row[2] * mean[2]) as f32;
                }
            }
        }
        FeatureMap::new(values, ps, self.id(), image_id)
    }
}

pub fn mock_extract(image: &RgbImage, seed: u64) -> Result<FeatureMap> {
    MockExtractor::new(seed).extract(image, "")
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExtractorBackend {
    /// Precomputed `PFT1` features referenced by the manifest.
    File,
    Mock(Box<MockExtractor>),
}

impl ExtractorBackend {
    pub fn id(&self) -> String {
        match self {
            ExtractorBackend::File => "file".into(),
            ExtractorBackend::Mock(m) => m.id(),
        }
    }

    pub fn extract(&self, record: &ImageRecord) -> Result<FeatureMap> {
        match self {
            ExtractorBackend::File => {
                let path = record.features_path.as_ref().ok_or_else(|| {
                    Error::BackendUnavailable(format!("image {:?} has no features_path", record.id))
                })?;
                read_feature_map(path)
            }
            ExtractorBackend::Mock(m) => m.extract(&read_rgb(&record.image_path)?, &record.id),
        }
    }
}

impl FromStr for ExtractorBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "file" {
            return Ok(ExtractorBackend::File);
        }
        s.strip_prefix("mock:")
            .and_then(|seed| seed.parse().ok())
            .map(|seed| ExtractorBackend::Mock(Box::new(MockExtractor::new(seed))))
            .ok_or_else(|| Error::UnknownBackend(s.to_owned()))
    }
}

impl fmt::Display for ExtractorBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}
