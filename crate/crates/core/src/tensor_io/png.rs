//! PNG-backed binary masks and label maps.

use std::collections::BTreeMap;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Label id that never contributes to prototypes or class assignments.
pub const IGNORE_ID: u16 = 255;

/// Per-pixel boolean mask, indexed `[row, col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    bits: Array2<bool>,
}

impl BinaryMask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), false))
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(Array2::from_elem((height, width), true))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((height, width), |(y, x)| f(y, x)))
    }

    pub fn height(&self) -> usize {
        self.bits.nrows()
    }

    pub fn width(&self) -> usize {
        self.bits.ncols()
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        self.bits.dim()
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.bits
    }

    pub fn into_bits(self) -> Array2<bool> {
        self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_blank(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub(crate) fn check_dims(&self, expected: (usize, usize)) -> Result<()> {
        if self.dims() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.dims(),
            });
        }
        Ok(())
    }
}

pub(crate) fn decode_png(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

pub(crate) fn encode_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Encode {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
    std::fs::write(path, buf.into_inner()).map_err(|e| Error::io(path, e))
}

/// Loads a mask PNG; any nonzero colour sample marks the pixel as set.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = decode_png(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let bits = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(|v| v != 0).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(|v| v != 0).collect(),
        other => other
            .into_rgb32f()
            .pixels()
            .map(|p| p.0.iter().any(|&c| c > 0.0))
            .collect(),
    };
    Ok(BinaryMask::new(
        Array2::from_shape_vec((h, w), bits).expect("pixel count matches dims"),
    ))
}

/// Writes an 8-bit grayscale PNG with 0 / 255 pixels.
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) {
            255
        } else {
            0
        }])
    });
    encode_png(&img, path.as_ref())
}

/// Loads an RGB image (PNG only).
pub fn read_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(decode_png(path.as_ref())?.into_rgb8())
}

pub fn write_rgb(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    encode_png(img, path.as_ref())
}

/// `(width, height)` of a PNG without decoding pixel data.
pub fn png_dimensions(path: impl AsRef<Path>) -> Result<(u32, u32)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    image::ImageReader::with_format(std::io::BufReader::new(file), ImageFormat::Png)
        .into_dimensions()
        .map_err(|e| Error::Decode {
            path: path.to_owned(),
            message: e.to_string(),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMapFile {
    pub ids: Array2<u16>,
    pub legend: BTreeMap<u16, String>,
}

impl LabelMapFile {
    /// Builds a label map, checking every id against the legend.
    pub fn new(ids: Array2<u16>, legend: BTreeMap<u16, String>) -> Result<Self> {
        if let Some(&bad) = ids
            .iter()
            .find(|&&id| id != IGNORE_ID && !legend.contains_key(&id))
        {
            return Err(Error::UnknownLabelId(bad));
        }
        Ok(Self { ids, legend })
    }

    pub fn class_mask(&self, id: u16) -> BinaryMask {
        BinaryMask::new(self.ids.mapv(|v| v == id))
    }
}

pub fn read_label_map(
    path: impl AsRef<Path>,
    legend: BTreeMap<u16, String>,
) -> Result<LabelMapFile> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u16> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw(),
        other => {
            return Err(Error::Decode {
                path: path.to_owned(),
                message: format!(
                    "label maps must be 8- or 16-bit grayscale, got {:?}",
                    other.color()
                ),
            })
        }
    };
    LabelMapFile::new(
        Array2::from_shape_vec((h, w), raw).expect("pixel count matches dims"),
        legend,
    )
}

/// Writes label ids as 8-bit grayscale when they all fit, 16-bit otherwise.
pub fn write_label_map(ids: &Array2<u16>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = ids.dim();
    if ids.iter().all(|&v| v <= u8::MAX as u16) {
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([ids[[y as usize, x as usize]] as u8])
        });
        encode_png(&img, path.as_ref())
    } else {
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                Luma([ids[[y as usize, x as usize]]])
            });
        encode_png(&img, path.as_ref())
    }
}
