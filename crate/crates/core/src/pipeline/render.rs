use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor_io::BinaryMask;

/// Blends masked pixels 50/50 with pure red, rounding halves up.
pub fn overlay(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    if mask.dims() != (h as usize, w as usize) {
        return Err(Error::ShapeMismatch {
            expected: (h as usize, w as usize),
            actual: mask.dims(),
        });
    }
    let mut out = image.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) {
            let [r, g, b] = px.0.map(u16::from);
            *px = Rgb([
                ((r + 256) / 2) as u8,
                g.div_ceil(2) as u8,
                b.div_ceil(2) as u8,
            ]);
        }
    }
    Ok(out)
}
