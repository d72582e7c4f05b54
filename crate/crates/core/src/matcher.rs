//! Prototype matching: per-class cosine heatmaps, bilinear upsampling to image
//! resolution, and per-pixel argmax/max.
//!
//! Heatmaps are upsampled before pixels are classified; argmax does not commute
//! with interpolation, so the order is fixed.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};

use crate::bank::PrototypeBank;
use crate::error::{Error, Result};
use crate::extractor::FeatureMap;

const MIN_NORM: f64 = 1e-12;

/// `K x H x W` similarity maps, one channel per bank class, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    values: Array3<f32>,
}

impl HeatmapStack {
    pub fn new(values: Array3<f32>) -> Self {
        Self { values }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }
}

/// Argmax class index and max similarity per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelClassification {
    pub labels: Array2<u16>,
    pub scores: Array2<f32>,
}

impl PixelClassification {
    pub fn dims(&self) -> (usize, usize) {
        self.labels.dim()
    }
}

/// Row-normalizes to f64; rows below `MIN_NORM` become all-zero so that every
/// cosine against them is 0.
fn unit_rows(rows: ArrayView2<'_, f32>) -> Array2<f64> {
    let mut out = rows.mapv(f64::from);
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < MIN_NORM {
            row.fill(0.0);
        } else {
            row /= norm;
        }
    }
    out
}

/// Max cosine similarity of every token against `prototypes` (one per row),
/// on the `grid_h x grid_w` token grid. Prototypes need not be normalized.
pub fn similarity_grid(
    features: &FeatureMap,
    prototypes: ArrayView2<'_, f32>,
) -> Result<Array2<f32>> {
    if prototypes.ncols() != features.dim() {
        return Err(Error::DimMismatch {
            expected: features.dim(),
            actual: prototypes.ncols(),
        });
    }
    let tokens = unit_rows(features.tokens().view());
    let protos = unit_rows(prototypes);
    Ok(max_cosine(&tokens, &protos)
        .into_shape_with_order((features.grid_h(), features.grid_w()))
        .expect("h*w tokens"))
}

fn max_cosine(tokens: &Array2<f64>, protos: &Array2<f64>) -> ndarray::Array1<f32> {
    let sims = tokens.dot(&protos.t());
    sims.map_axis(Axis(1), |row| {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        best.clamp(-1.0, 1.0) as f32
    })
}

/// Token-grid heatmaps: channel `k` is the max cosine similarity to any
/// prototype of bank class `k`. Zero tokens score 0 against everything.
pub fn cosine_heatmaps(features: &FeatureMap, bank: &PrototypeBank) -> Result<HeatmapStack> {
    if bank.dim() != features.dim() {
        return Err(Error::DimMismatch {
            expected: bank.dim(),
            actual: features.dim(),
        });
    }
    let (h, w) = (features.grid_h(), features.grid_w());
    let tokens = unit_rows(features.tokens().view());
    let mut values = Array3::<f32>::zeros((bank.num_classes(), h, w));
    for (mut channel, class) in values.outer_iter_mut().zip(bank.classes()) {
        let protos = unit_rows(class.vectors.view());
        let best = max_cosine(&tokens, &protos);
        channel.assign(&best.into_shape_with_order((h, w)).expect("h*w tokens"));
    }
    Ok(HeatmapStack::new(values))
}

/// Bilinear sample positions along one axis: pixel centres are mapped
/// proportionally onto the source grid (half-pixel alignment) and clamped.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(src - 1));
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

struct Resampler {
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resampler {
    fn new(src: (usize, usize), dst: (usize, usize)) -> Result<Self> {
        if dst.0 < src.0 || dst.1 < src.1 {
            return Err(Error::ShapeMismatch {
                expected: src,
                actual: dst,
            });
        }
        Ok(Self {
            rows: AxisTaps::new(src.0, dst.0),
            cols: AxisTaps::new(src.1, dst.1),
        })
    }

    #[inline]
    fn sample(&self, channel: &ArrayView2<'_, f32>, y: usize, x: usize) -> f32 {
        let (y0, y1, fy) = (self.rows.lo[y], self.rows.hi[y], self.rows.frac[y]);
        let (x0, x1, fx) = (self.cols.lo[x], self.cols.hi[x], self.cols.frac[x]);
        let v = |yy: usize, xx: usize| f64::from(channel[[yy, xx]]);
        let top = (1.0 - fx) * v(y0, x0) + fx * v(y0, x1);
        let bottom = (1.0 - fx) * v(y1, x0) + fx * v(y1, x1);
        ((1.0 - fy) * top + fy * bottom) as f32
    }
}

/// Bilinearly resizes every channel to `height x width`.
pub fn upsample(stack: &HeatmapStack, height: usize, width: usize) -> Result<HeatmapStack> {
    let resampler = Resampler::new((stack.height(), stack.width()), (height, width))?;
    let mut out = Array3::<f32>::zeros((stack.channels(), height, width));
    for (mut dst, src) in out.outer_iter_mut().zip(stack.values.outer_iter()) {
        for ((y, x), v) in dst.indexed_iter_mut() {
            *v = resampler.sample(&src, y, x);
        }
    }
    Ok(HeatmapStack::new(out))
}

/// Per-pixel argmax (ties go to the lowest class index) and max.
pub fn classify_pixels(stack: &HeatmapStack) -> Result<PixelClassification> {
    if stack.channels() == 0 {
        return Err(Error::InvalidBank("heatmap stack has no channels".into()));
    }
    let (h, w) = (stack.height(), stack.width());
    let mut labels = Array2::<u16>::zeros((h, w));
    let mut scores = stack.values.index_axis(Axis(0), 0).to_owned();
    for (k, channel) in stack.values.outer_iter().enumerate().skip(1) {
        Zip::from(&mut labels)
            .and(&mut scores)
            .and(&channel)
            .for_each(|l, s, &v| {
                if v > *s {
                    *s = v;
                    *l = k as u16;
                }
            });
    }
    Ok(PixelClassification { labels, scores })
}

/// Same result as `classify_pixels(&upsample(stack, height, width)?)` without
/// materializing the full-resolution stack.
pub fn classify_upsampled(
    stack: &HeatmapStack,
    height: usize,
    width: usize,
) -> Result<PixelClassification> {
    if stack.channels() == 0 {
        return Err(Error::InvalidBank("heatmap stack has no channels".into()));
    }
    let resampler = Resampler::new((stack.height(), stack.width()), (height, width))?;
    let channels: Vec<_> = stack.values.outer_iter().collect();
    let mut labels = Array2::<u16>::zeros((height, width));
    let mut scores = Array2::<f32>::zeros((height, width));
    Zip::indexed(&mut labels)
        .and(&mut scores)
        .for_each(|(y, x), l, s| {
            let mut best = resampler.sample(&channels[0], y, x);
            let mut arg = 0;
            for (k, ch) in channels.iter().enumerate().skip(1) {
                let v = resampler.sample(ch, y, x);
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            *l = arg as u16;
            *s = best;
        });
    Ok(PixelClassification { labels, scores })
}
