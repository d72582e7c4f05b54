//! Pixel-level anomaly-segmentation metrics.
//!
//! Positive = OOD pixel. A pixel is predicted positive at threshold `t` when
//! its score is strictly greater than `t`, the same rule the detector uses.
//! Counts are pooled over all evaluated images before any ratio is taken.

use std::ops::{Add, AddAssign};

use ndarray::{Array2, ArrayView2, Zip};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor_io::BinaryMask;

pub const UNIFORM_GRID_POINTS: usize = 512;
/// Unique score values join the grid while the pooled pixel count stays at or
/// below this.
pub const EXACT_GRID_LIMIT: usize = 100_000;
pub const DEFAULT_TARGET_TPR: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn predicted(&self) -> u64 {
        self.tp + self.fp
    }

    /// `None` when nothing is predicted positive.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted() > 0).then(|| self.tp as f64 / self.predicted() as f64)
    }

    /// True positive rate; `None` without positives.
    pub fn recall(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64)
    }

    /// Zero when there are no negatives to misclassify.
    pub fn fpr(&self) -> f64 {
        if self.negatives() == 0 {
            0.0
        } else {
            self.fp as f64 / self.negatives() as f64
        }
    }

    /// 1 when prediction and ground truth are both empty.
    pub fn iou(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }

    /// Dice coefficient; 1 when prediction and ground truth are both empty.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Confusion {
        iter.fold(Confusion::default(), Add::add)
    }
}

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}

/// Counts over all pixels not marked in `ignore`.
pub fn confusion_counts(
    pred: &Array2<bool>,
    gt: &BinaryMask,
    ignore: Option<&BinaryMask>,
) -> Result<Confusion> {
    check_shape(gt.dims(), pred.dim())?;
    if let Some(ig) = ignore {
        check_shape(gt.dims(), ig.dims())?;
    }
    let mut c = Confusion::default();
    for ((idx, &p), &g) in pred.indexed_iter().zip(gt.bits().iter()) {
        if ignore.is_some_and(|ig| ig.bits()[idx]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn binary_iou(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(confusion_counts(pred, &BinaryMask::new(gt.clone()), None)?.iou())
}

pub fn f1(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64> {
    Ok(confusion_counts(pred, &BinaryMask::new(gt.clone()), None)?.f1())
}

/// Scores of one image split by ground truth, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSamples {
    positives: Vec<f32>,
    negatives: Vec<f32>,
}

impl ScoreSamples {
    pub fn new(mut positives: Vec<f32>, mut negatives: Vec<f32>) -> Self {
        positives.sort_by(f32::total_cmp);
        negatives.sort_by(f32::total_cmp);
        Self {
            positives,
            negatives,
        }
    }

    pub fn from_map(
        scores: ArrayView2<'_, f32>,
        gt: &BinaryMask,
        ignore: Option<&BinaryMask>,
    ) -> Result<Self> {
        check_shape(gt.dims(), scores.dim())?;
        if let Some(ig) = ignore {
            check_shape(gt.dims(), ig.dims())?;
        }
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        Zip::indexed(scores).and(gt.bits()).for_each(|idx, &s, &g| {
            if ignore.is_some_and(|ig| ig.bits()[idx]) {
                return;
            }
            if g {
                positives.push(s);
            } else {
                negatives.push(s);
            }
        });
        Ok(Self::new(positives, negatives))
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts_at(&self, threshold: f64) -> Confusion {
        let above =
            |v: &[f32]| (v.len() - v.partition_point(|&s| f64::from(s) <= threshold)) as u64;
        let tp = above(&self.positives);
        let fp = above(&self.negatives);
        Confusion {
            tp,
            fp,
            fn_: self.positives.len() as u64 - tp,
            tn: self.negatives.len() as u64 - fp,
        }
    }

    fn scores(&self) -> impl Iterator<Item = f32> + '_ {
        self.positives.iter().chain(&self.negatives).copied()
    }
}

/// Descending threshold grid: 512 uniform points over `[0, 1]`, plus every
/// finite score value when the pooled sample count is small enough.
pub fn threshold_grid<'a>(samples: impl IntoIterator<Item = &'a ScoreSamples> + Clone) -> Vec<f64> {
    let total: usize = samples.clone().into_iter().map(ScoreSamples::len).sum();
    let mut grid: Vec<f64> = (0..UNIFORM_GRID_POINTS)
        .map(|i| i as f64 / (UNIFORM_GRID_POINTS - 1) as f64)
        .collect();
    if total <= EXACT_GRID_LIMIT {
        for s in samples {
            grid.extend(s.scores().filter(|v| v.is_finite()).map(f64::from));
        }
    }
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub counts: Confusion,
}

impl CurvePoint {
    pub fn precision(&self) -> Option<f64> {
        self.counts.precision()
    }

    pub fn recall(&self) -> f64 {
        self.counts.recall().unwrap_or(0.0)
    }

    pub fn fpr(&self) -> f64 {
        self.counts.fpr()
    }
}

/// Pooled confusion counts at each threshold, thresholds descending.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdCurve {
    points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FprAtTpr {
    pub fpr: f64,
    /// TPR of the point the FPR was read from.
    pub tpr: f64,
    /// Set when no point reached the target TPR.
    pub fallback: bool,
}

impl ThresholdCurve {
    /// Sums per-image counts at each grid threshold; `grid` must be descending.
    pub fn from_samples<'a>(
        samples: impl IntoIterator<Item = &'a ScoreSamples>,
        grid: &[f64],
    ) -> Self {
        let mut counts = vec![Confusion::default(); grid.len()];
        for s in samples {
            for (c, &t) in counts.iter_mut().zip(grid) {
                *c += s.counts_at(t);
            }
        }
        Self::from_counts(grid, counts)
    }

    pub fn from_counts(grid: &[f64], counts: Vec<Confusion>) -> Self {
        debug_assert!(grid.windows(2).all(|w| w[0] >= w[1]));
        Self {
            points: grid
                .iter()
                .zip(counts)
                .map(|(&threshold, counts)| CurvePoint { threshold, counts })
                .collect(),
        }
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn positives(&self) -> u64 {
        self.points.first().map_or(0, |p| p.counts.positives())
    }

    /// Step-wise average precision `sum (R_i - R_{i-1}) P_i` over descending
    /// thresholds, skipping points with no predictions.
    pub fn aupr(&self) -> Result<f64> {
        if self.positives() == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for p in &self.points {
            let Some(precision) = p.precision() else {
                continue;
            };
            let r = p.recall();
            ap += (r - prev_recall) * precision;
            prev_recall = r;
        }
        Ok(ap)
    }

    /// Lowest FPR among points with TPR at least `target`; otherwise the lowest
    /// FPR at the best TPR reached, flagged as a fallback.
    pub fn fpr_at_tpr(&self, target: f64) -> Result<FprAtTpr> {
        if self.positives() == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        let best = |pts: &mut dyn Iterator<Item = &CurvePoint>| {
            pts.map(|p| (p.fpr(), p.recall()))
                .min_by(|a, b| a.0.total_cmp(&b.0))
        };
        if let Some((fpr, tpr)) = best(&mut self.points.iter().filter(|p| p.recall() >= target)) {
            return Ok(FprAtTpr {
                fpr,
                tpr,
                fallback: false,
            });
        }
        let max_tpr = self
            .points
            .iter()
            .map(CurvePoint::recall)
            .fold(0.0, f64::max);
        let (fpr, tpr) =
            best(&mut self.points.iter().filter(|p| p.recall() == max_tpr)).unwrap_or((0.0, 0.0));
        Ok(FprAtTpr {
            fpr,
            tpr,
            fallback: true,
        })
    }

    /// `threshold,tp,fp,fn,tn,precision,recall,fpr`; undefined precision is
    /// left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,tp,fp,fn,tn,precision,recall,fpr\n");
        for p in &self.points {
            let c = p.counts;
            let precision = p.precision().map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                p.threshold,
                c.tp,
                c.fp,
                c.fn_,
                c.tn,
                precision,
                p.recall(),
                p.fpr()
            ));
        }
        out
    }
}

/// Curve for a flat list of scored pixels.
pub fn pr_curve(scores: &[f32], gt: &[bool], grid: &[f64]) -> Result<ThresholdCurve> {
    if scores.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, gt.len()),
            actual: (1, scores.len()),
        });
    }
    let (pos, neg): (Vec<_>, Vec<_>) = scores.iter().zip(gt).partition(|(_, &g)| g);
    let samples = ScoreSamples::new(
        pos.into_iter().map(|(&s, _)| s).collect(),
        neg.into_iter().map(|(&s, _)| s).collect(),
    );
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| b.total_cmp(a));
    Ok(ThresholdCurve::from_samples([&samples], &grid))
}

/// Headline numbers for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub aupr: f64,
    pub fpr_at_95tpr: f64,
    pub tpr_at_fpr_point: f64,
    pub fpr_fallback: bool,
    pub iou: f64,
    pub f1: f64,
    pub counts: Confusion,
    pub num_thresholds: usize,
    pub integration: &'static str,
}

impl EvalSummary {
    /// `fixed` holds the pooled counts at the operating threshold.
    pub fn new(curve: &ThresholdCurve, fixed: Confusion) -> Result<Self> {
        let fpr = curve.fpr_at_tpr(DEFAULT_TARGET_TPR)?;
        Ok(Self {
            aupr: curve.aupr()?,
            fpr_at_95tpr: fpr.fpr,
            tpr_at_fpr_point: fpr.tpr,
            fpr_fallback: fpr.fallback,
            iou: fixed.iou(),
            f1: fixed.f1(),
            counts: fixed,
            num_thresholds: curve.points().len(),
            integration: "ap-step",
        })
    }
}
