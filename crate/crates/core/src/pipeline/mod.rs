//! End-to-end commands: build and inspect banks, infer, evaluate, sweep and
//! render.
//!
//! Images are processed independently on a worker pool and results are
//! collected in manifest order, so outputs do not depend on the worker count.
//! A failing image is reported and skipped; errors before any image is touched
//! abort the command.

mod config;
mod render;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::bank::{build_bank, load_bank, save_bank, PrototypeBank};
use crate::detector::{incs_map, incs_map_in_range, threshold_ood, IncsMap, NormScope, ScoreRange};
use crate::error::{Error, Result};
use crate::extractor::{ExtractorBackend, FeatureMap};
use crate::matcher::{classify_upsampled, cosine_heatmaps, PixelClassification};
use crate::metrics::{
    confusion_counts, threshold_grid, Confusion, EvalSummary, ScoreSamples, ThresholdCurve,
};
use crate::refiner::{refine_ood, refined_score_map, ProposalSet};
use crate::tensor_io::{
    load_manifest, png_dimensions, read_mask, read_rgb, write_feature_map, write_label_map,
    write_mask, write_rgb, BinaryMask, DatasetManifest, ImageRecord,
};

pub use config::{ConfigOverrides, Mode, RunConfig};
pub use render::overlay;

pub const INCS_FILE: &str = "incs.pft";
pub const OOD_FILE: &str = "ood.png";
pub const REFINED_FILE: &str = "refined.png";
pub const LABELS_FILE: &str = "labels.png";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

/// Exit status for a command-level error: 2 for bad configuration or inputs
/// rejected before processing, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::InvalidConfig(_)
        | Error::ThresholdOutOfRange(_)
        | Error::UnknownBackend(_)
        | Error::InvalidManifest(_)
        | Error::MissingPath(_)
        | Error::DuplicateClassName(_)
        | Error::DuplicateImageId(_)
        | Error::UnknownClassName { .. }
        | Error::InvalidScore(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub image_id: String,
    pub error: String,
}

impl Failure {
    fn new(image_id: &str, err: &Error) -> Self {
        Self {
            image_id: image_id.to_owned(),
            error: err.root().to_string(),
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} workers: {e}")))
}

/// Runs `f` over `records` on `jobs` workers, keeping input order.
fn par_map<T: Send>(
    jobs: usize,
    records: &[&ImageRecord],
    f: impl Fn(&ImageRecord) -> Result<T> + Sync,
) -> Result<Vec<Result<T>>> {
    let pool = pool(jobs)?;
    Ok(pool.install(|| {
        records
            .par_iter()
            .map(|r| f(r).map_err(|e| e.in_image(&r.id)))
            .collect()
    }))
}

// Bank commands.

pub fn bank_build(cfg: &RunConfig) -> Result<PrototypeBank> {
    let manifest = load_manifest(&cfg.bank_manifest)?;
    let bank = build_bank(&manifest, &cfg.backend()?, cfg.per_class_limit)?;
    save_bank(&bank, cfg.bank_path()?)?;
    Ok(bank)
}

/// Human-readable per-class prototype counts.
pub fn bank_summary(bank: &PrototypeBank) -> String {
    let mut out = format!("dim {}, {} classes\n", bank.dim(), bank.num_classes());
    for (name, n) in bank.summary() {
        out.push_str(&format!("  {name}: {n}\n"));
    }
    out
}

// Per-image scoring.

/// Everything downstream needs from one image.
#[derive(Debug, Clone)]
pub struct ScoredImage {
    pub image_id: String,
    pub classification: PixelClassification,
    pub incs: IncsMap,
    /// Loaded in masked mode only.
    pub proposals: Option<ProposalSet>,
}

fn classify(
    record: &ImageRecord,
    bank: &PrototypeBank,
    backend: &ExtractorBackend,
) -> Result<PixelClassification> {
    let features = backend.extract(record)?;
    let heatmaps = cosine_heatmaps(&features, bank)?;
    let (w, h) = png_dimensions(&record.image_path)?;
    classify_upsampled(&heatmaps, h as usize, w as usize)
}

/// Shared setup for the per-image commands.
struct Session {
    cfg: RunConfig,
    manifest: DatasetManifest,
    backend: ExtractorBackend,
}

impl Session {
    fn open(cfg: &RunConfig) -> Result<Self> {
        Ok(Self {
            manifest: load_manifest(&cfg.manifest)?,
            backend: cfg.backend()?,
            cfg: cfg.clone(),
        })
    }

    fn select(&self, ids: &[String]) -> Result<Vec<&ImageRecord>> {
        if ids.is_empty() {
            return Ok(self.manifest.images.iter().collect());
        }
        ids.iter()
            .map(|id| {
                self.manifest.image(id).ok_or_else(|| {
                    Error::InvalidConfig(format!("image {id:?} is not in the manifest"))
                })
            })
            .collect()
    }

    /// Similarity range over every manifest image when INCS is normalized
    /// dataset-wide.
    fn range(&self, bank: &PrototypeBank) -> Result<Option<ScoreRange>> {
        if self.cfg.normalization_scope == NormScope::PerImage {
            return Ok(None);
        }
        let all: Vec<&ImageRecord> = self.manifest.images.iter().collect();
        let ranges = par_map(self.cfg.jobs, &all, |r| {
            Ok(ScoreRange::of(
                classify(r, bank, &self.backend)?.scores.view(),
            ))
        })?;
        Ok(ranges
            .into_iter()
            .filter_map(|r| r.ok().flatten())
            .reduce(ScoreRange::merge))
    }

    fn score_one(
        &self,
        bank: &PrototypeBank,
        r: &ImageRecord,
        range: Option<ScoreRange>,
    ) -> Result<ScoredImage> {
        let classification = classify(r, bank, &self.backend)?;
        let incs = match range {
            Some(range) => incs_map_in_range(classification.scores.view(), range),
            None => incs_map(classification.scores.view()),
        };
        let proposals = match self.cfg.mode {
            Mode::Pixel => None,
            Mode::Masked => {
                if r.proposals.is_empty() {
                    log::warn!("image {}: no proposals; refined mask is empty", r.id);
                }
                Some(ProposalSet::load(&r.proposals)?)
            }
        };
        Ok(ScoredImage {
            image_id: r.id.clone(),
            classification,
            incs,
            proposals,
        })
    }
}

/// Pixel-level OOD map and, in masked mode, the refined one.
fn decide(
    img: &ScoredImage,
    incs_threshold: f64,
    detector_threshold: f64,
) -> Result<(Array2<bool>, Option<Array2<bool>>)> {
    let decision = threshold_ood(&img.incs, &img.classification.labels, incs_threshold)?;
    let refined = match &img.proposals {
        Some(set) => Some(refine_ood(&decision, set, detector_threshold)?.ood),
        None => None,
    };
    Ok((decision.ood, refined))
}

/// Per-pixel score whose `> t` thresholding gives the final OOD map at `t`.
fn curve_scores(img: &ScoredImage, detector_threshold: f64) -> Result<Array2<f32>> {
    match &img.proposals {
        Some(set) => refined_score_map(&img.incs, set, detector_threshold),
        None => Ok(img.incs.values().clone()),
    }
}

// Inference.

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InferOutcome {
    pub written: Vec<String>,
    pub failures: Vec<Failure>,
}

/// Writes `incs.pft`, `ood.png`, `labels.png` and, in masked mode,
/// `refined.png` under `<out>/<image id>/`. An empty `ids` means every image.
pub fn infer(cfg: &RunConfig, ids: &[String]) -> Result<InferOutcome> {
    let session = Session::open(cfg)?;
    let records = session.select(ids)?;
    let out = cfg.out_dir()?;
    let bank = load_bank(cfg.bank_path()?)?;
    let backend_id = session.backend.id();
    let range = session.range(&bank)?;
    let results = par_map(cfg.jobs, &records, |r| {
        let img = session.score_one(&bank, r, range)?;
        write_image_outputs(out, &img, &backend_id, cfg)
    })?;

    let mut outcome = InferOutcome::default();
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(()) => outcome.written.push(r.id.clone()),
            Err(e) => {
                log::error!("image {}: {}", r.id, e.root());
                outcome.failures.push(Failure::new(&r.id, &e));
            }
        }
    }
    Ok(outcome)
}

fn write_image_outputs(
    out: &Path,
    img: &ScoredImage,
    backend_id: &str,
    cfg: &RunConfig,
) -> Result<()> {
    let dir = out.join(&img.image_id);
    create_dir(&dir)?;
    let (h, w) = img.incs.dims();
    let incs = FeatureMap::new(
        img.incs
            .values()
            .clone()
            .into_shape_with_order((1, h, w))
            .expect("same element count"),
        1,
        backend_id,
        &img.image_id,
    )?;
    write_feature_map(&incs, dir.join(INCS_FILE))?;
    let (ood, refined) = decide(img, cfg.incs_threshold, cfg.detector_threshold)?;
    write_mask(&BinaryMask::new(ood), dir.join(OOD_FILE))?;
    if let Some(refined) = refined {
        write_mask(&BinaryMask::new(refined), dir.join(REFINED_FILE))?;
    }
    write_label_map(&img.classification.labels, dir.join(LABELS_FILE))
}

// Evaluation.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageEval {
    pub image_id: String,
    pub counts: Confusion,
    pub iou: f64,
    pub f1: f64,
    /// `None` when the image has no OOD pixels.
    pub aupr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    #[serde(flatten)]
    pub summary: EvalSummary,
    pub per_image: Vec<ImageEval>,
    /// Images without ground truth.
    pub skipped: Vec<String>,
    pub failures: Vec<Failure>,
}

/// Ground truth and scores for one evaluated image.
struct EvalInput {
    scored: ScoredImage,
    gt: BinaryMask,
    ignore: Option<BinaryMask>,
}

impl EvalInput {
    fn load(scored: ScoredImage, record: &ImageRecord) -> Result<Self> {
        let gt = read_mask(
            record
                .ood_gt_path
                .as_ref()
                .expect("evaluated images have ground truth"),
        )?;
        let ignore = record.ignore_path.as_ref().map(read_mask).transpose()?;
        let dims = scored.incs.dims();
        for m in std::iter::once(&gt).chain(&ignore) {
            if m.dims() != dims {
                return Err(Error::ShapeMismatch {
                    expected: dims,
                    actual: m.dims(),
                });
            }
        }
        Ok(Self { scored, gt, ignore })
    }

    fn samples(&self, detector_threshold: f64) -> Result<ScoreSamples> {
        let scores = curve_scores(&self.scored, detector_threshold)?;
        ScoreSamples::from_map(scores.view(), &self.gt, self.ignore.as_ref())
    }

    fn counts(&self, incs_threshold: f64, detector_threshold: f64) -> Result<Confusion> {
        let (ood, refined) = decide(&self.scored, incs_threshold, detector_threshold)?;
        confusion_counts(&refined.unwrap_or(ood), &self.gt, self.ignore.as_ref())
    }
}

struct EvalSet {
    inputs: Vec<EvalInput>,
    skipped: Vec<String>,
    failures: Vec<Failure>,
}

fn load_eval_set(session: &Session, bank: &PrototypeBank) -> Result<EvalSet> {
    let (records, skipped): (Vec<&ImageRecord>, Vec<&ImageRecord>) = session
        .manifest
        .images
        .iter()
        .partition(|r| r.ood_gt_path.is_some());
    let range = session.range(bank)?;
    let scored = par_map(session.cfg.jobs, &records, |r| {
        session.score_one(bank, r, range)
    })?;
    let mut set = EvalSet {
        inputs: Vec::new(),
        skipped: skipped.iter().map(|r| r.id.clone()).collect(),
        failures: Vec::new(),
    };
    for (r, s) in records.iter().zip(scored) {
        match s.and_then(|s| EvalInput::load(s, r)) {
            Ok(input) => set.inputs.push(input),
            Err(e) => {
                log::error!("image {}: {}", r.id, e.root());
                set.failures.push(Failure::new(&r.id, &e));
            }
        }
    }
    Ok(set)
}

/// Pooled curve and fixed-threshold counts over the evaluation set.
fn summarize(
    inputs: &[EvalInput],
    incs_threshold: f64,
    detector_threshold: f64,
) -> Result<(EvalSummary, ThresholdCurve)> {
    let samples = inputs
        .iter()
        .map(|i| i.samples(detector_threshold))
        .collect::<Result<Vec<_>>>()?;
    let grid = threshold_grid(&samples);
    let curve = ThresholdCurve::from_samples(&samples, &grid);
    let fixed = inputs
        .iter()
        .map(|i| i.counts(incs_threshold, detector_threshold))
        .sum::<Result<Confusion>>()?;
    Ok((EvalSummary::new(&curve, fixed)?, curve))
}

/// Evaluates every manifest image that has ground truth, writing
/// `report.json` and `curves.csv` to the output directory.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    let session = Session::open(cfg)?;
    let out = cfg.out_dir()?;
    let bank = load_bank(cfg.bank_path()?)?;
    let set = load_eval_set(&session, &bank)?;
    let (summary, curve) = summarize(&set.inputs, cfg.incs_threshold, cfg.detector_threshold)?;

    let mut per_image = Vec::with_capacity(set.inputs.len());
    for input in &set.inputs {
        let samples = input.samples(cfg.detector_threshold)?;
        let grid = threshold_grid([&samples]);
        let counts = input.counts(cfg.incs_threshold, cfg.detector_threshold)?;
        per_image.push(ImageEval {
            image_id: input.scored.image_id.clone(),
            counts,
            iou: counts.iou(),
            f1: counts.f1(),
            aupr: ThresholdCurve::from_samples([&samples], &grid).aupr().ok(),
        });
    }

    let report = EvalReport {
        config: cfg.clone(),
        summary,
        per_image,
        skipped: set.skipped,
        failures: set.failures,
    };
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out.join(REPORT_FILE), &(json + "\n"))?;
    write_text(&out.join(CURVES_FILE), &curve.to_csv())?;
    Ok(report)
}

// Sweeps.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Incs,
    Detector,
    Prototypes,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incs" => Ok(SweepAxis::Incs),
            "detector" => Ok(SweepAxis::Detector),
            "prototypes" => Ok(SweepAxis::Prototypes),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep axis {other:?} (expected incs, detector or prototypes)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Incs => "incs",
            SweepAxis::Detector => "detector",
            SweepAxis::Prototypes => "prototypes",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub iou: f64,
    pub f1: f64,
    pub aupr: f64,
    pub fpr: f64,
}

impl SweepRow {
    fn new(value: f64, s: &EvalSummary) -> Self {
        Self {
            value,
            iou: s.iou,
            f1: s.f1,
            aupr: s.aupr,
            fpr: s.fpr_at_95tpr,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub csv_path: PathBuf,
    pub failures: Vec<Failure>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,iou,f1,aupr,fpr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value, r.iou, r.f1, r.aupr, r.fpr
        ));
    }
    out
}

/// Re-evaluates once per grid value along `axis` and writes
/// `sweep_<axis>.csv`. The prototypes axis rebuilds the bank with that many
/// prototypes per class.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, grid: &[f64]) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    for &v in grid {
        match axis {
            SweepAxis::Incs | SweepAxis::Detector => crate::detector::check_threshold(v)?,
            SweepAxis::Prototypes if v < 1.0 || v.fract() != 0.0 => {
                return Err(Error::InvalidConfig(format!(
                    "prototype count {v} is not a positive integer"
                )))
            }
            SweepAxis::Prototypes => {}
        }
    }
    let session = Session::open(cfg)?;
    let out = cfg.out_dir()?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut failures = Vec::new();

    match axis {
        SweepAxis::Incs | SweepAxis::Detector => {
            let bank = load_bank(cfg.bank_path()?)?;
            let set = load_eval_set(&session, &bank)?;
            for &v in grid {
                let (t, d) = match axis {
                    SweepAxis::Incs => (v, cfg.detector_threshold),
                    _ => (cfg.incs_threshold, v),
                };
                rows.push(SweepRow::new(v, &summarize(&set.inputs, t, d)?.0));
            }
            failures = set.failures;
        }
        SweepAxis::Prototypes => {
            let bank_manifest = load_manifest(&cfg.bank_manifest)?;
            for &v in grid {
                let bank = build_bank(&bank_manifest, &session.backend, v as usize)?;
                let set = load_eval_set(&session, &bank)?;
                rows.push(SweepRow::new(
                    v,
                    &summarize(&set.inputs, cfg.incs_threshold, cfg.detector_threshold)?.0,
                ));
                failures.extend(set.failures);
            }
            failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            failures.dedup();
        }
    }

    create_dir(out)?;
    let csv_path = out.join(format!("sweep_{axis}.csv"));
    write_text(&csv_path, &sweep_csv(&rows))?;
    Ok(SweepOutcome {
        rows,
        csv_path,
        failures,
    })
}

// Rendering.

/// Writes `<out>/<id>/overlay.png` from the image and its inferred mask
/// (`refined.png` in masked mode, `ood.png` otherwise).
pub fn render(cfg: &RunConfig, image_id: &str) -> Result<PathBuf> {
    let session = Session::open(cfg)?;
    let record = session.select(&[image_id.to_owned()])?[0];
    let dir = cfg.out_dir()?.join(image_id);
    let mask_path = dir.join(match cfg.mode {
        Mode::Pixel => OOD_FILE,
        Mode::Masked => REFINED_FILE,
    });
    if !mask_path.exists() {
        return Err(Error::MissingInference(mask_path));
    }
    let image = read_rgb(&record.image_path).map_err(|e| e.in_image(image_id))?;
    let mask = read_mask(&mask_path)?;
    let path = dir.join(OVERLAY_FILE);
    write_rgb(
        &overlay(&image, &mask).map_err(|e| e.in_image(image_id))?,
        &path,
    )?;
    Ok(path)
}
