//! Run configuration: a JSON file layered under command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bank::DEFAULT_PER_CLASS_LIMIT;
use crate::detector::{check_threshold, NormScope, DEFAULT_INCS_THRESHOLD};
use crate::error::{Error, Result};
use crate::extractor::ExtractorBackend;
use crate::refiner::DEFAULT_PROPOSAL_THRESHOLD;

/// How OOD pixels are scored: straight from INCS, or snapped to proposals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Pixel,
    Masked,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Mode::Pixel),
            "masked" => Ok(Mode::Masked),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode {other:?} (expected pixel or masked)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Pixel => "pixel",
            Mode::Masked => "masked",
        })
    }
}

/// Every setting optional; used for both the config file and CLI flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub manifest: Option<PathBuf>,
    pub bank_manifest: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub backend: Option<String>,
    pub mode: Option<Mode>,
    pub incs_threshold: Option<f64>,
    pub detector_threshold: Option<f64>,
    pub normalization_scope: Option<NormScope>,
    pub per_class_limit: Option<usize>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl ConfigOverrides {
    /// Reads a JSON config file. Relative paths in it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.manifest,
            &mut cfg.bank_manifest,
            &mut cfg.bank,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Fields set in `self` win over `lower`.
    pub fn over(self, lower: ConfigOverrides) -> ConfigOverrides {
        ConfigOverrides {
            manifest: self.manifest.or(lower.manifest),
            bank_manifest: self.bank_manifest.or(lower.bank_manifest),
            bank: self.bank.or(lower.bank),
            backend: self.backend.or(lower.backend),
            mode: self.mode.or(lower.mode),
            incs_threshold: self.incs_threshold.or(lower.incs_threshold),
            detector_threshold: self.detector_threshold.or(lower.detector_threshold),
            normalization_scope: self.normalization_scope.or(lower.normalization_scope),
            per_class_limit: self.per_class_limit.or(lower.per_class_limit),
            out: self.out.or(lower.out),
            jobs: self.jobs.or(lower.jobs),
        }
    }
}

/// Fully resolved settings. Serializes to the echo embedded in reports;
/// `out` and `jobs` only affect where and how fast results are produced and
/// are left out of it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Manifest the bank is built from; defaults to `manifest`.
    pub bank_manifest: PathBuf,
    pub bank: Option<PathBuf>,
    pub backend: String,
    pub mode: Mode,
    pub incs_threshold: f64,
    pub detector_threshold: f64,
    pub normalization_scope: NormScope,
    pub per_class_limit: usize,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[serde(skip)]
    pub jobs: usize,
}

impl RunConfig {
    pub fn resolve(o: ConfigOverrides) -> Result<Self> {
        let manifest = o
            .manifest
            .ok_or_else(|| Error::InvalidConfig("no manifest given".into()))?;
        let backend = o.backend.unwrap_or_else(|| "file".into());
        backend.parse::<ExtractorBackend>()?;
        let incs_threshold = o.incs_threshold.unwrap_or(DEFAULT_INCS_THRESHOLD);
        check_threshold(incs_threshold)?;
        let detector_threshold = o.detector_threshold.unwrap_or(DEFAULT_PROPOSAL_THRESHOLD);
        check_threshold(detector_threshold)?;
        let per_class_limit = o.per_class_limit.unwrap_or(DEFAULT_PER_CLASS_LIMIT);
        if per_class_limit == 0 {
            return Err(Error::InvalidConfig("per_class_limit must be >= 1".into()));
        }
        let jobs = match o.jobs {
            Some(0) => return Err(Error::InvalidConfig("jobs must be >= 1".into())),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, usize::from),
        };
        Ok(Self {
            bank_manifest: o.bank_manifest.unwrap_or_else(|| manifest.clone()),
            manifest,
            bank: o.bank,
            backend,
            mode: o.mode.unwrap_or_default(),
            incs_threshold,
            detector_threshold,
            normalization_scope: o.normalization_scope.unwrap_or_default(),
            per_class_limit,
            out: o.out,
            jobs,
        })
    }

    pub fn backend(&self) -> Result<ExtractorBackend> {
        self.backend.parse()
    }

    pub fn bank_path(&self) -> Result<&Path> {
        self.bank
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no bank path given".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("no output directory given".into()))
    }
}
