//! Snaps per-pixel OOD decisions onto class-agnostic foreground proposals.
//!
//! A proposal whose pixels are more than half OOD becomes OOD as a whole;
//! pixels outside every surviving proposal are never OOD in the refined map.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::detector::{check_threshold, IncsMap, OodDecision};
use crate::error::{Error, Result};
use crate::tensor_io::{read_mask, BinaryMask, ProposalRecord};

pub const DEFAULT_PROPOSAL_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub mask: BinaryMask,
    pub score: f64,
    pub source_id: String,
}

/// Proposals for one image; all masks share the same dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn new(proposals: Vec<Proposal>) -> Result<Self> {
        if let Some(first) = proposals.first() {
            let dims = first.mask.dims();
            for p in &proposals {
                p.mask.check_dims(dims)?;
                if !(0.0..=1.0).contains(&p.score) {
                    return Err(Error::InvalidScore(p.score));
                }
            }
        }
        Ok(Self { proposals })
    }

    pub fn load(records: &[ProposalRecord]) -> Result<Self> {
        let proposals = records
            .iter()
            .map(|r| {
                Ok(Proposal {
                    mask: read_mask(&r.mask_path)?,
                    score: r.score,
                    source_id: r.source_id.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(proposals)
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn proposals(&self) -> &[Proposal] {
        &self.proposals
    }

    pub fn iter(&self) -> impl Iterator<Item = &Proposal> {
        self.proposals.iter()
    }

    fn check_dims(&self, dims: (usize, usize)) -> Result<()> {
        self.proposals
            .iter()
            .try_for_each(|p| p.mask.check_dims(dims))
    }

    fn surviving(
        &self,
        detector_threshold: f64,
    ) -> Result<impl Iterator<Item = (usize, &Proposal)>> {
        check_threshold(detector_threshold)?;
        Ok(self
            .proposals
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.score >= detector_threshold))
    }
}

/// Keeps proposals with `score >= detector_threshold`, in order.
pub fn filter_proposals(set: &ProposalSet, detector_threshold: f64) -> Result<ProposalSet> {
    Ok(ProposalSet {
        proposals: set
            .surviving(detector_threshold)?
            .map(|(_, p)| p.clone())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vote {
    pub is_ood: bool,
    pub ood_fraction: f64,
}

pub fn vote_mask(mask: &BinaryMask, ood: &Array2<bool>) -> Result<Vote> {
    mask.check_dims(ood.dim())?;
    let mut inside = 0usize;
    let mut flagged = 0usize;
    Zip::from(mask.bits()).and(ood).for_each(|&m, &o| {
        if m {
            inside += 1;
            flagged += usize::from(o);
        }
    });
    if inside == 0 {
        return Err(Error::EmptyProposalMask);
    }
    Ok(Vote {
        is_ood: 2 * flagged > inside,
        ood_fraction: flagged as f64 / inside as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignedClass {
    Ood,
    Class(u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVerdict {
    /// Index into the unfiltered proposal set.
    pub proposal: usize,
    pub source_id: String,
    pub is_ood: bool,
    pub ood_fraction: f64,
    pub assigned: AssignedClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDecision {
    pub ood: Array2<bool>,
    pub verdicts: Vec<MaskVerdict>,
}

pub fn refine_ood(
    decision: &OodDecision,
    set: &ProposalSet,
    detector_threshold: f64,
) -> Result<RefinedDecision> {
    set.check_dims(decision.dims())?;
    let mut ood = Array2::from_elem(decision.dims(), false);
    let mut verdicts = Vec::new();
    for (index, p) in set.surviving(detector_threshold)? {
        let vote = vote_mask(&p.mask, &decision.ood)?;
        let assigned = if vote.is_ood {
            Zip::from(&mut ood)
                .and(p.mask.bits())
                .for_each(|o, &m| *o |= m);
            AssignedClass::Ood
        } else {
            AssignedClass::Class(plurality_label(&p.mask, decision))
        };
        verdicts.push(MaskVerdict {
            proposal: index,
            source_id: p.source_id.clone(),
            is_ood: vote.is_ood,
            ood_fraction: vote.ood_fraction,
            assigned,
        });
    }
    Ok(RefinedDecision { ood, verdicts })
}

/// Most frequent label among the mask's in-distribution pixels (all of its
/// pixels if none are in-distribution); ties go to the lowest label.
fn plurality_label(mask: &BinaryMask, decision: &OodDecision) -> u16 {
    let tally = |skip_ood: bool| {
        let mut counts = BTreeMap::<u16, usize>::new();
        Zip::from(mask.bits())
            .and(&decision.ood)
            .and(&decision.labels)
            .for_each(|&m, &o, &l| {
                if m && !(skip_ood && o) {
                    *counts.entry(l).or_default() += 1;
                }
            });
        counts
    };
    let mut counts = tally(true);
    if counts.is_empty() {
        counts = tally(false);
    }
    let mut best = (0u16, 0usize);
    for (label, n) in counts {
        if n > best.1 {
            best = (label, n);
        }
    }
    best.0
}

/// Per-pixel score whose thresholding reproduces [`refine_ood`] at every INCS
/// threshold.
///
/// A mask with `n` pixels is OOD at `t` exactly when its `k`-th largest INCS
/// value exceeds `t`, `k = n / 2 + 1`. Each pixel takes the largest such value
/// over the surviving masks that contain it, or `-inf` outside all of them, so
/// `score > t` equals the refined OOD map at `t`.
pub fn refined_score_map(
    incs: &IncsMap,
    set: &ProposalSet,
    detector_threshold: f64,
) -> Result<Array2<f32>> {
    set.check_dims(incs.dims())?;
    let mut score = Array2::from_elem(incs.dims(), f32::NEG_INFINITY);
    for (_, p) in set.surviving(detector_threshold)? {
        let mut inside: Vec<f32> =
            Zip::from(p.mask.bits())
                .and(incs.values())
                .fold(Vec::new(), |mut acc, &m, &w| {
                    if m {
                        acc.push(w);
                    }
                    acc
                });
        if inside.is_empty() {
            return Err(Error::EmptyProposalMask);
        }
        let k = inside.len() / 2 + 1;
        let (_, &mut critical, _) = inside.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        Zip::from(&mut score).and(p.mask.bits()).for_each(|s, &m| {
            if m && critical > *s {
                *s = critical;
            }
        });
    }
    Ok(score)
}
