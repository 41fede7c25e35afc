//! Concordance fusion of several teachers' class probabilities into one
//! pseudo-label with an agreement-weighted confidence, threshold selection
//! with Don't-Care masking, and assembly of the student's training set.
//!
//! For one output (a point or a box cluster) every teacher `T` emits a class
//! distribution `ŷᵀ`. The teacher holding the single highest probability
//! entry is the strongest opinion `T*`; its argmax `k*` is the pseudo-label
//! and `y* = ŷᵀ*[k*]`. The confidence is
//!
//! ```text
//! ĉ = y* + λ · |{T ≠ T* : argmax ŷᵀ = k*}|,      c = min(1, ĉ)
//! ```
//!
//! Ties are broken towards the lower teacher index, then the lower class id.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConcordError {
    #[error("no teacher outputs to fuse")]
    EmptyTeacherSet,
    #[error("teacher {teacher} emits {found} classes, expected {expected}")]
    LengthMismatch {
        teacher: usize,
        expected: usize,
        found: usize,
    },
    #[error("teacher {teacher} predicted {found} points, expected {expected}")]
    PointCountMismatch {
        teacher: usize,
        expected: usize,
        found: usize,
    },
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error("sequence {0} appears in both labeled and pseudo-labeled sets")]
    DuplicateSequence(String),
    #[error("sample {sample}: {labels} labels for {points} points")]
    SampleShape {
        sample: String,
        labels: usize,
        points: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub theta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            theta: 0.7,
        }
    }
}

impl FusionConfig {
    pub fn new(lambda: f64, theta: f64) -> Result<Self, ConcordError> {
        let cfg = Self { lambda, theta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConcordError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ConcordError::InvalidConfig(format!("lambda {} < 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(ConcordError::InvalidConfig(format!(
                "theta {} outside [0, 1]",
                self.theta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    pub confidence: f64,
    pub selected: bool,
}

/// Argmax with the lowest index winning ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Strongest opinion among the teachers and the unclipped confidence `ĉ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Opinion {
    pub class: usize,
    pub teacher: usize,
    pub y_star: f64,
    pub agreeing: usize,
    pub c_hat: f64,
}

pub fn strongest_opinion<V: AsRef<[f64]>>(
    outputs: &[V],
    lambda: f64,
) -> Result<Opinion, ConcordError> {
    let first = outputs.first().ok_or(ConcordError::EmptyTeacherSet)?.as_ref();
    let classes = first.len();
    if classes == 0 {
        return Err(ConcordError::LengthMismatch {
            teacher: 0,
            expected: 1,
            found: 0,
        });
    }
    let mut teacher = 0;
    let mut class = argmax(first);
    let mut votes = Vec::with_capacity(outputs.len());
    for (t, out) in outputs.iter().enumerate() {
        let out = out.as_ref();
        if out.len() != classes {
            return Err(ConcordError::LengthMismatch {
                teacher: t,
                expected: classes,
                found: out.len(),
            });
        }
        let k = argmax(out);
        if out[k] > outputs[teacher].as_ref()[class] {
            teacher = t;
            class = k;
        }
        votes.push(k);
    }
    let y_star = outputs[teacher].as_ref()[class];
    let agreeing = votes
        .iter()
        .enumerate()
        .filter(|&(t, &k)| t != teacher && k == class)
        .count();
    Ok(Opinion {
        class,
        teacher,
        y_star,
        agreeing,
        c_hat: y_star + lambda * agreeing as f64,
    })
}

/// Fused label for one output. `selected` reflects `cfg.theta`.
pub fn fuse_point<V: AsRef<[f64]>>(
    outputs: &[V],
    cfg: &FusionConfig,
) -> Result<PseudoLabel, ConcordError> {
    let op = strongest_opinion(outputs, cfg.lambda)?;
    let confidence = op.c_hat.min(1.0);
    Ok(PseudoLabel {
        class: op.class,
        confidence,
        selected: confidence >= cfg.theta,
    })
}

/// `fuse_point` for every point of a scan. `teachers[t][p]` is teacher `t`'s
/// distribution for point `p`.
pub fn fuse_scan<V: AsRef<[f64]> + Sync>(
    teachers: &[Vec<V>],
    cfg: &FusionConfig,
) -> Result<Vec<PseudoLabel>, ConcordError> {
    let first = teachers.first().ok_or(ConcordError::EmptyTeacherSet)?;
    let points = first.len();
    for (t, out) in teachers.iter().enumerate() {
        if out.len() != points {
            return Err(ConcordError::PointCountMismatch {
                teacher: t,
                expected: points,
                found: out.len(),
            });
        }
    }
    (0..points)
        .into_par_iter()
        .map(|p| {
            let per_teacher: Vec<&[f64]> = teachers.iter().map(|t| t[p].as_ref()).collect();
            fuse_point(&per_teacher, cfg)
        })
        .collect()
}

/// Re-applies a confidence threshold. Deselected labels become Don't Care.
pub fn select(labels: &[PseudoLabel], theta: f64) -> Vec<PseudoLabel> {
    labels
        .iter()
        .map(|l| PseudoLabel {
            selected: l.confidence >= theta,
            ..*l
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
}

/// Per-point targets of one reference scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScan {
    pub sequence: String,
    pub provenance: Provenance,
    pub classes: Vec<usize>,
    pub confidences: Vec<f64>,
    /// False marks a Don't-Care point.
    pub selected: Vec<bool>,
}

impl LabeledScan {
    /// Ground-truth annotation: every point kept with confidence 1.
    pub fn human(sequence: impl Into<String>, classes: Vec<usize>) -> Self {
        let n = classes.len();
        Self {
            sequence: sequence.into(),
            provenance: Provenance::Human,
            classes,
            confidences: vec![1.0; n],
            selected: vec![true; n],
        }
    }

    pub fn pseudo(sequence: impl Into<String>, labels: &[PseudoLabel]) -> Self {
        Self {
            sequence: sequence.into(),
            provenance: Provenance::Pseudo,
            classes: labels.iter().map(|l| l.class).collect(),
            confidences: labels.iter().map(|l| l.confidence).collect(),
            selected: labels.iter().map(|l| l.selected).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|&&s| s).count()
    }
}

/// The student's training set: human-labeled scans plus selected
/// pseudo-labeled scans.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoDataset {
    pub samples: Vec<LabeledScan>,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Confidences of all non-masked points.
    pub fn active_confidences(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().flat_map(|s| {
            s.confidences
                .iter()
                .zip(&s.selected)
                .filter(|(_, &sel)| sel)
                .map(|(&c, _)| c)
        })
    }
}

/// Union of the labeled and pseudo-labeled sets. Human samples are forced to
/// confidence 1 and fully selected.
pub fn assemble_dataset(
    labeled: Vec<LabeledScan>,
    pseudo: Vec<LabeledScan>,
) -> Result<PseudoDataset, ConcordError> {
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(labeled.len() + pseudo.len());
    for (mut s, prov) in labeled
        .into_iter()
        .map(|s| (s, Provenance::Human))
        .chain(pseudo.into_iter().map(|s| (s, Provenance::Pseudo)))
    {
        if !seen.insert(s.sequence.clone()) {
            return Err(ConcordError::DuplicateSequence(s.sequence));
        }
        if s.confidences.len() != s.classes.len() || s.selected.len() != s.classes.len() {
            return Err(ConcordError::SampleShape {
                sample: s.sequence,
                labels: s.confidences.len().min(s.selected.len()),
                points: s.classes.len(),
            });
        }
        s.provenance = prov;
        if prov == Provenance::Human {
            s.confidences.iter_mut().for_each(|c| *c = 1.0);
            s.selected.iter_mut().for_each(|x| *x = true);
        }
        samples.push(s);
    }
    Ok(PseudoDataset { samples })
}
