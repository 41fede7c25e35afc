//! Segmentation and detection metrics, plus run-to-run comparison tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detfuse::{iou3d, Box3D, DetError};

pub const REPORT_SCHEMA: &str = "concord-metrics";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("need at least two runs to compare")]
    TooFewRuns,
    #[error("run {run} does not match the first run: {reason}")]
    SchemaMismatch { run: String, reason: String },
    #[error(transparent)]
    Geometry(#[from] DetError),
}

/// Rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<usize>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            ignore: None,
            counts: vec![0; classes * classes],
        }
    }

    /// Points whose ground truth is `ignore` are never counted.
    pub fn with_ignore(mut self, ignore: usize) -> Self {
        self.ignore = Some(ignore);
        self
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let classes = rows.len();
        let mut cm = Self::new(classes);
        for (g, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), classes, "confusion matrix must be square");
            cm.counts[g * classes..(g + 1) * classes].copy_from_slice(row);
        }
        cm
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<(), EvalError> {
        if self.ignore == Some(truth) {
            return Ok(());
        }
        for c in [truth, pred] {
            if c >= self.classes {
                return Err(EvalError::ClassOutOfRange {
                    class: c,
                    classes: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    /// Accumulates aligned label slices; entries with `keep = false`
    /// (Don't Care) are skipped.
    pub fn add_all(&mut self, truth: &[usize], pred: &[usize], keep: Option<&[bool]>) -> Result<(), EvalError> {
        for i in 0..truth.len().min(pred.len()) {
            if keep.is_some_and(|k| !k[i]) {
                continue;
            }
            self.add(truth[i], pred[i])?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouResult {
    /// `None` where the class never occurs in truth or prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class `TP / (TP + FP + FN)` and their mean over defined classes.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouResult, EvalError> {
    if cm.classes < 2 || cm.total() == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(IouResult { per_class, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall `1/n, 2/n, …, 1` (KITTI uses 40).
    Points(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// TP flags in descending score order.
    pub ranked: Vec<bool>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ground_truths: usize,
    /// NaN when there is neither ground truth nor detection.
    pub ap: f64,
}

impl ApResult {
    pub fn is_defined(&self) -> bool {
        !self.ap.is_nan()
    }
}

/// AP of an already ranked TP/FP list against `ground_truths` objects.
pub fn ap_from_ranked(ranked: &[bool], ground_truths: usize, interp: Interpolation) -> ApResult {
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(if ground_truths > 0 {
            tp as f64 / ground_truths as f64
        } else {
            0.0
        });
    }
    let ap = if ground_truths == 0 {
        if ranked.is_empty() {
            f64::NAN
        } else {
            0.0
        }
    } else {
        // Envelope: best precision at this or any later rank.
        let mut envelope = precision.clone();
        for i in (0..envelope.len().saturating_sub(1)).rev() {
            envelope[i] = envelope[i].max(envelope[i + 1]);
        }
        match interp {
            Interpolation::AllPoint => {
                let mut area = 0.0;
                let mut prev_r = 0.0;
                for (r, p) in recall.iter().zip(&envelope) {
                    area += (r - prev_r) * p;
                    prev_r = *r;
                }
                area
            }
            Interpolation::Points(n) => {
                let n = n.max(1);
                let mut sum = 0.0;
                for j in 1..=n {
                    let level = j as f64 / n as f64;
                    if let Some(i) = recall.iter().position(|&r| r >= level - 1e-12) {
                        sum += envelope[i];
                    }
                }
                sum / n as f64
            }
        }
    };
    ApResult {
        ranked: ranked.to_vec(),
        precision,
        recall,
        ground_truths,
        ap,
    }
}

/// Scored TP/FP decisions for one frame: detections in descending score
/// order each claim the best still-unmatched ground truth with IoU at least
/// `match_iou`.
pub fn match_frame(dets: &[Box3D], gts: &[Box3D], match_iou: f64) -> Result<Vec<(f64, bool)>, EvalError> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score().total_cmp(&dets[a].score()).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = iou3d(&dets[i], gt)?;
            if iou >= match_iou && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push((dets[i].score(), best.is_some()));
    }
    Ok(out)
}

/// AP pooled over frames of `(detections, ground truths)`.
pub fn average_precision_frames(
    frames: &[(Vec<Box3D>, Vec<Box3D>)],
    match_iou: f64,
    interp: Interpolation,
) -> Result<ApResult, EvalError> {
    let mut scored = Vec::new();
    let mut gts = 0;
    for (dets, truth) in frames {
        scored.extend(match_frame(dets, truth, match_iou)?);
        gts += truth.len();
    }
    // Stable: equal scores keep frame order.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let ranked: Vec<bool> = scored.into_iter().map(|(_, tp)| tp).collect();
    Ok(ap_from_ranked(&ranked, gts, interp))
}

pub fn average_precision(dets: &[Box3D], gts: &[Box3D], match_iou: f64) -> Result<ApResult, EvalError> {
    average_precision_frames(&[(dets.to_vec(), gts.to_vec())], match_iou, Interpolation::AllPoint)
}

/// Versioned metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub version: u32,
    pub task: String,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

impl MetricsReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            schema: REPORT_SCHEMA.into(),
            version: REPORT_VERSION,
            task: task.into(),
            per_class: BTreeMap::new(),
            mean: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn segmentation(result: &IouResult) -> Self {
        let mut r = Self::new("segmentation");
        for (k, v) in result.per_class.iter().enumerate() {
            r.per_class.insert(k.to_string(), *v);
        }
        r.mean = (!result.mean.is_nan()).then_some(result.mean);
        r
    }

    /// Column order: class keys in numeric order, then `mean`.
    fn columns(&self) -> Vec<String> {
        let mut keys: Vec<&String> = self.per_class.keys().collect();
        keys.sort_by_key(|k| (k.parse::<u64>().unwrap_or(u64::MAX), k.to_string()));
        let mut cols: Vec<String> = if keys.len() > 1 {
            keys.into_iter().cloned().collect()
        } else {
            Vec::new()
        };
        cols.push("mean".into());
        cols
    }

    fn value(&self, column: &str) -> Option<f64> {
        if column == "mean" {
            self.mean
        } else {
            self.per_class.get(column).copied().flatten()
        }
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let mut out = String::new();
        for c in &cols {
            let _ = write!(out, "{c:>10}");
        }
        out.push('\n');
        for c in &cols {
            let _ = write!(out, "{:>10}", fmt_value(self.value(c)));
        }
        out.push('\n');
        out
    }
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub name: String,
    pub values: Vec<Option<f64>>,
    /// Difference to the first run, column by column.
    pub deltas: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<RunRow>,
}

impl Comparison {
    pub fn to_table(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
        let mut out = String::new();
        let _ = write!(out, "{:<name_w$}", "run");
        for c in &self.columns {
            let _ = write!(out, " {c:>10} {:>9}", "Δ");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<name_w$}", r.name);
            for (v, d) in r.values.iter().zip(&r.deltas) {
                let d = d.map_or_else(|| "-".into(), |d| format!("{d:+.4}"));
                let _ = write!(out, " {:>10} {d:>9}", fmt_value(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs × metrics with deltas against the first run.
pub fn compare_runs(runs: &[(String, MetricsReport)]) -> Result<Comparison, EvalError> {
    let (_, first) = runs.get(..2).ok_or(EvalError::TooFewRuns).map(|r| &r[0])?;
    let columns = first.columns();
    for (name, r) in &runs[1..] {
        let reason = if r.schema != first.schema || r.version != first.version {
            Some(format!("schema {} v{} vs {} v{}", r.schema, r.version, first.schema, first.version))
        } else if r.task != first.task {
            Some(format!("task {} vs {}", r.task, first.task))
        } else if r.per_class.keys().ne(first.per_class.keys()) {
            Some("class sets differ".to_string())
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(EvalError::SchemaMismatch {
                run: name.clone(),
                reason,
            });
        }
    }
    let rows = runs
        .iter()
        .map(|(name, r)| {
            let values: Vec<Option<f64>> = columns.iter().map(|c| r.value(c)).collect();
            let deltas = columns
                .iter()
                .zip(&values)
                .map(|(c, v)| Some(v.as_ref()? - first.value(c)?))
                .collect();
            RunRow {
                name: name.clone(),
                values,
                deltas,
            }
        })
        .collect();
    Ok(Comparison { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_confusion_matrix() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]);
        let r = miou(&cm).unwrap();
        assert!((r.per_class[0].unwrap() - 50.0 / 65.0).abs() < 1e-12);
        assert!((r.per_class[1].unwrap() - 0.7).abs() < 1e-12);
        assert!((r.mean - 0.7346).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_absent() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 0]]);
        let r = miou(&cm).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None]);
        assert_eq!(r.mean, 1.0);
        assert_eq!(miou(&ConfusionMatrix::new(3)), Err(EvalError::EmptyMatrix));
        assert_eq!(miou(&ConfusionMatrix::from_rows(&[vec![5]])), Err(EvalError::EmptyMatrix));
    }

    #[test]
    fn ignore_and_dont_care() {
        let mut cm = ConfusionMatrix::new(3).with_ignore(0);
        cm.add_all(&[0, 1, 2, 2], &[1, 1, 2, 1], Some(&[true, true, true, false])).unwrap();
        assert_eq!(cm.total(), 2);
        assert!(matches!(cm.add(1, 7), Err(EvalError::ClassOutOfRange { .. })));
    }

    #[test]
    fn hand_ranked_ap() {
        let r = ap_from_ranked(&[true, false, true], 2, Interpolation::AllPoint);
        assert_eq!(r.precision, vec![1.0, 0.5, 2.0 / 3.0]);
        assert_eq!(r.recall, vec![0.5, 0.5, 1.0]);
        assert!((r.ap - 0.8333).abs() < 1e-4);
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(ap_from_ranked(&[true, true], 2, Interpolation::AllPoint).ap, 1.0);
        assert_eq!(ap_from_ranked(&[], 3, Interpolation::AllPoint).ap, 0.0);
        assert_eq!(ap_from_ranked(&[false], 0, Interpolation::AllPoint).ap, 0.0);
        assert!(!ap_from_ranked(&[], 0, Interpolation::AllPoint).is_defined());
        assert_eq!(ap_from_ranked(&[true, true], 2, Interpolation::Points(40)).ap, 1.0);
        let r40 = ap_from_ranked(&[true, false, true], 2, Interpolation::Points(40));
        // 20 levels at precision 1, 20 levels at 2/3.
        assert!((r40.ap - (20.0 + 20.0 * 2.0 / 3.0) / 40.0).abs() < 1e-12);
    }

    fn cube(x: f64, score: f64) -> Box3D {
        Box3D::new([x, 0.0, 0.5], [1.0; 3], 0.0, vec![score, 1.0 - score])
    }

    #[test]
    fn box_matching() {
        let gts = vec![cube(0.0, 1.0), cube(10.0, 1.0)];
        let dets = vec![cube(0.05, 0.9), cube(0.0, 0.8), cube(10.0, 0.7)];
        // The duplicate at x=0 is a false positive.
        let r = average_precision(&dets, &gts, 0.7).unwrap();
        assert_eq!(r.ranked, vec![true, false, true]);
        assert!((r.ap - 0.8333).abs() < 1e-4);
        let perfect = average_precision(&gts, &gts, 0.7).unwrap();
        assert_eq!(perfect.ap, 1.0);
        assert_eq!(average_precision(&[], &gts, 0.7).unwrap().ap, 0.0);
    }

    fn report(mean: f64, per: &[(&str, f64)]) -> MetricsReport {
        let mut r = MetricsReport::new("segmentation");
        r.mean = Some(mean);
        for (k, v) in per {
            r.per_class.insert(k.to_string(), Some(*v));
        }
        r
    }

    #[test]
    fn comparison() {
        let a = report(58.8, &[("0", 50.0), ("1", 67.6)]);
        let b = report(60.6, &[("0", 52.0), ("1", 69.2)]);
        let cmp = compare_runs(&[("ssl".into(), a.clone()), ("ours".into(), b)]).unwrap();
        assert_eq!(cmp.columns, vec!["0", "1", "mean"]);
        assert!((cmp.rows[1].deltas[2].unwrap() - 1.8).abs() < 1e-9);
        assert!(cmp.to_table().contains("+1.8000"));

        let same = compare_runs(&[("x".into(), a.clone()), ("y".into(), a.clone())]).unwrap();
        assert!(same.rows.iter().flat_map(|r| &r.deltas).all(|d| *d == Some(0.0)));

        let single = report(0.5, &[("0", 0.5)]);
        let cmp = compare_runs(&[("x".into(), single.clone()), ("y".into(), single)]).unwrap();
        assert_eq!(cmp.columns, vec!["mean"]);

        let mut det = a.clone();
        det.task = "detection".into();
        assert!(matches!(
            compare_runs(&[("x".into(), a.clone()), ("y".into(), det)]),
            Err(EvalError::SchemaMismatch { .. })
        ));
        assert_eq!(compare_runs(&[("x".into(), a)]), Err(EvalError::TooFewRuns));
    }

    proptest! {
        #[test]
        fn miou_permutation_invariant(
            counts in proptest::collection::vec(0u64..50, 16),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(|c| c.to_vec()).collect();
            let cm = ConfusionMatrix::from_rows(&rows);
            prop_assume!(cm.total() > 0);
            let permuted: Vec<Vec<u64>> = (0..4)
                .map(|g| (0..4).map(|p| rows[perm[g]][perm[p]]).collect())
                .collect();
            let a = miou(&cm).unwrap();
            let b = miou(&ConfusionMatrix::from_rows(&permuted)).unwrap();
            for k in 0..4 {
                prop_assert_eq!(a.per_class[perm[k]], b.per_class[k]);
            }
            prop_assert!((a.mean - b.mean).abs() < 1e-12);
        }

        #[test]
        fn ap_flip_tp_never_helps(ranked in proptest::collection::vec(any::<bool>(), 1..30), at in 0usize..30) {
            let gts = ranked.iter().filter(|&&t| t).count() + 1;
            let at = at % ranked.len();
            prop_assume!(ranked[at]);
            let mut worse = ranked.clone();
            worse[at] = false;
            let a = ap_from_ranked(&ranked, gts, Interpolation::AllPoint).ap;
            let b = ap_from_ranked(&worse, gts, Interpolation::AllPoint).ap;
            prop_assert!(b <= a + 1e-15);
        }

        #[test]
        fn ap_depends_on_ranking_only(
            scores in proptest::collection::vec(0.01f64..1.0, 1..12),
            scale in 0.1f64..3.0,
        ) {
            let gts: Vec<Box3D> = (0..scores.len()).step_by(2).map(|i| cube(3.0 * i as f64, 1.0)).collect();
            let dets: Vec<Box3D> = scores.iter().enumerate().map(|(i, &s)| {
                Box3D::new([3.0 * i as f64, 0.0, 0.5], [1.0; 3], 0.0, vec![s, 0.0])
            }).collect();
            let rescaled: Vec<Box3D> = dets.iter().map(|b| {
                let mut b = b.clone();
                let s = (b.probs[0] * scale).sqrt();
                b.probs = vec![s, 0.0];
                b
            }).collect();
            let a = average_precision(&dets, &gts, 0.5).unwrap().ap;
            let b = average_precision(&rescaled, &gts, 0.5).unwrap().ap;
            prop_assert_eq!(a, b);
        }
    }
}
