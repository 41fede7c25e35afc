//! In-memory semi-supervised runs on synthetic worlds.
//!
//! One run generates labeled/unlabeled/test sequences, pseudo-labels the
//! unlabeled part with a set of synthetic teachers, trains a causal student
//! on human plus selected pseudo labels and scores it on the test part.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concord::{self, ConcordError, FusionConfig, LabeledScan, PseudoDataset};
use crate::evalkit::{self, ConfusionMatrix, EvalError, IouResult};
use crate::featnet::{self, FeatError, ModelConfig, PointModel, PointSample, TrainConfig};
use crate::seqcloud::{self, SeqError, Sequence};
use crate::synthlab::{self, SynthError, SyntheticTeacherSpec, WorldConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Fusion(#[from] ConcordError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
}

/// Which teachers produce pseudo labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeacherSet {
    /// Human labels only.
    Supervised,
    /// One teacher per listed range, fused by concordance.
    Concordance { ranges: Vec<usize> },
    /// `count` teachers of the same range with different seeds.
    Ensemble { range: usize, count: usize },
}

impl TeacherSet {
    pub fn single(range: usize) -> Self {
        TeacherSet::Concordance { ranges: vec![range] }
    }

    pub fn name(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",");
        match self {
            TeacherSet::Supervised => "supervised".into(),
            TeacherSet::Concordance { ranges } if ranges.len() == 1 => format!("single{{{}}}", ranges[0]),
            TeacherSet::Concordance { ranges } => format!("concordance{{{}}}", join(ranges)),
            TeacherSet::Ensemble { range, count } => format!("ensemble{{{}}}", join(&vec![*range; *count])),
        }
    }

    /// Teacher specs for run seed `seed`.
    pub fn teachers(&self, base: &SyntheticTeacherSpec, seed: u64) -> Vec<SyntheticTeacherSpec> {
        let teacher_seed = seed.wrapping_mul(1000).wrapping_add(17);
        match self {
            TeacherSet::Supervised => Vec::new(),
            TeacherSet::Concordance { ranges } => synthlab::make_concordance(base, ranges, teacher_seed),
            TeacherSet::Ensemble { range, count } => {
                let seeds: Vec<u64> = (0..*count as u64).map(|i| teacher_seed.wrapping_add(i)).collect();
                synthlab::make_ensemble(base, *range, &seeds)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    /// Template for every generated world; its seed is replaced per sequence.
    pub world: WorldConfig,
    /// Labeled plus unlabeled training sequences.
    pub sequences: usize,
    pub test_sequences: usize,
    pub labeled_ratio: f64,
    /// Past frames visible to the student.
    pub student_past: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub teacher: SyntheticTeacherSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            sequences: 50,
            test_sequences: 20,
            labeled_ratio: 0.2,
            student_past: 2,
            model: ModelConfig {
                neighbor_cap: Some(24),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 12,
                cosine_decay: true,
                ..TrainConfig::default()
            },
            fusion: FusionConfig::default(),
            teacher: SyntheticTeacherSpec::new(0, 0.45, 0.1, 0),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !(self.labeled_ratio > 0.0 && self.labeled_ratio <= 1.0) {
            return Err(ExperimentError::InvalidConfig("labeled ratio must be in (0, 1]".into()));
        }
        if self.sequences == 0 || self.test_sequences == 0 {
            return Err(ExperimentError::InvalidConfig("need training and test sequences".into()));
        }
        if self.student_past > self.world.half_frames {
            return Err(ExperimentError::InvalidConfig("student sees beyond the generated window".into()));
        }
        self.world.validate()?;
        self.teacher.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn labeled_count(&self) -> usize {
        split_point(self.sequences, self.labeled_ratio)
    }
}

/// Number of labeled sequences out of `n` at `ratio`.
pub fn split_point(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio).round() as usize).min(n)
}

/// An aligned sequence with the student's encoded neighborhoods.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seq: Sequence,
    pub inputs: Vec<Vec<[f64; 4]>>,
    pub truth: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub labeled: Vec<Prepared>,
    pub unlabeled: Vec<Prepared>,
    pub test: Vec<Prepared>,
}

/// World seed of sequence `i` under run seed `seed`.
pub fn world_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn prepare_sequence(seq: Sequence, student: &PointModel) -> Result<Prepared, ExperimentError> {
    let seq = seqcloud::align_sequence(&seq)?;
    let index = student.index(&seq)?;
    let inputs = student.inputs(&seq, &index)?;
    let truth = seq
        .reference()
        .classes()
        .ok_or_else(|| SynthError::MissingGroundTruth(seq.id.clone()))?;
    Ok(Prepared { seq, inputs, truth })
}

pub fn student_model(cfg: &BenchmarkConfig, seed: u64) -> Result<PointModel, ExperimentError> {
    let mut model_cfg = cfg.model.clone();
    model_cfg.classes = cfg.world.classes;
    Ok(PointModel::init(cfg.student_past, 0, &model_cfg, seed)?)
}

pub fn prepare(cfg: &BenchmarkConfig, seed: u64) -> Result<Split, ExperimentError> {
    cfg.validate()?;
    let student = student_model(cfg, seed)?;
    let total = cfg.sequences + cfg.test_sequences;
    let mut all: Vec<Prepared> = (0..total)
        .into_par_iter()
        .map(|i| {
            let world = WorldConfig {
                seed: world_seed(seed, i),
                ..cfg.world.clone()
            };
            prepare_sequence(synthlab::generate_sequence(&world)?, &student)
        })
        .collect::<Result<_, _>>()?;
    let test = all.split_off(cfg.sequences);
    let unlabeled = all.split_off(cfg.labeled_count());
    Ok(Split {
        labeled: all,
        unlabeled,
        test,
    })
}

/// Fused and selected pseudo labels for every unlabeled sequence.
pub fn pseudo_label(
    cfg: &BenchmarkConfig,
    unlabeled: &[Prepared],
    teachers: &[SyntheticTeacherSpec],
) -> Result<Vec<LabeledScan>, ExperimentError> {
    if teachers.is_empty() {
        return Ok(Vec::new());
    }
    unlabeled
        .iter()
        .map(|p| {
            let outputs: Vec<Vec<Vec<f64>>> = teachers
                .iter()
                .map(|t| synthlab::synth_teacher_predict(t, &p.seq, cfg.world.classes))
                .collect::<Result<_, _>>()?;
            let fused = concord::fuse_scan(&outputs, &cfg.fusion)?;
            let selected = concord::select(&fused, cfg.fusion.theta);
            Ok(LabeledScan::pseudo(p.seq.id.clone(), &selected))
        })
        .collect()
}

/// Human labels for the labeled part plus the pseudo-labeled scans.
pub fn assemble(split: &Split, pseudo: Vec<LabeledScan>) -> Result<PseudoDataset, ExperimentError> {
    let human: Vec<LabeledScan> = split
        .labeled
        .iter()
        .map(|p| LabeledScan::human(p.seq.id.clone(), p.truth.clone()))
        .collect();
    Ok(concord::assemble_dataset(human, pseudo)?)
}

/// Training samples for the selected points of `dataset`.
pub fn samples(split: &Split, dataset: &PseudoDataset) -> Vec<PointSample> {
    let by_id: std::collections::HashMap<&str, &Prepared> = split
        .labeled
        .iter()
        .chain(&split.unlabeled)
        .map(|p| (p.seq.id.as_str(), p))
        .collect();
    let mut out = Vec::new();
    for scan in &dataset.samples {
        let Some(p) = by_id.get(scan.sequence.as_str()) else {
            continue;
        };
        for i in 0..scan.classes.len() {
            if scan.selected[i] && !p.inputs[i].is_empty() {
                out.push(PointSample {
                    inputs: p.inputs[i].clone(),
                    target: scan.classes[i],
                    confidence: scan.confidences[i],
                });
            }
        }
    }
    out
}

pub fn evaluate(model: &PointModel, test: &[Prepared], classes: usize) -> Result<IouResult, ExperimentError> {
    let mut cm = ConfusionMatrix::new(classes);
    for p in test {
        let preds = featnet::predict_inputs(model, &p.inputs)?;
        let pred: Vec<usize> = preds.iter().map(|v| concord::argmax(v)).collect();
        cm.add_all(&p.truth, &pred, None)?;
    }
    Ok(evalkit::miou(&cm)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub teachers: String,
    pub seed: u64,
    pub theta: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    /// Selected pseudo-labeled points over all unlabeled points.
    pub pseudo_coverage: f64,
    /// Fraction of selected pseudo labels equal to ground truth.
    pub pseudo_precision: f64,
    pub training_points: usize,
}

pub fn run_with_split(
    cfg: &BenchmarkConfig,
    split: &Split,
    set: &TeacherSet,
    seed: u64,
) -> Result<RunResult, ExperimentError> {
    let teachers = set.teachers(&cfg.teacher, seed);
    let pseudo = pseudo_label(cfg, &split.unlabeled, &teachers)?;
    let (mut hits, mut chosen, mut total) = (0usize, 0usize, 0usize);
    for (scan, p) in pseudo.iter().zip(&split.unlabeled) {
        total += scan.classes.len();
        for i in 0..scan.classes.len() {
            if scan.selected[i] {
                chosen += 1;
                hits += usize::from(scan.classes[i] == p.truth[i]);
            }
        }
    }
    let dataset = assemble(split, pseudo)?;
    let data = samples(split, &dataset);
    let init = student_model(cfg, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (student, _) = featnet::train(&init, &data, &train_cfg)?;
    let iou = evaluate(&student, &split.test, cfg.world.classes)?;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(RunResult {
        teachers: set.name(),
        seed,
        theta: cfg.fusion.theta,
        miou: iou.mean,
        per_class: iou.per_class,
        pseudo_coverage: ratio(chosen, total),
        pseudo_precision: ratio(hits, chosen),
        training_points: data.len(),
    })
}

pub fn run(cfg: &BenchmarkConfig, set: &TeacherSet, seed: u64) -> Result<RunResult, ExperimentError> {
    run_with_split(cfg, &prepare(cfg, seed)?, set, seed)
}

/// One run per selection threshold, sharing the prepared split.
pub fn sweep_theta(
    cfg: &BenchmarkConfig,
    split: &Split,
    set: &TeacherSet,
    seed: u64,
    thetas: &[f64],
) -> Result<Vec<RunResult>, ExperimentError> {
    thetas
        .iter()
        .map(|&theta| {
            let mut c = cfg.clone();
            c.fusion.theta = theta;
            run_with_split(&c, split, set, seed)
        })
        .collect()
}
