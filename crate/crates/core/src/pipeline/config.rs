//! Pipeline configuration: one versioned JSON document, overridable from
//! the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::concord::FusionConfig;
use crate::detfuse::ClusterConfig;
use crate::evalkit::Interpolation;
use crate::experiment::TeacherSet;
use crate::featnet::{ModelConfig, TrainConfig};
use crate::synthlab::{SyntheticTeacherSpec, WorldConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Run seed: drives world generation, teacher seeds and student init.
    pub seed: u64,
    /// Worker threads per stage; 0 uses every core.
    pub workers: usize,
    pub data: DataConfig,
    pub teachers: TeacherConfig,
    pub fusion: FusionConfig,
    pub cluster: ClusterConfig,
    pub student: StudentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            output_dir: PathBuf::from("concord-run"),
            seed: 0,
            workers: 0,
            data: DataConfig::default(),
            teachers: TeacherConfig::default(),
            fusion: FusionConfig::default(),
            cluster: ClusterConfig::default(),
            student: StudentConfig::default(),
            train: TrainConfig {
                epochs: 12,
                cosine_decay: true,
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Synth(SynthData),
    Kitti(KittiData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synth(SynthData::default())
    }
}

impl DataConfig {
    pub fn classes(&self) -> usize {
        match self {
            DataConfig::Synth(s) => s.world.classes,
            DataConfig::Kitti(k) => k.classes,
        }
    }

    pub fn half_frames(&self) -> usize {
        match self {
            DataConfig::Synth(s) => s.world.half_frames,
            DataConfig::Kitti(k) => k.half_frames,
        }
    }

    pub fn labeled_ratio(&self) -> f64 {
        match self {
            DataConfig::Synth(s) => s.labeled_ratio,
            DataConfig::Kitti(k) => k.labeled_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthData {
    /// Template world; the seed is replaced per sequence.
    pub world: WorldConfig,
    /// Sequences split into labeled and unlabeled.
    pub sequences: usize,
    pub test_sequences: usize,
    pub labeled_ratio: f64,
}

impl Default for SynthData {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            sequences: 50,
            test_sequences: 20,
            labeled_ratio: 0.2,
        }
    }
}

/// A `2N+1` window of a drive directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KittiWindow {
    pub path: PathBuf,
    pub center: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KittiData {
    pub half_frames: usize,
    pub classes: usize,
    pub labeled_ratio: f64,
    pub windows: Vec<KittiWindow>,
    pub test: Vec<KittiWindow>,
    /// Raw label id to training class; unmapped ids are ignored.
    pub label_map: Option<BTreeMap<u16, usize>>,
}

impl Default for KittiData {
    fn default() -> Self {
        Self {
            half_frames: 3,
            classes: 4,
            labeled_ratio: 0.2,
            windows: Vec::new(),
            test: Vec::new(),
            label_map: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Corrupted ground truth with range-dependent error.
    #[default]
    Synthetic,
    /// Point models trained on the labeled split with window `[-n, n]`.
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub set: TeacherSet,
    /// Error model for synthetic teachers; `range`, `id` and `seed` are
    /// assigned per teacher.
    pub synthetic: SyntheticTeacherSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Also emit box detections (synthetic mode only).
    pub detection: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Synthetic,
            set: TeacherSet::Concordance { ranges: vec![1, 2, 3] },
            synthetic: SyntheticTeacherSpec::new(0, 0.45, 0.1, 0),
            model: ModelConfig {
                neighbor_cap: Some(24),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 12,
                cosine_decay: true,
                ..TrainConfig::default()
            },
            detection: true,
        }
    }
}

impl TeacherConfig {
    pub fn max_range(&self) -> usize {
        match &self.set {
            TeacherSet::Supervised => 0,
            TeacherSet::Concordance { ranges } => ranges.iter().copied().max().unwrap_or(0),
            TeacherSet::Ensemble { range, .. } => *range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    /// Past frames `m` of the causal student.
    pub past: usize,
    pub model: ModelConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            past: 2,
            model: ModelConfig {
                neighbor_cap: Some(24),
                ..ModelConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub match_iou: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.7,
            interpolation: Interpolation::AllPoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub thetas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thetas: vec![0.0, 0.5, 0.7, 0.9, 0.95, 0.99],
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub lambda: Option<f64>,
    pub theta: Option<f64>,
    pub epochs: Option<usize>,
    pub teachers: Option<TeacherSet>,
    pub thetas: Option<Vec<f64>>,
}

/// Parses `supervised`, `single:2`, `concordance:1,2,3` or `ensemble:2x3`.
pub fn parse_teacher_set(s: &str) -> Result<TeacherSet, PipelineError> {
    let bad = || PipelineError::Config(format!("cannot parse teacher set {s:?}"));
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    let ranges = |r: &str| -> Result<Vec<usize>, PipelineError> {
        r.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
    };
    match kind {
        "supervised" => Ok(TeacherSet::Supervised),
        "single" => Ok(TeacherSet::single(rest.trim().parse().map_err(|_| bad())?)),
        "concordance" => Ok(TeacherSet::Concordance { ranges: ranges(rest)? }),
        "ensemble" => {
            let (range, count) = rest.split_once('x').ok_or_else(bad)?;
            Ok(TeacherSet::Ensemble {
                range: range.trim().parse().map_err(|_| bad())?,
                count: count.trim().parse().map_err(|_| bad())?,
            })
        }
        _ => Err(bad()),
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(PipelineError::Config(format!(
                "config schema_version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = o.lambda {
            self.fusion.lambda = v;
        }
        if let Some(v) = o.theta {
            self.fusion.theta = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = &o.teachers {
            self.teachers.set = v.clone();
        }
        if let Some(v) = &o.thetas {
            self.sweep.thetas = v.clone();
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg_err = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return cfg_err(format!("unsupported schema_version {}", self.schema_version));
        }
        self.fusion.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.cluster.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let ratio = self.data.labeled_ratio();
        if !(0.0..=1.0).contains(&ratio) {
            return cfg_err(format!("labeled_ratio {ratio} outside [0, 1]"));
        }
        let n = self.data.half_frames();
        if self.teachers.max_range() > n {
            return cfg_err(format!(
                "teacher range {} exceeds the {n} frames available on each side",
                self.teachers.max_range()
            ));
        }
        if self.student.past > n {
            return cfg_err(format!("student past {} exceeds the {n} available frames", self.student.past));
        }
        if let TeacherSet::Concordance { ranges } = &self.teachers.set {
            if ranges.is_empty() {
                return cfg_err("concordance set needs at least one range".into());
            }
        }
        if let TeacherSet::Ensemble { count: 0, .. } = &self.teachers.set {
            return cfg_err("ensemble needs at least one teacher".into());
        }
        if self.data.classes() < 2 {
            return cfg_err("need at least 2 classes".into());
        }
        match &self.data {
            DataConfig::Synth(s) => s.world.validate().map_err(|e| PipelineError::Config(e.to_string()))?,
            DataConfig::Kitti(k) => {
                if self.teachers.mode == TeacherMode::Synthetic && self.teachers.set != TeacherSet::Supervised {
                    // Synthetic teachers read ground truth, which real drives may lack.
                    for w in &k.windows {
                        if !w.path.join("labels").is_dir() {
                            return cfg_err(format!("{}: synthetic teachers need labels", w.path.display()));
                        }
                    }
                }
            }
        }
        if self.teachers.mode == TeacherMode::Synthetic {
            self.teachers
                .synthetic
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        } else {
            self.teachers
                .train
                .validate()
                .map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        if !(self.eval.match_iou > 0.0 && self.eval.match_iou <= 1.0) {
            return cfg_err("eval.match_iou must be in (0, 1]".into());
        }
        if self.sweep.thetas.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return cfg_err("sweep thetas must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 5, "fusion": {"theta": 0.9}}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.fusion.theta, 0.9);
        assert_eq!(cfg.fusion.lambda, 0.1);
    }

    #[test]
    fn flags_beat_file() {
        let mut cfg = PipelineConfig::from_json(r#"{"seed": 5, "fusion": {"theta": 0.9}}"#).unwrap();
        cfg.apply(&Overrides {
            theta: Some(0.8),
            teachers: Some(parse_teacher_set("ensemble:2x3").unwrap()),
            ..Overrides::default()
        });
        assert_eq!(cfg.fusion.theta, 0.8);
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.teachers.set, TeacherSet::Ensemble { range: 2, count: 3 });
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"schema_version": 9}"#),
            Err(PipelineError::Config(_))
        ));
        assert!(PipelineConfig::from_json(r#"{"unknown_key": 1}"#).is_err());
        let mut cfg = PipelineConfig::default();
        cfg.teachers.set = TeacherSet::Concordance { ranges: vec![1, 9] };
        assert!(cfg.validate().is_err());
        assert!(parse_teacher_set("ensemble:2").is_err());
        assert_eq!(parse_teacher_set("single:2").unwrap(), TeacherSet::single(2));
        assert_eq!(parse_teacher_set("supervised").unwrap(), TeacherSet::Supervised);
    }
}
