//! On-disk pipeline: synth → teach → fuse-seg / fuse-det → select → train
//! → eval, plus θ sweeps and run comparison.
//!
//! Every stage writes into `<output_dir>/<stage>/` and finishes by writing
//! `stage.json`, a reproducibility record holding the stage hash (over its
//! config slice and the records of the stages it reads), the config slice,
//! the seed, the tool version and the SHA-256 of every file it produced. A
//! stage whose hash and outputs are unchanged is skipped.

mod config;
mod stages;
mod store;

use thiserror::Error;

pub use config::{
    parse_teacher_set, DataConfig, EvalConfig, KittiData, KittiWindow, Overrides, PipelineConfig, StudentConfig,
    SweepConfig, SynthData, TeacherConfig, TeacherMode, CONFIG_SCHEMA_VERSION,
};
pub use stages::{
    run_all, stage_compare, stage_eval, stage_fuse_det, stage_fuse_seg, stage_select, stage_sweep, stage_synth,
    stage_teach, stage_train, DetectionRecord, FusedFrame, Manifest, ManifestEntry, SplitName, Stage, SweepPoint,
    TeacherRecord, MANIFEST_SCHEMA,
};
pub use store::{sha256_file, sha256_hex, StageOutcome, StageRecord, RECORD_SCHEMA, TOOL_VERSION};

use crate::concord::ConcordError;
use crate::detfuse::DetError;
use crate::evalkit::EvalError;
use crate::experiment::ExperimentError;
use crate::featnet::FeatError;
use crate::seqcloud::SeqError;
use crate::stindex::IndexError;
use crate::synthlab::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: stale input: {reason}")]
    StaleInput { stage: String, reason: String },
    #[error("{stage}: missing input {what}; run `{needs}` first")]
    MissingInput { stage: String, what: String, needs: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fusion(#[from] ConcordError),
    #[error(transparent)]
    Detection(#[from] DetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

impl From<FeatError> for PipelineError {
    fn from(e: FeatError) -> Self {
        match e {
            FeatError::NonFiniteLoss { .. } => PipelineError::Numeric(e.to_string()),
            FeatError::InvalidConfig(m) => PipelineError::Config(m),
            other => PipelineError::Data(other.to_string()),
        }
    }
}

impl From<ExperimentError> for PipelineError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Synth(e) => e.into(),
            ExperimentError::Seq(e) => e.into(),
            ExperimentError::Feat(e) => e.into(),
            ExperimentError::Fusion(e) => e.into(),
            ExperimentError::Eval(e) => e.into(),
            ExperimentError::InvalidConfig(m) => PipelineError::Config(m),
        }
    }
}

/// Process exit status for the command-line tool.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => EXIT_CONFIG,
            PipelineError::Synth(SynthError::InvalidConfig(_) | SynthError::InvalidTeacher(_)) => EXIT_CONFIG,
            PipelineError::Fusion(ConcordError::InvalidConfig(_)) => EXIT_CONFIG,
            PipelineError::Detection(DetError::InvalidConfig(_)) => EXIT_CONFIG,
            PipelineError::Index(IndexError::InvalidRadius { .. }) => EXIT_CONFIG,
            PipelineError::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_DATA,
        }
    }
}
