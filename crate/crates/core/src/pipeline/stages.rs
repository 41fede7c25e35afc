use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{DataConfig, PipelineConfig, TeacherMode};
use super::store::{self, io, read_json, read_jsonl, stage_hash, write_json, write_jsonl, StageOutcome, StageRecord};
use super::PipelineError;
use crate::concord::{self, LabeledScan, Provenance, PseudoDataset, PseudoLabel};
use crate::detfuse::{self, Box3D, FusedBox};
use crate::evalkit::{self, Comparison, ConfusionMatrix, IouResult, MetricsReport};
use crate::experiment::{split_point, world_seed, TeacherSet};
use crate::featnet::{self, PointModel, PointSample, TrainConfig, TrainReport};
use crate::seqcloud::{self, PointLabel, Pose, Sequence};
use crate::synthlab::{self, SynthError, SyntheticTeacherSpec, WorldConfig};

pub const MANIFEST_SCHEMA: &str = "concord-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Teach,
    FuseSeg,
    FuseDet,
    Select,
    Train,
    Eval,
    Sweep,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Teach,
        Stage::FuseSeg,
        Stage::FuseDet,
        Stage::Select,
        Stage::Train,
        Stage::Eval,
        Stage::Sweep,
    ];

    /// Directory name and subcommand.
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Teach => "teach",
            Stage::FuseSeg => "fuse-seg",
            Stage::FuseDet => "fuse-det",
            Stage::Select => "select",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Drive directory; relative paths are under the synth stage dir.
    pub path: PathBuf,
    pub center: usize,
    pub split: SplitName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub classes: usize,
    pub half_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_map: Option<BTreeMap<u16, usize>>,
    pub sequences: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: SplitName) -> impl Iterator<Item = &ManifestEntry> {
        self.sequences.iter().filter(move |e| e.split == split)
    }

    fn entry(&self, id: &str) -> Option<&ManifestEntry> {
        self.sequences.iter().find(|e| e.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecord {
    pub name: String,
    pub id: u32,
    pub range: usize,
    pub mode: TeacherMode,
    pub seed: u64,
    /// Effective error rate of a synthetic teacher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<f64>,
    /// Checkpoint of a trained teacher, relative to the teach stage dir.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
}

/// One line of `teach/seg/<teacher>.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherOutput {
    pub sequence: String,
    pub teacher: String,
    pub range: usize,
    pub probs: Vec<Vec<f64>>,
}

/// One line of `teach/det/<teacher>.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub frame: String,
    pub teacher: u32,
    pub boxes: Vec<Box3D>,
}

/// One line of `fuse-det/fused.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFrame {
    pub frame: String,
    pub boxes: Vec<FusedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub theta: f64,
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub selected_points: usize,
    pub pseudo_points: usize,
    pub training_points: usize,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    root: &'a Path,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            root: &cfg.output_dir,
        })
    }

    fn dir(&self, s: Stage) -> PathBuf {
        self.root.join(s.name())
    }

    /// The part of the config a stage's output depends on.
    fn slice(&self, s: Stage) -> Value {
        let c = self.cfg;
        let v = match s {
            Stage::Synth => json!({ "data": c.data, "seed": c.seed }),
            Stage::Teach => json!({ "teachers": c.teachers, "seed": c.seed }),
            Stage::FuseSeg => {
                let mut fusion = json!(c.fusion);
                fusion.as_object_mut().expect("struct").remove("theta");
                json!({ "fusion": fusion })
            }
            Stage::FuseDet => json!({ "cluster": c.cluster }),
            Stage::Select => json!({ "theta": c.fusion.theta }),
            Stage::Train => json!({ "student": c.student, "train": c.train, "seed": c.seed }),
            Stage::Eval => json!({ "eval": c.eval }),
            Stage::Sweep => json!({
                "sweep": c.sweep, "student": c.student, "train": c.train, "seed": c.seed,
            }),
        };
        // Round trip through text so float formatting matches the stored record.
        serde_json::from_str(&v.to_string()).expect("valid json")
    }

    /// Loads `dep`'s record after checking that it, and everything it was
    /// built from, is current.
    fn check(&self, me: Stage, dep: Stage) -> Result<StageRecord, PipelineError> {
        let stale = |reason: String| PipelineError::StaleInput {
            stage: me.name().into(),
            reason,
        };
        let dir = self.dir(dep);
        let rec = store::read_record(&dir)?.ok_or_else(|| PipelineError::MissingInput {
            stage: me.name().into(),
            what: format!("{}/stage.json", dir.display()),
            needs: format!("concord {}", dep.name()),
        })?;
        if rec.hash != stage_hash(dep.name(), &self.slice(dep), &rec.upstream) {
            return Err(stale(format!(
                "`{}` output was produced with a different config or tool version; rerun `concord {}`",
                dep.name(),
                dep.name()
            )));
        }
        if let Some(file) = store::changed_output(&dir, &rec)? {
            return Err(stale(format!(
                "{}/{file} changed after `{}` wrote it; rerun `concord {}`",
                dep.name(),
                dep.name(),
                dep.name()
            )));
        }
        for (name, hash) in &rec.upstream {
            let up = Stage::from_name(name).ok_or_else(|| stale(format!("unknown stage {name}")))?;
            let current = self.check(me, up)?;
            if &current.hash != hash {
                return Err(stale(format!(
                    "`{}` was built from an older `{name}` output; rerun `concord {}`",
                    dep.name(),
                    dep.name()
                )));
            }
        }
        Ok(rec)
    }

    fn run(
        &self,
        me: Stage,
        deps: &[Stage],
        body: impl FnOnce(&Path) -> Result<(), PipelineError> + Send,
    ) -> Result<StageOutcome, PipelineError> {
        let mut upstream = BTreeMap::new();
        for &d in deps {
            upstream.insert(d.name().to_string(), self.check(me, d)?.hash);
        }
        let slice = self.slice(me);
        let hash = stage_hash(me.name(), &slice, &upstream);
        let dir = self.dir(me);
        if let Some(rec) = store::read_record(&dir)? {
            if rec.hash == hash && store::changed_output(&dir, &rec)?.is_none() {
                return Ok(StageOutcome {
                    stage: me.name().into(),
                    hash,
                    skipped: true,
                    dir,
                });
            }
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        with_pool(self.cfg.workers, || body(&dir))?;
        store::write_record(&dir, me.name(), &hash, self.cfg.seed, slice, upstream)?;
        Ok(StageOutcome {
            stage: me.name().into(),
            hash,
            skipped: false,
            dir,
        })
    }

    fn manifest(&self) -> Result<Manifest, PipelineError> {
        read_json(&self.dir(Stage::Synth).join("manifest.json"))
    }

    fn load(&self, manifest: &Manifest, entry: &ManifestEntry) -> Result<Sequence, PipelineError> {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.dir(Stage::Synth).join(&entry.path)
        };
        let mut seq = seqcloud::load_kitti_sequence(&path, entry.center, manifest.half_frames)?;
        seq.id = entry.id.clone();
        if let Some(map) = &manifest.label_map {
            let ignore = manifest.classes as u16;
            seq = seq.map_labels(|l| PointLabel {
                class: map.get(&l.class).map_or(ignore, |&c| c as u16),
                ..l
            });
        }
        Ok(seqcloud::align_sequence(&seq)?)
    }

    fn load_split(&self, manifest: &Manifest, split: SplitName) -> Result<Vec<Sequence>, PipelineError> {
        let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
        entries.par_iter().map(|e| self.load(manifest, e)).collect()
    }

    fn student_init(&self, classes: usize) -> Result<PointModel, PipelineError> {
        let mut model = self.cfg.student.model.clone();
        model.classes = classes;
        Ok(PointModel::init(self.cfg.student.past, 0, &model, self.cfg.seed)?)
    }
}

fn with_pool<R: Send>(workers: usize, f: impl FnOnce() -> Result<R, PipelineError> + Send) -> Result<R, PipelineError> {
    if workers == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("worker pool: {e}")))?
        .install(f)
}

fn truth(seq: &Sequence) -> Result<Vec<usize>, PipelineError> {
    seq.reference()
        .classes()
        .ok_or_else(|| SynthError::MissingGroundTruth(seq.id.clone()).into())
}

/// Materializes the dataset: generates synthetic drives or indexes
/// existing ones, and writes `manifest.json` with the splits.
pub fn stage_synth(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::Synth, &[], |dir| {
        let manifest = match &cfg.data {
            DataConfig::Synth(s) => {
                let labeled = split_point(s.sequences, s.labeled_ratio);
                let total = s.sequences + s.test_sequences;
                let entries: Vec<ManifestEntry> = (0..total)
                    .into_par_iter()
                    .map(|i| {
                        let world = WorldConfig {
                            seed: world_seed(cfg.seed, i),
                            ..s.world.clone()
                        };
                        let mut seq = synthlab::generate_sequence(&world)?;
                        seq.id = format!("seq{i:04}");
                        let rel = PathBuf::from("sequences").join(&seq.id);
                        seqcloud::write_kitti_sequence(&seq, &dir.join(&rel), &Pose::identity())?;
                        let split = if i >= s.sequences {
                            SplitName::Test
                        } else if i < labeled {
                            SplitName::Labeled
                        } else {
                            SplitName::Unlabeled
                        };
                        Ok(ManifestEntry {
                            id: seq.id,
                            path: rel,
                            center: s.world.half_frames,
                            split,
                        })
                    })
                    .collect::<Result<_, PipelineError>>()?;
                Manifest {
                    schema: MANIFEST_SCHEMA.into(),
                    version: MANIFEST_VERSION,
                    classes: s.world.classes,
                    half_frames: s.world.half_frames,
                    label_map: None,
                    sequences: entries,
                }
            }
            DataConfig::Kitti(k) => {
                let labeled = split_point(k.windows.len(), k.labeled_ratio);
                let mut entries = Vec::new();
                let mut seen = std::collections::BTreeSet::new();
                let all = k.windows.iter().map(|w| (w, false)).chain(k.test.iter().map(|w| (w, true)));
                for (i, (w, is_test)) in all.enumerate() {
                    let path = fs::canonicalize(&w.path).map_err(io(&w.path))?;
                    // Surfaces malformed files and boundary windows before later stages.
                    let seq = seqcloud::load_kitti_sequence(&path, w.center, k.half_frames)?;
                    if !seen.insert(seq.id.clone()) {
                        return Err(concord::ConcordError::DuplicateSequence(seq.id).into());
                    }
                    let split = if is_test {
                        SplitName::Test
                    } else if i < labeled {
                        SplitName::Labeled
                    } else {
                        SplitName::Unlabeled
                    };
                    entries.push(ManifestEntry {
                        id: seq.id,
                        path,
                        center: w.center,
                        split,
                    });
                }
                Manifest {
                    schema: MANIFEST_SCHEMA.into(),
                    version: MANIFEST_VERSION,
                    classes: k.classes,
                    half_frames: k.half_frames,
                    label_map: k.label_map.clone(),
                    sequences: entries,
                }
            }
        };
        write_json(&dir.join("manifest.json"), &manifest)
    })
}

fn teacher_name(spec: &SyntheticTeacherSpec) -> String {
    format!("t{}-r{}", spec.id, spec.range)
}

/// Runs every teacher on the unlabeled split.
pub fn stage_teach(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    if cfg.teachers.detection && cfg.teachers.mode == TeacherMode::Trained {
        return Err(PipelineError::Config(
            "teachers.detection needs synthetic teachers; set it to false for trained teachers".into(),
        ));
    }
    ctx.run(Stage::Teach, &[Stage::Synth], |dir| {
        let manifest = ctx.manifest()?;
        let classes = manifest.classes;
        let specs = cfg.teachers.set.teachers(&cfg.teachers.synthetic, cfg.seed);
        let unlabeled = ctx.load_split(&manifest, SplitName::Unlabeled)?;
        fs::create_dir_all(dir.join("seg")).map_err(io(dir))?;
        let mut records = Vec::new();
        match cfg.teachers.mode {
            TeacherMode::Synthetic => {
                for spec in &specs {
                    let name = teacher_name(spec);
                    let rows: Vec<TeacherOutput> = unlabeled
                        .par_iter()
                        .map(|seq| {
                            Ok(TeacherOutput {
                                sequence: seq.id.clone(),
                                teacher: name.clone(),
                                range: spec.range,
                                probs: synthlab::synth_teacher_predict(spec, seq, classes)?,
                            })
                        })
                        .collect::<Result<_, PipelineError>>()?;
                    write_jsonl(&dir.join("seg").join(format!("{name}.jsonl")), &rows)?;
                    if cfg.teachers.detection {
                        let det_dir = dir.join("det");
                        fs::create_dir_all(&det_dir).map_err(io(&det_dir))?;
                        let rows: Vec<DetectionRecord> = unlabeled
                            .par_iter()
                            .map(|seq| {
                                Ok(DetectionRecord {
                                    frame: seq.id.clone(),
                                    teacher: spec.id,
                                    boxes: synthlab::synth_teacher_detect(spec, seq, classes)?,
                                })
                            })
                            .collect::<Result<_, PipelineError>>()?;
                        write_jsonl(&det_dir.join(format!("{name}.jsonl")), &rows)?;
                    }
                    records.push(TeacherRecord {
                        name,
                        id: spec.id,
                        range: spec.range,
                        mode: TeacherMode::Synthetic,
                        seed: spec.seed,
                        error: Some(spec.effective_error()),
                        checkpoint: None,
                    });
                }
            }
            TeacherMode::Trained => {
                let labeled = ctx.load_split(&manifest, SplitName::Labeled)?;
                let models_dir = dir.join("models");
                fs::create_dir_all(&models_dir).map_err(io(&models_dir))?;
                let human: Vec<LabeledScan> = labeled
                    .iter()
                    .map(|s| human_scan(s, classes))
                    .collect::<Result<_, _>>()?;
                let by_id: HashMap<&str, &Sequence> = labeled.iter().map(|s| (s.id.as_str(), s)).collect();
                for spec in &specs {
                    let name = teacher_name(spec);
                    let mut model_cfg = cfg.teachers.model.clone();
                    model_cfg.classes = classes;
                    let init = PointModel::init(spec.range, spec.range, &model_cfg, spec.seed)?;
                    let data = samples_for(&human, &by_id, &init)?;
                    let train_cfg = TrainConfig {
                        seed: spec.seed,
                        ..cfg.teachers.train.clone()
                    };
                    let (model, _) = featnet::train(&init, &data, &train_cfg)?;
                    let rel = format!("models/{name}.json");
                    write_json(&dir.join(&rel), &model)?;
                    let rows: Vec<TeacherOutput> = unlabeled
                        .par_iter()
                        .map(|seq| {
                            let index = model.index(seq)?;
                            let inputs = model.inputs(seq, &index)?;
                            Ok(TeacherOutput {
                                sequence: seq.id.clone(),
                                teacher: name.clone(),
                                range: spec.range,
                                probs: featnet::predict_inputs(&model, &inputs)?,
                            })
                        })
                        .collect::<Result<_, PipelineError>>()?;
                    write_jsonl(&dir.join("seg").join(format!("{name}.jsonl")), &rows)?;
                    records.push(TeacherRecord {
                        name,
                        id: spec.id,
                        range: spec.range,
                        mode: TeacherMode::Trained,
                        seed: spec.seed,
                        error: None,
                        checkpoint: Some(rel),
                    });
                }
            }
        }
        write_json(&dir.join("teachers.json"), &records)
    })
}

fn teachers(ctx: &Ctx) -> Result<Vec<TeacherRecord>, PipelineError> {
    read_json(&ctx.dir(Stage::Teach).join("teachers.json"))
}

/// Human labels of a labeled scan; ignored points are deselected.
fn human_scan(seq: &Sequence, classes: usize) -> Result<LabeledScan, PipelineError> {
    let mut scan = LabeledScan::human(seq.id.clone(), truth(seq)?);
    for (s, &c) in scan.selected.iter_mut().zip(&scan.classes) {
        *s = c < classes;
    }
    Ok(scan)
}

/// Concordance pseudo labels for every unlabeled scan.
pub fn stage_fuse_seg(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::FuseSeg, &[Stage::Synth, Stage::Teach], |dir| {
        let manifest = ctx.manifest()?;
        let records = teachers(&ctx)?;
        let ids: Vec<&str> = manifest.split(SplitName::Unlabeled).map(|e| e.id.as_str()).collect();
        if records.is_empty() {
            return write_jsonl::<LabeledScan>(&dir.join("pseudo.jsonl"), &[]);
        }
        if ids.is_empty() {
            return Err(PipelineError::Data(
                "no unlabeled sequences to pseudo-label (labeled_ratio is 1)".into(),
            ));
        }
        let mut outputs: Vec<HashMap<String, Vec<Vec<f64>>>> = Vec::new();
        for r in &records {
            let path = ctx.dir(Stage::Teach).join("seg").join(format!("{}.jsonl", r.name));
            let rows: Vec<TeacherOutput> = read_jsonl(&path)?;
            outputs.push(rows.into_iter().map(|o| (o.sequence, o.probs)).collect());
        }
        // Selection happens in the select stage, so θ stays out of this one.
        let fusion = concord::FusionConfig {
            theta: 0.0,
            ..cfg.fusion.clone()
        };
        let scans: Vec<LabeledScan> = ids
            .par_iter()
            .map(|id| {
                let per_teacher: Vec<Vec<Vec<f64>>> = outputs
                    .iter()
                    .zip(&records)
                    .map(|(o, r)| {
                        o.get(*id).cloned().ok_or_else(|| {
                            PipelineError::Data(format!("teacher {} has no output for {id}", r.name))
                        })
                    })
                    .collect::<Result<_, _>>()?;
                let fused = concord::fuse_scan(&per_teacher, &fusion)?;
                Ok(LabeledScan::pseudo(*id, &fused))
            })
            .collect::<Result<_, PipelineError>>()?;
        write_jsonl(&dir.join("pseudo.jsonl"), &scans)
    })
}

/// Clusters and fuses every teacher's boxes per unlabeled frame.
pub fn stage_fuse_det(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::FuseDet, &[Stage::Synth, Stage::Teach], |dir| {
        let manifest = ctx.manifest()?;
        let records = teachers(&ctx)?;
        let det_dir = ctx.dir(Stage::Teach).join("det");
        if records.is_empty() || !det_dir.is_dir() {
            return Err(PipelineError::Config(
                "teach produced no detections; enable teachers.detection with synthetic teachers".into(),
            ));
        }
        let ids: Vec<&str> = manifest.split(SplitName::Unlabeled).map(|e| e.id.as_str()).collect();
        if ids.is_empty() {
            return Err(PipelineError::Data("no unlabeled frames to pseudo-label".into()));
        }
        let mut per_frame: HashMap<String, Vec<Box3D>> = HashMap::new();
        for r in &records {
            let rows: Vec<DetectionRecord> = read_jsonl(&det_dir.join(format!("{}.jsonl", r.name)))?;
            for row in rows {
                per_frame.entry(row.frame).or_default().extend(row.boxes);
            }
        }
        let frames: Vec<FusedFrame> = ids
            .par_iter()
            .map(|id| {
                let boxes = per_frame.get(*id).map(Vec::as_slice).unwrap_or(&[]);
                Ok(FusedFrame {
                    frame: id.to_string(),
                    boxes: detfuse::pseudo_label_frame(boxes, &cfg.cluster)?,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        write_jsonl(&dir.join("fused.jsonl"), &frames)
    })
}

/// Re-thresholds pseudo labels at `theta` and merges in the human labels.
fn build_dataset(
    manifest: &Manifest,
    labeled: &[Sequence],
    pseudo: &[LabeledScan],
    theta: f64,
) -> Result<PseudoDataset, PipelineError> {
    let human: Vec<LabeledScan> = labeled
        .iter()
        .map(|s| human_scan(s, manifest.classes))
        .collect::<Result<_, _>>()?;
    let reselected: Vec<LabeledScan> = pseudo
        .iter()
        .map(|s| {
            let labels: Vec<PseudoLabel> = s
                .classes
                .iter()
                .zip(&s.confidences)
                .map(|(&class, &confidence)| PseudoLabel {
                    class,
                    confidence,
                    selected: false,
                })
                .collect();
            LabeledScan::pseudo(s.sequence.clone(), &concord::select(&labels, theta))
        })
        .collect();
    let ignored: Vec<Vec<bool>> = human.iter().map(|h| h.selected.clone()).collect();
    let mut dataset = concord::assemble_dataset(human, reselected)?;
    // Assembly marks human scans fully selected; restore ignored points.
    for (scan, keep) in dataset
        .samples
        .iter_mut()
        .filter(|s| s.provenance == Provenance::Human)
        .zip(ignored)
    {
        scan.selected = keep;
    }
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SelectSummary {
    theta: f64,
    human_scans: usize,
    pseudo_scans: usize,
    pseudo_points: usize,
    selected_points: usize,
}

fn summary(dataset: &PseudoDataset, theta: f64) -> SelectSummary {
    let pseudo = || dataset.samples.iter().filter(|s| s.provenance == Provenance::Pseudo);
    SelectSummary {
        theta,
        human_scans: dataset.samples.len() - pseudo().count(),
        pseudo_scans: pseudo().count(),
        pseudo_points: pseudo().map(LabeledScan::len).sum(),
        selected_points: pseudo().map(LabeledScan::selected_count).sum(),
    }
}

/// Builds the student's training set `D^l ∪ D^p`.
pub fn stage_select(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::Select, &[Stage::Synth, Stage::FuseSeg], |dir| {
        let manifest = ctx.manifest()?;
        let labeled = ctx.load_split(&manifest, SplitName::Labeled)?;
        let pseudo: Vec<LabeledScan> = read_jsonl(&ctx.dir(Stage::FuseSeg).join("pseudo.jsonl"))?;
        let dataset = build_dataset(&manifest, &labeled, &pseudo, cfg.fusion.theta)?;
        write_jsonl(&dir.join("dataset.jsonl"), &dataset.samples)?;
        write_json(&dir.join("summary.json"), &summary(&dataset, cfg.fusion.theta))
    })
}

/// Training points for the selected labels of `scans`.
fn samples_for(
    scans: &[LabeledScan],
    sequences: &HashMap<&str, &Sequence>,
    model: &PointModel,
) -> Result<Vec<PointSample>, PipelineError> {
    let per_scan: Vec<Vec<PointSample>> = scans
        .par_iter()
        .map(|scan| {
            let seq = sequences
                .get(scan.sequence.as_str())
                .ok_or_else(|| PipelineError::Data(format!("sequence {} is not in the manifest", scan.sequence)))?;
            if seq.reference().len() != scan.len() {
                return Err(PipelineError::Data(format!(
                    "{}: {} labels for {} points",
                    scan.sequence,
                    scan.len(),
                    seq.reference().len()
                )));
            }
            let index = model.index(seq)?;
            let inputs = model.inputs(seq, &index)?;
            Ok(inputs
                .into_iter()
                .enumerate()
                .filter(|(i, x)| scan.selected[*i] && !x.is_empty())
                .map(|(i, inputs)| PointSample {
                    inputs,
                    target: scan.classes[i],
                    confidence: scan.confidences[i],
                })
                .collect())
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

fn train_student(
    ctx: &Ctx,
    manifest: &Manifest,
    dataset: &[LabeledScan],
    sequences: &HashMap<&str, &Sequence>,
) -> Result<(PointModel, TrainReport, usize), PipelineError> {
    let init = ctx.student_init(manifest.classes)?;
    let data = samples_for(dataset, sequences, &init)?;
    let train_cfg = TrainConfig {
        seed: ctx.cfg.seed,
        ..ctx.cfg.train.clone()
    };
    let (model, report) = featnet::train(&init, &data, &train_cfg)?;
    Ok((model, report, data.len()))
}

fn load_for(ctx: &Ctx, manifest: &Manifest, ids: &[&str]) -> Result<Vec<Sequence>, PipelineError> {
    ids.par_iter()
        .map(|id| {
            let e = manifest
                .entry(id)
                .ok_or_else(|| PipelineError::Data(format!("sequence {id} is not in the manifest")))?;
            ctx.load(manifest, e)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainSummary {
    samples: usize,
    steps: usize,
    epoch_loss: Vec<f64>,
}

/// Trains the causal student on the selected dataset.
pub fn stage_train(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::Train, &[Stage::Synth, Stage::Select], |dir| {
        let manifest = ctx.manifest()?;
        let dataset: Vec<LabeledScan> = read_jsonl(&ctx.dir(Stage::Select).join("dataset.jsonl"))?;
        let ids: Vec<&str> = dataset.iter().map(|s| s.sequence.as_str()).collect();
        let seqs = load_for(&ctx, &manifest, &ids)?;
        let by_id: HashMap<&str, &Sequence> = seqs.iter().map(|s| (s.id.as_str(), s)).collect();
        let (model, report, samples) = train_student(&ctx, &manifest, &dataset, &by_id)?;
        write_json(&dir.join("student.json"), &model)?;
        write_json(
            &dir.join("report.json"),
            &TrainSummary {
                samples,
                steps: report.steps,
                epoch_loss: report.epoch_loss,
            },
        )
    })
}

fn evaluate(model: &PointModel, test: &[Sequence], classes: usize) -> Result<(IouResult, usize), PipelineError> {
    let parts: Vec<ConfusionMatrix> = test
        .par_iter()
        .map(|seq| {
            let gt = truth(seq)?;
            let index = model.index(seq)?;
            let inputs = model.inputs(seq, &index)?;
            let mut cm = ConfusionMatrix::new(classes).with_ignore(classes);
            for (x, &g) in inputs.iter().zip(&gt) {
                if x.is_empty() {
                    continue;
                }
                let z = featnet::logits(model, x)?;
                cm.add(g, concord::argmax(&z))?;
            }
            Ok(cm)
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut cm = ConfusionMatrix::new(classes).with_ignore(classes);
    for p in &parts {
        cm.merge(p);
    }
    let points = cm.total() as usize;
    Ok((evalkit::miou(&cm)?, points))
}

fn segmentation_report(iou: &IouResult, points: usize) -> MetricsReport {
    let mut report = MetricsReport::segmentation(iou);
    report.extra.insert("points".into(), points as f64);
    report
}

/// AP of the selected fused boxes against ground-truth boxes, per class.
fn detection_report(
    ctx: &Ctx,
    manifest: &Manifest,
    frames: &[FusedFrame],
) -> Result<MetricsReport, PipelineError> {
    let ids: Vec<&str> = frames.iter().map(|f| f.frame.as_str()).collect();
    let seqs = load_for(ctx, manifest, &ids)?;
    let classes = manifest.classes;
    let mut report = MetricsReport::new("detection");
    let mut defined = Vec::new();
    for class in 0..classes {
        let mut pairs = Vec::new();
        for (f, seq) in frames.iter().zip(&seqs) {
            let gts: Vec<Box3D> = seq
                .box_labels()
                .ok_or_else(|| SynthError::MissingGroundTruth(seq.id.clone()))?
                .iter()
                .filter(|b| b.class() == class)
                .cloned()
                .collect();
            let dets: Vec<Box3D> = f
                .boxes
                .iter()
                .filter(|b| b.selected && b.class == class)
                .map(|b| Box3D::with_hard_class(b.bbox.center, b.bbox.size, b.bbox.yaw, class, b.c, classes))
                .collect();
            pairs.push((dets, gts));
        }
        let ap = evalkit::average_precision_frames(&pairs, ctx.cfg.eval.match_iou, ctx.cfg.eval.interpolation)?;
        let value = ap.is_defined().then_some(ap.ap);
        if let Some(v) = value {
            defined.push(v);
        }
        report.per_class.insert(class.to_string(), value);
    }
    report.mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    report.extra.insert("match_iou".into(), ctx.cfg.eval.match_iou);
    Ok(report)
}

/// Scores the student on the test split; also scores fused pseudo boxes
/// when the fuse-det stage has run.
pub fn stage_eval(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    let mut deps = vec![Stage::Synth, Stage::Train];
    if store::read_record(&ctx.dir(Stage::FuseDet))?.is_some() {
        deps.push(Stage::FuseDet);
    }
    let with_det = deps.contains(&Stage::FuseDet);
    ctx.run(Stage::Eval, &deps, |dir| {
        let manifest = ctx.manifest()?;
        let model: PointModel = read_json(&ctx.dir(Stage::Train).join("student.json"))?;
        model.validate()?;
        let test = ctx.load_split(&manifest, SplitName::Test)?;
        if test.is_empty() {
            return Err(PipelineError::Data("no test sequences to evaluate".into()));
        }
        let (iou, points) = evaluate(&model, &test, manifest.classes)?;
        let report = segmentation_report(&iou, points);
        write_json(&dir.join("metrics.json"), &report)?;
        fs::write(dir.join("metrics.txt"), report.to_table()).map_err(io(dir))?;
        if with_det {
            let frames: Vec<FusedFrame> = read_jsonl(&ctx.dir(Stage::FuseDet).join("fused.jsonl"))?;
            let det = detection_report(&ctx, &manifest, &frames)?;
            write_json(&dir.join("detection.json"), &det)?;
            fs::write(dir.join("detection.txt"), det.to_table()).map_err(io(dir))?;
        }
        Ok(())
    })
}

/// Student quality as a function of the selection threshold.
pub fn stage_sweep(cfg: &PipelineConfig) -> Result<StageOutcome, PipelineError> {
    let ctx = Ctx::new(cfg)?;
    ctx.run(Stage::Sweep, &[Stage::Synth, Stage::FuseSeg], |dir| {
        let manifest = ctx.manifest()?;
        let labeled = ctx.load_split(&manifest, SplitName::Labeled)?;
        let unlabeled = ctx.load_split(&manifest, SplitName::Unlabeled)?;
        let test = ctx.load_split(&manifest, SplitName::Test)?;
        if test.is_empty() {
            return Err(PipelineError::Data("no test sequences to evaluate".into()));
        }
        let pseudo: Vec<LabeledScan> = read_jsonl(&ctx.dir(Stage::FuseSeg).join("pseudo.jsonl"))?;
        let by_id: HashMap<&str, &Sequence> = labeled.iter().chain(&unlabeled).map(|s| (s.id.as_str(), s)).collect();
        let mut curve = Vec::new();
        for &theta in &cfg.sweep.thetas {
            let dataset = build_dataset(&manifest, &labeled, &pseudo, theta)?;
            let (model, _, training_points) = train_student(&ctx, &manifest, &dataset.samples, &by_id)?;
            let (iou, points) = evaluate(&model, &test, manifest.classes)?;
            write_json(
                &dir.join(format!("theta-{theta:.2}.json")),
                &segmentation_report(&iou, points),
            )?;
            let s = summary(&dataset, theta);
            curve.push(SweepPoint {
                theta,
                miou: iou.mean,
                per_class: iou.per_class,
                selected_points: s.selected_points,
                pseudo_points: s.pseudo_points,
                training_points,
            });
        }
        write_json(&dir.join("curve.json"), &curve)?;
        let mut csv = String::from("theta,miou,selected_points,pseudo_points,training_points\n");
        for p in &curve {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.theta, p.miou, p.selected_points, p.pseudo_points, p.training_points
            ));
        }
        fs::write(dir.join("curve.csv"), csv).map_err(io(dir))
    })
}

/// Runs × metrics table from metrics files, named by the given labels.
pub fn stage_compare(runs: &[(String, PathBuf)]) -> Result<Comparison, PipelineError> {
    let reports = runs
        .iter()
        .map(|(name, path)| Ok((name.clone(), read_json::<MetricsReport>(path)?)))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(evalkit::compare_runs(&reports)?)
}

/// synth → teach → fuse-seg → (fuse-det) → select → train → eval.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>, PipelineError> {
    let mut out = vec![stage_synth(cfg)?, stage_teach(cfg)?, stage_fuse_seg(cfg)?];
    let detection = cfg.teachers.detection
        && cfg.teachers.mode == TeacherMode::Synthetic
        && cfg.teachers.set != TeacherSet::Supervised;
    if detection {
        out.push(stage_fuse_det(cfg)?);
    }
    out.push(stage_select(cfg)?);
    out.push(stage_train(cfg)?);
    out.push(stage_eval(cfg)?);
    Ok(out)
}
