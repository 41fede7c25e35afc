use std::fs;
use std::path::Path;

use concord_core::experiment::TeacherSet;
use concord_core::pipeline::{self, Manifest, PipelineConfig, PipelineError, SplitName, StageRecord, SweepPoint};
use concord_core::pipeline::{DataConfig, TeacherMode};

fn small(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        output_dir: dir.to_path_buf(),
        seed: 5,
        ..PipelineConfig::default()
    };
    if let DataConfig::Synth(s) = &mut cfg.data {
        s.sequences = 6;
        s.test_sequences = 2;
        s.labeled_ratio = 0.34;
        s.world.ground_points = 40;
        s.world.points_per_object = 10;
    }
    cfg.train.epochs = 2;
    cfg.sweep.thetas = vec![0.0, 0.9];
    cfg
}

fn record(dir: &Path, stage: &str) -> StageRecord {
    serde_json::from_str(&fs::read_to_string(dir.join(stage).join("stage.json")).unwrap()).unwrap()
}

#[test]
fn full_run_writes_records_and_skips_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let first = pipeline::run_all(&cfg).unwrap();
    let names: Vec<&str> = first.iter().map(|o| o.stage.as_str()).collect();
    assert_eq!(names, ["synth", "teach", "fuse-seg", "fuse-det", "select", "train", "eval"]);
    assert!(first.iter().all(|o| !o.skipped));

    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("synth/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.split(SplitName::Labeled).count(), 2);
    assert_eq!(manifest.split(SplitName::Unlabeled).count(), 4);
    assert_eq!(manifest.split(SplitName::Test).count(), 2);

    let eval = record(tmp.path(), "eval");
    assert_eq!(eval.upstream.len(), 3);
    assert!(eval.outputs.contains_key("metrics.json"));
    assert!(eval.outputs.contains_key("detection.json"));
    let teach = record(tmp.path(), "teach");
    assert_eq!(teach.seed, 5);
    assert!(teach.outputs.keys().any(|k| k.starts_with("seg/")));

    let second = pipeline::run_all(&cfg).unwrap();
    assert!(second.iter().all(|o| o.skipped));
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.hash, b.hash);
    }
}

#[test]
fn config_change_reruns_only_downstream() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    pipeline::run_all(&cfg).unwrap();
    cfg.fusion.theta = 0.9;
    let out = pipeline::run_all(&cfg).unwrap();
    let rerun: Vec<&str> = out.iter().filter(|o| !o.skipped).map(|o| o.stage.as_str()).collect();
    assert_eq!(rerun, ["select", "train", "eval"]);
}

#[test]
fn stale_and_missing_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    match pipeline::stage_teach(&cfg) {
        Err(PipelineError::MissingInput { needs, .. }) => assert_eq!(needs, "concord synth"),
        other => panic!("{other:?}"),
    }
    pipeline::stage_synth(&cfg).unwrap();
    pipeline::stage_teach(&cfg).unwrap();

    // Upstream config changed without rerunning it.
    cfg.seed = 6;
    assert!(matches!(pipeline::stage_fuse_seg(&cfg), Err(PipelineError::StaleInput { .. })));
    cfg.seed = 5;
    pipeline::stage_fuse_seg(&cfg).unwrap();

    // An output edited by hand.
    let path = tmp.path().join("teach/teachers.json");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push('\n');
    fs::write(&path, text).unwrap();
    let err = pipeline::stage_select(&cfg).unwrap_err();
    assert!(matches!(err, PipelineError::StaleInput { .. }), "{err}");
    assert_eq!(err.exit_code(), pipeline::EXIT_DATA);
}

#[test]
fn invalid_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.teachers.set = TeacherSet::Concordance { ranges: vec![1, 9] };
    let err = pipeline::stage_synth(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), pipeline::EXIT_CONFIG);
    assert!(PipelineConfig::from_json(r#"{"schema_version": 2}"#).is_err());
    assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
}

#[test]
fn sweep_writes_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    pipeline::stage_synth(&cfg).unwrap();
    pipeline::stage_teach(&cfg).unwrap();
    pipeline::stage_fuse_seg(&cfg).unwrap();
    pipeline::stage_sweep(&cfg).unwrap();
    let curve: Vec<SweepPoint> =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("sweep/curve.json")).unwrap()).unwrap();
    assert_eq!(curve.len(), 2);
    assert!(curve[0].selected_points >= curve[1].selected_points);
    assert_eq!(curve[0].selected_points, curve[0].pseudo_points);
    assert!(curve.iter().all(|p| (0.0..=1.0).contains(&p.miou)));
    let csv = fs::read_to_string(tmp.path().join("sweep/curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn supervised_and_trained_teachers_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.teachers.set = TeacherSet::Supervised;
    let out = pipeline::run_all(&cfg).unwrap();
    assert!(out.iter().all(|o| o.stage != "fuse-det"));

    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    cfg.teachers.mode = TeacherMode::Trained;
    cfg.teachers.detection = false;
    cfg.teachers.train.epochs = 1;
    cfg.teachers.set = TeacherSet::Concordance { ranges: vec![1] };
    pipeline::run_all(&cfg).unwrap();
    assert!(tmp.path().join("teach/models/t0-r1.json").is_file());
}
