//! Content hashes and per-stage reproducibility records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::PipelineError;

pub const RECORD_SCHEMA: &str = "concord-stage";
pub const RECORD_FILE: &str = "stage.json";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io(path))?))
}

pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub schema: String,
    pub stage: String,
    pub hash: String,
    pub tool_version: String,
    pub seed: u64,
    /// The config slice this stage depends on.
    pub config: serde_json::Value,
    /// Hash of every stage read, by stage name.
    pub upstream: BTreeMap<String, String>,
    /// SHA-256 of every produced file, by path relative to the stage dir.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: String,
    pub hash: String,
    pub skipped: bool,
    pub dir: PathBuf,
}

/// Hash of a stage's identity: name, tool version, config slice and
/// upstream hashes. `serde_json::Value` maps are key-sorted, so the
/// encoding is canonical.
pub fn stage_hash(stage: &str, config: &serde_json::Value, upstream: &BTreeMap<String, String>) -> String {
    let doc = serde_json::json!({
        "stage": stage,
        "tool_version": TOOL_VERSION,
        "config": config,
        "upstream": upstream,
    });
    sha256_hex(doc.to_string().as_bytes())
}

pub fn read_record(dir: &Path) -> Result<Option<StageRecord>, PipelineError> {
    let path = dir.join(RECORD_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

/// First output whose content no longer matches the record.
pub fn changed_output(dir: &Path, record: &StageRecord) -> Result<Option<String>, PipelineError> {
    for (rel, hash) in &record.outputs {
        let path = dir.join(rel);
        if !path.is_file() || &sha256_file(&path)? != hash {
            return Ok(Some(rel.clone()));
        }
    }
    Ok(None)
}

/// Files under `dir`, relative and sorted, excluding the record itself.
fn list_files(dir: &Path) -> Result<Vec<String>, PipelineError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(io(&d))? {
            let p = e.map_err(io(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("under dir").to_string_lossy().replace('\\', "/");
                if rel != RECORD_FILE {
                    out.push(rel);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn write_record(
    dir: &Path,
    stage: &str,
    hash: &str,
    seed: u64,
    config: serde_json::Value,
    upstream: BTreeMap<String, String>,
) -> Result<StageRecord, PipelineError> {
    let mut outputs = BTreeMap::new();
    for rel in list_files(dir)? {
        outputs.insert(rel.clone(), sha256_file(&dir.join(&rel))?);
    }
    let record = StageRecord {
        schema: RECORD_SCHEMA.into(),
        stage: stage.into(),
        hash: hash.into(),
        tool_version: TOOL_VERSION.into(),
        seed,
        config,
        upstream,
        outputs,
    };
    write_json(&dir.join(RECORD_FILE), &record)?;
    Ok(record)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io(path))?);
    for r in rows {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(f, "{line}").map_err(io(path))?;
    }
    f.flush().map_err(io(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let f = fs::File::open(path).map_err(io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}
