//! Canonical JSON files: configs, checkpoints, transcripts, and JSONL logs.
//!
//! Documents are written with recursively sorted object keys, two-space
//! indentation, shortest round-trip float formatting and a trailing newline,
//! so equal values always produce equal bytes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{StudyConfig, StudyResult};
use crate::orchestrator::StudyState;

pub const SCHEMA_VERSION: &str = "1";

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const PROMPT_LOG_FILE: &str = "prompts.jsonl";
pub const PROVIDER_LOG_FILE: &str = "providers.jsonl";

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt document {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: schema_version {found:?} is not supported (expected {expected:?})")]
    SchemaVersionMismatch {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistenceError + '_ {
    move |source| PersistenceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn sort_keys(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut sorted = Map::new();
            for (k, v) in entries {
                sorted.insert(k, sort_keys(v));
            }
            Value::Object(sorted)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Canonical pretty JSON with a trailing newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let mut s = serde_json::to_string_pretty(&sort_keys(serde_json::to_value(value)?))?;
    s.push('\n');
    Ok(s)
}

/// Canonical single-line JSON, for JSONL records.
pub fn to_canonical_line<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    serde_json::to_string(&sort_keys(serde_json::to_value(value)?))
}

/// Writes through a sibling temp file and a rename, so readers never see a
/// half-written document.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), PersistenceError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    schema_version: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct TranscriptBody {
    transcript: StudyResult,
}

/// A resumable snapshot of a study in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Lines of `prompts.jsonl` that belong to the checkpointed state.
    pub prompt_log_lines: usize,
    pub state: StudyState,
}

fn read_versioned<T: DeserializeOwned>(path: &Path) -> Result<T, PersistenceError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let corrupt = |message: String| PersistenceError::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| corrupt(e.to_string()))?;
    let found = match value.get("schema_version") {
        Some(Value::String(s)) => s.clone(),
        Some(other) => other.to_string(),
        None => return Err(corrupt("missing schema_version".into())),
    };
    if found != SCHEMA_VERSION {
        return Err(PersistenceError::SchemaVersionMismatch {
            path: path.to_path_buf(),
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))
}

pub fn transcript_to_string(result: &StudyResult) -> Result<String, PersistenceError> {
    Ok(to_canonical_json(&Versioned {
        schema_version: SCHEMA_VERSION.to_string(),
        body: TranscriptBody {
            transcript: result.clone(),
        },
    })?)
}

pub fn write_transcript(result: &StudyResult, path: &Path) -> Result<(), PersistenceError> {
    write_atomic(path, &transcript_to_string(result)?)
}

pub fn read_transcript(path: &Path) -> Result<StudyResult, PersistenceError> {
    read_versioned::<TranscriptBody>(path).map(|b| b.transcript)
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), PersistenceError> {
    write_atomic(
        path,
        &to_canonical_json(&Versioned {
            schema_version: SCHEMA_VERSION.to_string(),
            body: checkpoint.clone(),
        })?,
    )
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, PersistenceError> {
    read_versioned::<Checkpoint>(path)
}

pub fn write_config(config: &StudyConfig, path: &Path) -> Result<(), PersistenceError> {
    write_atomic(path, &to_canonical_json(config)?)
}

/// Reads a config file. Unknown keys (such as `_comment`) are ignored.
pub fn read_config(path: &Path) -> Result<StudyConfig, PersistenceError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PersistenceError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Append-only JSON Lines file, one canonical record per line. Safe to share
/// between tasks.
#[derive(Debug)]
pub struct JsonlWriter {
    path: PathBuf,
    writer: Mutex<BufWriter<File>>,
}

impl JsonlWriter {
    pub fn open_append(path: impl Into<PathBuf>) -> Result<Self, PersistenceError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            writer: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), PersistenceError> {
        let line = to_canonical_line(record)?;
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(w, "{line}").map_err(io_err(&self.path))?;
        w.flush().map_err(io_err(&self.path))
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Value>, PersistenceError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PersistenceError::Corrupt {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", n + 1),
            })?,
        );
    }
    Ok(out)
}

pub fn count_lines(path: &Path) -> Result<usize, PersistenceError> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f).lines().count()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(0),
        Err(e) => Err(io_err(path)(e)),
    }
}

/// Keeps only the first `keep` lines of a JSONL file. Used on resume to drop
/// log records written after the checkpoint.
pub fn truncate_lines(path: &Path, keep: usize) -> Result<(), PersistenceError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let kept: String = text.split_inclusive('\n').take(keep).collect();
    if kept.len() != text.len() {
        fs::write(path, kept).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = json!({"b": 1, "a": {"d": [ {"z": 1, "y": 2} ], "c": 2.5}});
        let s = to_canonical_json(&v).unwrap();
        let a = s.find("\"a\"").unwrap();
        let b = s.find("\"b\"").unwrap();
        assert!(a < b);
        assert!(s.find("\"y\"").unwrap() < s.find("\"z\"").unwrap());
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn floats_round_trip() {
        let v = json!({"x": 0.1 + 0.2, "y": 52.0 / 15.0});
        let s = to_canonical_json(&v).unwrap();
        let back: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["x"].as_f64().unwrap(), 0.1 + 0.2);
        assert_eq!(back["y"].as_f64().unwrap(), 52.0 / 15.0);
    }

    #[test]
    fn jsonl_append_count_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let w = JsonlWriter::open_append(&path).unwrap();
        for i in 0..5 {
            w.append(&json!({"i": i})).unwrap();
        }
        drop(w);
        assert_eq!(count_lines(&path).unwrap(), 5);
        truncate_lines(&path, 2).unwrap();
        let rows = read_jsonl(&path).unwrap();
        assert_eq!(rows, vec![json!({"i": 0}), json!({"i": 1})]);
        assert_eq!(count_lines(&dir.path().join("missing")).unwrap(), 0);
    }

    #[test]
    fn missing_version_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        fs::write(&path, "{}").unwrap();
        assert!(matches!(
            read_transcript(&path),
            Err(PersistenceError::Corrupt { .. })
        ));
    }
}
