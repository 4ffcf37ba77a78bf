//! JSON Lines persistence with a schema-version field on every record.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error(
        "{path}:{line}: unsupported schema_version {found} (this build reads {SCHEMA_VERSION})"
    )]
    UnsupportedSchema {
        path: PathBuf,
        line: usize,
        found: u32,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn current_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Serialize)]
struct Out<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct In<T> {
    #[serde(default = "current_version")]
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

/// Serialized JSONL bytes, one record per line.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<Vec<u8>, serde_json::Error> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(
            &mut buf,
            &Out {
                schema_version: SCHEMA_VERSION,
                record,
            },
        )?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Write through a temporary file so readers never see half a file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes)
        .and_then(|_| file.sync_all())
        .map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<FileEntry, StoreError> {
    let bytes = to_jsonl(records).map_err(|source| StoreError::Json {
        path: path.to_path_buf(),
        line: 0,
        source,
    })?;
    write_atomic(path, &bytes)?;
    Ok(FileEntry {
        digest: sha256_hex(&bytes),
        records: records.len(),
    })
}

/// Blank lines are skipped; a missing schema_version counts as current.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: In<T> = serde_json::from_str(&line).map_err(|source| StoreError::Json {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?;
        if parsed.schema_version != SCHEMA_VERSION {
            return Err(StoreError::UnsupportedSchema {
                path: path.to_path_buf(),
                line: i + 1,
                found: parsed.schema_version,
            });
        }
        out.push(parsed.record);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, StoreError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

/// Content digest and record count of one persisted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub digest: String,
    pub records: usize,
}

/// A run directory holding stage files and `manifest.json`.
#[derive(Debug, Clone)]
pub struct RunStore {
    dir: PathBuf,
}

impl RunStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write<T: Serialize>(&self, name: &str, records: &[T]) -> Result<FileEntry, StoreError> {
        write_jsonl(&self.path(name), records)
    }

    pub fn read<T: DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, StoreError> {
        read_jsonl(&self.path(name))
    }

    /// True when the file exists and hashes to `digest`.
    pub fn verify(&self, name: &str, digest: &str) -> bool {
        file_digest(&self.path(name)).is_ok_and(|d| d == digest)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), StoreError> {
        let path = self.path(name);
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| StoreError::Json {
            path: path.clone(),
            line: 0,
            source,
        })?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T, StoreError> {
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&bytes).map_err(|source| StoreError::Json {
            path,
            line: 0,
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EvalSample;

    #[test]
    fn round_trip_with_version() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let rows = vec![
            EvalSample {
                query_id: "q".into(),
                model_id: "m".into(),
                text: "t\nx".into(),
                reference: None,
            },
            EvalSample {
                query_id: "q".into(),
                model_id: "n".into(),
                text: "u".into(),
                reference: Some("r".into()),
            },
        ];
        let entry = store.write("s.jsonl", &rows).unwrap();
        assert_eq!(entry.records, 2);
        assert!(store.verify("s.jsonl", &entry.digest));
        let text = fs::read_to_string(store.path("s.jsonl")).unwrap();
        assert!(text
            .lines()
            .all(|l| l.starts_with("{\"schema_version\":1,")));
        assert_eq!(store.read::<EvalSample>("s.jsonl").unwrap(), rows);

        fs::write(
            store.path("old.jsonl"),
            "{\"query_id\":\"q\",\"model_id\":\"m\",\"text\":\"t\"}\n\n",
        )
        .unwrap();
        assert_eq!(store.read::<EvalSample>("old.jsonl").unwrap().len(), 1);
        fs::write(
            store.path("new.jsonl"),
            "{\"schema_version\":9,\"query_id\":\"q\",\"model_id\":\"m\",\"text\":\"t\"}\n",
        )
        .unwrap();
        assert!(matches!(
            store.read::<EvalSample>("new.jsonl"),
            Err(StoreError::UnsupportedSchema { found: 9, .. })
        ));
        assert!(!store.verify("s.jsonl", "0"));
    }
}
