use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::image::{sha256_hex, BinaryMask, ImageBuf, ImageError};

use super::session::{SessionDoc, SessionState, SESSION_SCHEMA_VERSION};

/// PNG blobs keyed by the SHA-256 of their bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArtifactStore {
    blobs: BTreeMap<String, Arc<Vec<u8>>>,
}

impl ArtifactStore {
    pub fn put_png(&mut self, png: Vec<u8>) -> String {
        let hash = sha256_hex(&png);
        self.blobs.entry(hash.clone()).or_insert_with(|| Arc::new(png));
        hash
    }

    pub fn put_image(&mut self, image: &ImageBuf) -> Result<String, ImageError> {
        Ok(self.put_png(image.to_png()?))
    }

    pub fn put_mask(&mut self, mask: &BinaryMask) -> Result<String, ImageError> {
        Ok(self.put_png(mask.to_png()?))
    }

    pub fn get(&self, hash: &str) -> Option<Arc<Vec<u8>>> {
        self.blobs.get(hash).cloned()
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.blobs.contains_key(hash)
    }

    pub fn merge(&mut self, other: ArtifactStore) {
        for (k, v) in other.blobs {
            self.blobs.entry(k).or_insert(v);
        }
    }

    pub fn hashes(&self) -> impl Iterator<Item = &str> {
        self.blobs.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("session.json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("session schema version {found} is not supported (expected {SESSION_SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("artifact {expected} is referenced but missing")]
    MissingArtifact { expected: String },
    #[error("artifact {expected}.png hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("session is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Image(#[from] ImageError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(dir))?;
    tmp.write_all(bytes).map_err(io(path))?;
    tmp.as_file().sync_all().map_err(io(path))?;
    tmp.persist(path).map_err(|e| io(path)(e.error))?;
    Ok(())
}

/// Persists a session as `session.json` plus `artifacts/<sha256>.png`.
/// Artifacts go first so a crash never leaves a document pointing at
/// missing files.
pub fn save_session(state: &SessionState, dir: &Path) -> Result<(), StoreError> {
    let art_dir = dir.join("artifacts");
    fs::create_dir_all(&art_dir).map_err(io(&art_dir))?;
    for hash in state.referenced_hashes() {
        let path = art_dir.join(format!("{hash}.png"));
        if path.exists() {
            continue;
        }
        let blob = state
            .artifacts()
            .get(&hash)
            .ok_or_else(|| StoreError::MissingArtifact { expected: hash.clone() })?;
        write_atomic(&path, &blob)?;
    }
    let doc = serde_json::to_vec_pretty(&state.document())?;
    write_atomic(&dir.join("session.json"), &doc)
}

/// Loads a saved session and verifies every referenced artifact's hash.
pub fn load_session(dir: &Path) -> Result<SessionState, StoreError> {
    let doc_path = dir.join("session.json");
    let text = fs::read(&doc_path).map_err(io(&doc_path))?;
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let found = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    if found != SESSION_SCHEMA_VERSION as u64 {
        return Err(StoreError::SchemaVersionMismatch { found });
    }
    let doc: SessionDoc = serde_json::from_value(raw)?;
    let mut store = ArtifactStore::default();
    for hash in doc.referenced_hashes() {
        let path = dir.join("artifacts").join(format!("{hash}.png"));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::MissingArtifact { expected: hash })
            }
            Err(e) => return Err(io(&path)(e)),
        };
        let actual = store.put_png(bytes);
        if actual != hash {
            return Err(StoreError::HashMismatch {
                expected: hash,
                actual,
            });
        }
    }
    SessionState::from_document(doc, store)
}
