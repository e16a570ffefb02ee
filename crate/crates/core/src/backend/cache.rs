// SPDX-License-Identifier: Apache-2.0

//! On-disk response cache: `<root>/<backend_id>/<key-digest>`, one JSON
//! record per file, written via temp file + atomic rename.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Everything that identifies one request. Any field change yields a new key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKeyParts {
    pub backend_id: String,
    pub model: String,
    pub prompt_digest: String,
    pub image_digest: String,
    pub attempt_index: u32,
}

impl CacheKeyParts {
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for field in [
            self.backend_id.as_bytes(),
            self.model.as_bytes(),
            self.prompt_digest.as_bytes(),
            self.image_digest.as_bytes(),
        ] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field);
        }
        h.update(self.attempt_index.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub parts: CacheKeyParts,
    pub raw_text: String,
    pub received_unix_ms: u64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, backend_id: &str, key: &str) -> PathBuf {
        self.root.join(sanitize(backend_id)).join(key)
    }

    pub fn get(&self, backend_id: &str, key: &str) -> Result<Option<CacheRecord>> {
        let path = self.path_for(backend_id, key);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, record: &CacheRecord) -> Result<()> {
        let path = self.path_for(&record.parts.backend_id, &record.key);
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            record.key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let bytes = serde_json::to_vec_pretty(record)?;
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
