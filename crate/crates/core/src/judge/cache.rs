//! Content-addressed on-disk cache of raw judge responses.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::hashing::sha256_hex;
use crate::model::write_atomic;

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    response: String,
    sha256: String,
}

/// One file per key under `<dir>/<key[..2]>/<key>.json`. Writes go through
/// a temporary file and rename, so readers never see half an entry; the
/// stored checksum catches anything else.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    /// Stored response for `key`. Corrupt entries are logged, removed and
    /// reported as misses.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = self.entry_path(key);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
            Err(e) => {
                tracing::warn!(path = %path.display(), error = %e, "unreadable cache entry");
                return None;
            }
        };
        match serde_json::from_slice::<Entry>(&bytes) {
            Ok(entry) if entry.key == key && entry.sha256 == sha256_hex(entry.response.as_bytes()) => {
                Some(entry.response)
            }
            _ => {
                tracing::warn!(path = %path.display(), "corrupt cache entry; invalidating");
                self.invalidate(key);
                None
            }
        }
    }

    pub fn put(&self, key: &str, response: &str) -> io::Result<()> {
        let entry = Entry {
            key: key.to_string(),
            response: response.to_string(),
            sha256: sha256_hex(response.as_bytes()),
        };
        let bytes = serde_json::to_vec(&entry).map_err(io::Error::other)?;
        write_atomic(&self.entry_path(key), &bytes)
    }

    pub fn invalidate(&self, key: &str) {
        let _ = std::fs::remove_file(self.entry_path(key));
    }
}
