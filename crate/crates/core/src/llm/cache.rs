//! Content-addressed response cache.
//!
//! Layout: one pretty-printed JSON file per entry, `<dir>/<key>.json`, where
//! `key` is the lowercase hex SHA-256 of the JSON array
//! `[model_name, temperature_or_null, prompt]`. Entries are written to a
//! temporary file in the same directory and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key for one (model, prompt, temperature) triple.
pub fn cache_key(model: &str, prompt: &str, temperature: Option<f64>) -> String {
    let material = serde_json::to_vec(&(model, temperature, prompt)).expect("strings and floats serialize");
    sha256_hex(&material)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub temperature: Option<f64>,
    pub prompt_sha256: String,
    pub response: String,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> std::io::Result<Option<CacheEntry>> {
        match fs::read(self.path_for(key)) {
            Ok(bytes) => match serde_json::from_slice::<CacheEntry>(&bytes) {
                Ok(entry) if entry.key == key => Ok(Some(entry)),
                Ok(_) | Err(_) => {
                    log::warn!("ignoring corrupt cache entry {key}");
                    Ok(None)
                }
            },
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(entry).map_err(std::io::Error::other)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{}.{}.{n}.tmp", entry.key, std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path_for(&entry.key))
    }

    pub fn len(&self) -> std::io::Result<usize> {
        Ok(fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> std::io::Result<bool> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_separate_every_component() {
        let base = cache_key("m", "prompt", Some(0.0));
        assert_ne!(base, cache_key("m2", "prompt", Some(0.0)));
        assert_ne!(base, cache_key("m", "prompt ", Some(0.0)));
        assert_ne!(base, cache_key("m", "prompt", None));
        assert_ne!(base, cache_key("m", "prompt", Some(0.5)));
        // No ambiguity from concatenation.
        assert_ne!(cache_key("ab", "c", None), cache_key("a", "bc", None));
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache_key("m", "p", None);
        assert!(cache.get(&key).unwrap().is_none());
        let entry = CacheEntry {
            key: key.clone(),
            model: "m".into(),
            temperature: None,
            prompt_sha256: sha256_hex(b"p"),
            response: "{\"predicted_lab\": 4.0}".into(),
        };
        cache.put(&entry).unwrap();
        assert_eq!(cache.get(&key).unwrap(), Some(entry));
        assert_eq!(cache.len().unwrap(), 1);
    }
}
