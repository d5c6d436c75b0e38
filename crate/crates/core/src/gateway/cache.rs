use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_digest: String,
    pub model_id: String,
    pub text: String,
    pub latency_ms: u64,
    pub timestamp_ms: u64,
}

/// Content-addressed response store. On disk each entry lives at
/// `<dir>/<first two hex chars>/<digest>.json`; writes go through a
/// temporary file and a rename so readers never see partial entries.
#[derive(Debug)]
pub enum ResponseCache {
    Memory(Mutex<HashMap<String, CacheEntry>>),
    Disk(PathBuf),
    Disabled,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache::Memory(Mutex::new(HashMap::new()))
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        ResponseCache::Disk(dir.into())
    }

    fn entry_path(dir: &Path, digest: &str) -> PathBuf {
        dir.join(&digest[..2.min(digest.len())]).join(format!("{digest}.json"))
    }

    pub fn get(&self, digest: &str) -> Option<CacheEntry> {
        match self {
            ResponseCache::Memory(m) => m.lock().unwrap().get(digest).cloned(),
            ResponseCache::Disk(dir) => {
                let bytes = fs::read(Self::entry_path(dir, digest)).ok()?;
                let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
                (entry.request_digest == digest).then_some(entry)
            }
            ResponseCache::Disabled => None,
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        match self {
            ResponseCache::Memory(m) => {
                m.lock()
                    .unwrap()
                    .insert(entry.request_digest.clone(), entry.clone());
                Ok(())
            }
            ResponseCache::Disk(dir) => {
                let path = Self::entry_path(dir, &entry.request_digest);
                let parent = path.parent().expect("entry path has a parent");
                fs::create_dir_all(parent).map_err(|e| GatewayError::Cache(e.to_string()))?;
                let tmp = parent.join(format!(
                    ".{}.{}.{}.tmp",
                    entry.request_digest,
                    std::process::id(),
                    TMP_COUNTER.fetch_add(1, Ordering::SeqCst)
                ));
                let bytes = serde_json::to_vec_pretty(entry).expect("entry serializes");
                fs::write(&tmp, bytes).map_err(|e| GatewayError::Cache(e.to_string()))?;
                fs::rename(&tmp, &path).map_err(|e| GatewayError::Cache(e.to_string()))
            }
            ResponseCache::Disabled => Ok(()),
        }
    }
}
