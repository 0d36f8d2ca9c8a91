//! Content-addressed response cache.
//!
//! The disk backend keeps one file per request, named by the request key and
//! holding the raw response text. Writes go to a unique temporary file that
//! is then renamed into place, so concurrent writers never expose a partial
//! file.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};

/// SHA-256 over model name, prompt and input.
pub fn cache_key(model: &str, prompt: &str, input: &str) -> String {
    crate::sha256_hex(&[model.as_bytes(), prompt.as_bytes(), input.as_bytes()])
}

#[derive(Debug)]
enum Backend {
    Disabled,
    Memory(Mutex<HashMap<String, String>>),
    Disk(PathBuf),
}

#[derive(Debug)]
pub struct ResponseCache {
    backend: Backend,
    hits: AtomicU64,
    misses: AtomicU64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    fn with(backend: Backend) -> Self {
        ResponseCache {
            backend,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn disabled() -> Self {
        Self::with(Backend::Disabled)
    }

    pub fn in_memory() -> Self {
        Self::with(Backend::Memory(Mutex::new(HashMap::new())))
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self::with(Backend::Disk(dir)))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let found = match &self.backend {
            Backend::Disabled => None,
            Backend::Memory(m) => m.lock().unwrap().get(key).cloned(),
            Backend::Disk(dir) => fs::read_to_string(dir.join(key)).ok(),
        };
        match found {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        found
    }

    pub fn put(&self, key: &str, value: &str) -> Result<()> {
        match &self.backend {
            Backend::Disabled => Ok(()),
            Backend::Memory(m) => {
                m.lock().unwrap().insert(key.to_string(), value.to_string());
                Ok(())
            }
            Backend::Disk(dir) => {
                let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
                let tmp = dir.join(format!(".{key}.{}.{n}.tmp", std::process::id()));
                fs::write(&tmp, value).map_err(|e| Error::io(&tmp, e))?;
                let dest = dir.join(key);
                fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
            }
        }
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disk_cache_persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        let k = cache_key("m", "p", "i");
        {
            let c = ResponseCache::on_disk(dir.path()).unwrap();
            assert_eq!(c.get(&k), None);
            c.put(&k, "résumé").unwrap();
        }
        let c = ResponseCache::on_disk(dir.path()).unwrap();
        assert_eq!(c.get(&k).as_deref(), Some("résumé"));
        assert_eq!((c.hits(), c.misses()), (1, 0));
        assert!(fs::read_dir(dir.path())
            .unwrap()
            .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
    }

    #[test]
    fn concurrent_writers() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::on_disk(dir.path()).unwrap();
        std::thread::scope(|s| {
            for t in 0..8 {
                let c = &c;
                s.spawn(move || {
                    for i in 0..20 {
                        let k = cache_key("m", "p", &(i % 5).to_string());
                        c.put(&k, &format!("value-{}", i % 5)).unwrap();
                        let _ = c.get(&k);
                        let _ = t;
                    }
                });
            }
        });
        for i in 0..5 {
            let k = cache_key("m", "p", &i.to_string());
            assert_eq!(c.get(&k).unwrap(), format!("value-{i}"));
        }
    }

    #[test]
    fn key_separates_fields() {
        assert_ne!(cache_key("m", "ab", "c"), cache_key("m", "a", "bc"));
        assert_ne!(cache_key("m1", "p", "i"), cache_key("m2", "p", "i"));
        assert!(ResponseCache::disabled().get("x").is_none());
    }
}
