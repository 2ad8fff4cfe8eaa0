use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub temperature: f32,
    pub prompt: String,
    pub response: String,
    /// Unix seconds at insertion.
    pub timestamp: u64,
}

/// SHA-256 hex of `(model, temperature, prompt)`.
pub fn cache_key(model: &str, temperature: f32, prompt: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(temperature.to_bits().to_le_bytes());
    h.update([0u8]);
    h.update(prompt.as_bytes());
    hex::encode(h.finalize())
}

/// Response cache, optionally backed by an append-only JSONL file. Later
/// lines win when a key repeats.
#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    entries: HashMap<String, CacheEntry>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self, LlmError> {
        let mut entries = HashMap::new();
        if path.exists() {
            for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let e: CacheEntry = serde_json::from_str(line).map_err(|err| {
                    LlmError::Cache(format!("{}:{}: {err}", path.display(), n + 1))
                })?;
                entries.insert(e.key.clone(), e);
            }
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A key match counts only when the stored request is identical.
    pub fn get(&self, model: &str, temperature: f32, prompt: &str) -> Option<&str> {
        self.entries
            .get(&cache_key(model, temperature, prompt))
            .filter(|e| e.model == model && e.temperature.to_bits() == temperature.to_bits() && e.prompt == prompt)
            .map(|e| e.response.as_str())
    }

    pub fn insert(&mut self, model: &str, temperature: f32, prompt: &str, response: &str) -> Result<(), LlmError> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let entry = CacheEntry {
            key: cache_key(model, temperature, prompt),
            model: model.to_string(),
            temperature,
            prompt: prompt.to_string(),
            response: response.to_string(),
            timestamp,
        };
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        self.entries.insert(entry.key.clone(), entry);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_is_sha256_hex_and_input_sensitive() {
        let k = cache_key("m", 0.0, "p");
        assert_eq!(k.len(), 64);
        assert!(k.chars().all(|c| c.is_ascii_hexdigit()));
        assert_ne!(k, cache_key("m", 0.7, "p"));
        assert_ne!(k, cache_key("m2", 0.0, "p"));
        assert_ne!(k, cache_key("m", 0.0, "q"));
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/cache.jsonl");
        let mut c = ResponseCache::open(&path).unwrap();
        c.insert("m", 0.0, "hello", "world").unwrap();
        c.insert("m", 0.0, "hello", "again").unwrap();
        let back = ResponseCache::open(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.get("m", 0.0, "hello"), Some("again"));
        assert_eq!(back.get("m", 0.0, "other"), None);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 2);
    }
}
