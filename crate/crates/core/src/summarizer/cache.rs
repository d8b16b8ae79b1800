use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SummaryResult;
use crate::error::{IoContext, Result};

/// Hex SHA-256 over the length-prefixed key fields.
pub fn cache_key(case_id: &str, budget: usize, model_id: &str, prompt_hash: &str) -> String {
    let mut h = Sha256::new();
    for field in [case_id, &budget.to_string(), model_id, prompt_hash] {
        h.update((field.len() as u64).to_le_bytes());
        h.update(field.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Serialize, Deserialize)]
struct Line {
    key: String,
    result: SummaryResult,
}

/// Append-only JSONL key → summary table. Reads are concurrent; writes are
/// serialized and flushed one line at a time, so an interrupted run loses
/// at most the line being written.
#[derive(Debug, Default)]
pub struct SummaryCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, SummaryResult>>,
    writer: Mutex<Option<File>>,
}

impl SummaryCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let file = File::open(path).at(path)?;
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.at(path)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<Line>(&line) {
                    Ok(l) => {
                        entries.insert(l.key, l.result);
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
                }
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).at(dir)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
        // Terminate a torn final line so the next append starts cleanly.
        let bytes = fs::read(path).at(path)?;
        if bytes.last().is_some_and(|b| *b != b'\n') {
            file.write_all(b"\n").at(path)?;
        }
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<SummaryResult> {
        self.entries.read().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: &str, result: &SummaryResult) -> Result<()> {
        let mut stored = result.clone();
        stored.cached = false;
        let mut writer = self.writer.lock().expect("cache writer lock");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_vec(&Line {
                key: key.to_owned(),
                result: stored.clone(),
            })?;
            line.push(b'\n');
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            file.write_all(&line).at(path)?;
            file.flush().at(path)?;
        }
        self.entries
            .write()
            .expect("cache lock")
            .insert(key.to_owned(), stored);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(case: &str) -> SummaryResult {
        SummaryResult {
            case_id: case.into(),
            summary: "Lobular carcinoma.".into(),
            measured_tokens: 3,
            attempts: 2,
            model_id: "mock".into(),
            cached: false,
            truncated: false,
        }
    }

    #[test]
    fn key_depends_on_every_field() {
        let base = cache_key("c", 35, "m", "h");
        assert_ne!(base, cache_key("c2", 35, "m", "h"));
        assert_ne!(base, cache_key("c", 50, "m", "h"));
        assert_ne!(base, cache_key("c", 35, "m2", "h"));
        assert_ne!(base, cache_key("c", 35, "m", "h2"));
        // Length prefixes keep field boundaries unambiguous.
        assert_ne!(cache_key("ab", 1, "c", "d"), cache_key("a", 1, "bc", "d"));
        assert_eq!(base.len(), 64);
    }

    #[test]
    fn persists_across_reopen_and_skips_torn_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/cache.jsonl");
        {
            let cache = SummaryCache::open(&path).unwrap();
            cache.put("k1", &result("a")).unwrap();
            cache.put("k2", &result("b")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"k3\",\"res").unwrap();
        let cache = SummaryCache::open(&path).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get("k2").unwrap().case_id, "b");
        assert!(cache.get("k3").is_none());
        cache.put("k4", &result("d")).unwrap();
        drop(cache);
        assert_eq!(SummaryCache::open(&path).unwrap().get("k4").unwrap().case_id, "d");
    }
}
