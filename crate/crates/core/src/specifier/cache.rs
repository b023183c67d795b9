//! Append-only prompt/response cache.
//!
//! Records are JSON lines in `<dir>/llm_cache.jsonl`. Each record is written
//! with a single `write_all` under a mutex, and incomplete trailing lines are
//! ignored on load, so readers never observe a partial record.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CACHE_FILE: &str = "llm_cache.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub model_id: String,
    pub prompt: String,
    pub response: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Cache key over the model id, prompt text and any attachment bytes.
pub fn cache_key(model_id: &str, prompt: &str, attachments: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for part in [model_id.as_bytes(), prompt.as_bytes()]
        .into_iter()
        .chain(attachments.iter().copied())
    {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct PromptCache {
    path: Option<PathBuf>,
    entries: Mutex<HashMap<String, CacheRecord>>,
    writer: Mutex<Option<File>>,
}

impl PromptCache {
    /// A cache that lives only as long as this value.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for line in reader.split(b'\n') {
                let line = line?;
                if let Ok(record) = serde_json::from_slice::<CacheRecord>(&line) {
                    entries.insert(record.key.clone(), record);
                }
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        // Terminate a torn final line so the next record starts cleanly.
        if fs::metadata(&path)?.len() > 0 && !ends_with_newline(&path)? {
            file.write_all(b"\n")?;
        }
        Ok(Self {
            path: Some(path),
            entries: Mutex::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<CacheRecord> {
        self.entries.lock().expect("cache poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, model_id: &str, prompt: &str, key: String, response: &str) -> std::io::Result<CacheRecord> {
        let record = CacheRecord {
            key,
            model_id: model_id.to_string(),
            prompt: prompt.to_string(),
            response: response.to_string(),
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let mut writer = self.writer.lock().expect("cache poisoned");
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        self.entries
            .lock()
            .expect("cache poisoned")
            .insert(record.key.clone(), record.clone());
        Ok(record)
    }
}

fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    f.seek(SeekFrom::End(-1))?;
    let mut b = [0u8; 1];
    f.read_exact(&mut b)?;
    Ok(b[0] == b'\n')
}
