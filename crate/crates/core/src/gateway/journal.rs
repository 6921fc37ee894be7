use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub(crate) const SCHEMA: &str = "insets.journal/1";

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// One completed exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub schema: String,
    pub digest: String,
    pub profile: String,
    pub attempt: u32,
    #[serde(default)]
    pub image_digest: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub text: String,
    pub latency_ms: u64,
    pub started_at_ms: u64,
    pub finished_at_ms: u64,
}

/// Append-only JSONL run log, indexed by request digest.
///
/// A torn final line (a crash mid-write) is cut off when the journal is
/// reopened, so later appends always start on a fresh line.
pub struct Journal {
    path: PathBuf,
    cache: RwLock<HashMap<String, JournalRecord>>,
    writer: Mutex<File>,
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)?;
        let mut cache = HashMap::new();
        let mut buf = Vec::new();
        file.read_to_end(&mut buf)?;
        let keep = match buf.iter().rposition(|&b| b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if keep < buf.len() {
            log::warn!(
                "journal {}: dropping torn trailing record ({} bytes)",
                path.display(),
                buf.len() - keep
            );
            file.set_len(keep as u64)?;
        }
        for line in BufReader::new(&buf[..keep]).lines() {
            let line = line?;
            match serde_json::from_str::<JournalRecord>(&line) {
                Ok(rec) => {
                    cache.insert(rec.digest.clone(), rec);
                }
                Err(e) => log::warn!("journal {}: skipping bad record: {e}", path.display()),
            }
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Journal {
            path,
            cache: RwLock::new(cache),
            writer: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn lookup(&self, digest: &str) -> Option<JournalRecord> {
        self.cache.read().unwrap().get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&self, record: &JournalRecord) -> io::Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes())?;
            w.flush()?;
        }
        self.cache
            .write()
            .unwrap()
            .insert(record.digest.clone(), record.clone());
        Ok(())
    }
}
