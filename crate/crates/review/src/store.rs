//! Append-only judgment log with an in-memory index.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use insets_core::corpus::{from_schema_line, to_schema_line, JUDGMENTS_SCHEMA};
use insets_core::Judgment;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: line {line} is not a judgment", path.display())]
    Corrupt { path: PathBuf, line: usize },
    #[error("annotator {annotator_id} already judged {statement_id}")]
    Duplicate { statement_id: String, annotator_id: String },
}

pub struct JudgmentStore {
    path: PathBuf,
    file: File,
    judgments: Vec<Judgment>,
    seen: BTreeSet<(String, String)>,
    per_statement: BTreeMap<String, usize>,
}

impl JudgmentStore {
    /// Opens (or creates) the log. A torn final line left by a crash is cut
    /// off; any other unreadable line is an error.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let mut judgments = Vec::new();
        let mut good_len = 0u64;
        let mut torn = false;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            let mut n = 0;
            loop {
                line.clear();
                let read = reader.read_line(&mut line).map_err(io_err)?;
                if read == 0 {
                    break;
                }
                n += 1;
                let complete = line.ends_with('\n');
                if line.trim().is_empty() {
                    good_len += read as u64;
                    continue;
                }
                match from_schema_line::<Judgment>(line.trim_end(), JUDGMENTS_SCHEMA) {
                    Ok(j) if complete => {
                        judgments.push(j);
                        good_len += read as u64;
                    }
                    _ if !complete => {
                        torn = true;
                        break;
                    }
                    _ => {
                        return Err(StoreError::Corrupt {
                            path: path.to_path_buf(),
                            line: n,
                        })
                    }
                }
            }
        }
        if torn {
            log::warn!("{}: dropping torn final line", path.display());
            file.set_len(good_len).map_err(io_err)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }
        let mut store = JudgmentStore {
            path: path.to_path_buf(),
            file,
            judgments: Vec::new(),
            seen: BTreeSet::new(),
            per_statement: BTreeMap::new(),
        };
        for j in judgments {
            store.index(j);
        }
        Ok(store)
    }

    fn index(&mut self, j: Judgment) {
        self.seen.insert((j.statement_id.clone(), j.annotator_id.clone()));
        *self.per_statement.entry(j.statement_id.clone()).or_default() += 1;
        self.judgments.push(j);
    }

    pub fn has(&self, statement_id: &str, annotator_id: &str) -> bool {
        self.seen.contains(&(statement_id.to_string(), annotator_id.to_string()))
    }

    pub fn count(&self, statement_id: &str) -> usize {
        self.per_statement.get(statement_id).copied().unwrap_or(0)
    }

    pub fn judgments(&self) -> &[Judgment] {
        &self.judgments
    }

    /// Appends and syncs the record, then indexes it. Returns only once the
    /// line is on disk.
    pub fn append(&mut self, j: Judgment) -> Result<(), StoreError> {
        if self.has(&j.statement_id, &j.annotator_id) {
            return Err(StoreError::Duplicate {
                statement_id: j.statement_id,
                annotator_id: j.annotator_id,
            });
        }
        let mut line = to_schema_line(JUDGMENTS_SCHEMA, &j).expect("judgments serialize");
        line.push('\n');
        let io_err = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(line.as_bytes()).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)?;
        self.index(j);
        Ok(())
    }
}
