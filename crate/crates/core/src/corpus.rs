//! Image registry, JSONL artifacts, run manifest, corpus statistics and
//! benchmark sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{rng_for, sha256_hex};
use crate::gateway::ImagePayload;
use crate::statements::{Dimension, Statement};
use crate::tagging::ImageLabels;

pub const IMAGES_SCHEMA: &str = "insets.images/1";
pub const EXTRACTIONS_SCHEMA: &str = "insets.extractions/1";
pub const LABELS_SCHEMA: &str = "insets.labels/1";
pub const PROTOTYPES_SCHEMA: &str = "insets.prototypes/1";
pub const STATEMENTS_SCHEMA: &str = "insets.statements/1";
pub const RESPONSES_SCHEMA: &str = "insets.responses/1";
pub const JUDGMENTS_SCHEMA: &str = "insets.judgments/1";
pub const QUARANTINE_SCHEMA: &str = "insets.quarantine/1";
pub const AUDIT_SCHEMA: &str = "insets.audit/1";
pub const MANIFEST_SCHEMA: &str = "insets.manifest/1";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}:{line}: schema `{found}`, expected `{expected}`", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        found: String,
        expected: String,
    },
    #[error("{}: empty image file", .0.display())]
    EmptyImage(PathBuf),
    #[error("{}: not a decodable image: {reason}", path.display())]
    Undecodable { path: PathBuf, reason: String },
    #[error("missing artifact {}; run `{stage}` first", path.display())]
    MissingArtifact { path: PathBuf, stage: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub media_type: String,
    pub source: String,
}

impl ImageRecord {
    pub fn load_payload(&self) -> Result<ImagePayload, CorpusError> {
        let bytes = fs::read(&self.path).map_err(io_err(&self.path))?;
        if bytes.is_empty() {
            return Err(CorpusError::EmptyImage(self.path.clone()));
        }
        Ok(ImagePayload::new(self.media_type.clone(), bytes))
    }
}

pub fn image_id_for(bytes: &[u8]) -> String {
    sha256_hex(bytes)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub records: Vec<ImageRecord>,
    pub skipped: Vec<Skipped>,
    pub duplicates: usize,
}

fn describe(path: &Path, bytes: &[u8], root: &Path) -> Result<ImageRecord, String> {
    if bytes.is_empty() {
        return Err("empty file".into());
    }
    let format = image::guess_format(bytes).map_err(|e| e.to_string())?;
    let (width, height) = image::ImageReader::with_format(io::Cursor::new(bytes), format)
        .into_dimensions()
        .map_err(|e| e.to_string())?;
    let source = path
        .parent()
        .and_then(|p| p.strip_prefix(root).ok())
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| {
            root.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });
    Ok(ImageRecord {
        image_id: image_id_for(bytes),
        path: path.to_path_buf(),
        width,
        height,
        media_type: format.to_mime_type().to_string(),
        source,
    })
}

/// Registers every decodable image under `dir`, walking in file-name order.
/// Images already in `existing` keep their records; byte-identical files
/// collapse to the first one seen.
pub fn ingest(dir: &Path, existing: &[ImageRecord]) -> Result<IngestReport, CorpusError> {
    let mut report = IngestReport {
        records: existing.to_vec(),
        ..Default::default()
    };
    let mut seen: BTreeSet<String> = existing.iter().map(|r| r.image_id.clone()).collect();
    if !dir.is_dir() {
        return Err(CorpusError::Io {
            path: dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "corpus directory not found"),
        });
    }
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CorpusError::Io {
            path: dir.to_path_buf(),
            source: e.into(),
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        let bytes = fs::read(path).map_err(io_err(path))?;
        match describe(path, &bytes, dir) {
            Ok(rec) => {
                if seen.insert(rec.image_id.clone()) {
                    report.records.push(rec);
                } else {
                    report.duplicates += 1;
                }
            }
            Err(reason) => {
                log::warn!("skipping {}: {reason}", path.display());
                report.skipped.push(Skipped {
                    path: path.to_path_buf(),
                    reason,
                });
            }
        }
    }
    if report.records.is_empty() {
        log::warn!("no images found under {}", dir.display());
    }
    Ok(report)
}

/// Writes one JSON object per line, each carrying a `schema` field. The file
/// is replaced atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = io::BufWriter::new(file);
        for (i, r) in records.iter().enumerate() {
            let line = to_schema_line(schema, r).map_err(|source| CorpusError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?;
            w.write_all(line.as_bytes()).map_err(io_err(&tmp))?;
            w.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        w.flush().map_err(io_err(&tmp))?;
        w.get_ref().sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn to_schema_line<T: Serialize>(schema: &str, record: &T) -> Result<String, serde_json::Error> {
    let mut v = serde_json::to_value(record)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("schema".into(), schema.into());
    }
    serde_json::to_string(&v)
}

pub fn from_schema_line<T: DeserializeOwned>(line: &str, schema: &str) -> Result<T, Result<serde_json::Error, String>> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(Ok)?;
    let found = v
        .as_object_mut()
        .and_then(|m| m.remove("schema"))
        .and_then(|s| s.as_str().map(str::to_string))
        .unwrap_or_default();
    if found != schema {
        return Err(Err(found));
    }
    serde_json::from_value(v).map_err(Ok)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(from_schema_line(&line, schema).map_err(|e| match e {
            Ok(source) => CorpusError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            },
            Err(found) => CorpusError::Schema {
                path: path.to_path_buf(),
                line: i + 1,
                found,
                expected: schema.to_string(),
            },
        })?);
    }
    Ok(out)
}

/// Reads an artifact that an earlier stage must have produced.
pub fn require_jsonl<T: DeserializeOwned>(path: &Path, schema: &str, stage: &str) -> Result<Vec<T>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingArtifact {
            path: path.to_path_buf(),
            stage: stage.to_string(),
        });
    }
    read_jsonl(path, schema)
}

pub fn count_lines(path: &Path) -> Result<usize, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut n = 0;
    for line in BufReader::new(file).lines() {
        if !line.map_err(io_err(path))?.trim().is_empty() {
            n += 1;
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    /// Digest of the inputs the stage ran on; a change invalidates it.
    pub input_digest: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub seed: u64,
    pub config_digest: String,
    /// Artifact file name → record count.
    pub counts: BTreeMap<String, usize>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn new(seed: u64, config_digest: &str) -> Self {
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            seed,
            config_digest: config_digest.into(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Option<Self>, CorpusError> {
        match fs::read_to_string(path) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|source| CorpusError::Json {
                path: path.to_path_buf(),
                line: 0,
                source,
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&tmp, text + "\n").map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn is_complete(&self, stage: &str, input_digest: &str) -> bool {
        self.stages
            .get(stage)
            .is_some_and(|s| s.completed && s.input_digest == input_digest)
    }

    pub fn mark_complete(&mut self, stage: &str, input_digest: &str) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                completed: true,
                input_digest: input_digest.to_string(),
            },
        );
    }

    /// Refreshes `counts` for `files` from their physical line counts.
    pub fn recount(&mut self, dir: &Path, files: &[&str]) -> Result<(), CorpusError> {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                self.counts.insert(f.to_string(), count_lines(&p)?);
            }
        }
        Ok(())
    }

    /// Files whose recorded count disagrees with the file on disk.
    pub fn mismatches(&self, dir: &Path) -> Result<Vec<String>, CorpusError> {
        let mut bad = Vec::new();
        for (f, &n) in &self.counts {
            let p = dir.join(f);
            let actual = if p.exists() { count_lines(&p)? } else { 0 };
            if actual != n {
                bad.push(f.clone());
            }
        }
        Ok(bad)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub images: usize,
    pub labeled_images: usize,
    pub labels: usize,
    pub labels_per_image: f64,
    pub distinct_labels: usize,
    pub statements: usize,
    pub statements_per_image: f64,
    pub mean_statement_words: f64,
    /// Percent of labels under each primary emotion.
    pub primary_shares: BTreeMap<String, f64>,
    /// Statement counts per dimension as (correct, incorrect).
    pub per_dimension: BTreeMap<Dimension, (usize, usize)>,
}

/// Statistics over `labels` (one record per tagged image) and `statements`.
/// Per-image ratios use the number of tagged images.
pub fn stats(labels: &[ImageLabels], statements: &[Statement]) -> CorpusStats {
    let images = labels.len();
    let n_labels: usize = labels.iter().map(|l| l.labels.len()).sum();
    let distinct: BTreeSet<&str> = labels.iter().flat_map(|l| l.terms()).collect();
    let mut primaries: BTreeMap<String, usize> = BTreeMap::new();
    for l in labels.iter().flat_map(|l| &l.labels) {
        *primaries.entry(l.primary.clone()).or_default() += 1;
    }
    let mut per_dimension: BTreeMap<Dimension, (usize, usize)> = BTreeMap::new();
    for s in statements {
        let e = per_dimension.entry(s.dimension).or_default();
        if s.ground_truth {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    let words: usize = statements.iter().map(Statement::word_count).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    CorpusStats {
        images,
        labeled_images: labels.iter().filter(|l| !l.labels.is_empty()).count(),
        labels: n_labels,
        labels_per_image: ratio(n_labels, images),
        distinct_labels: distinct.len(),
        statements: statements.len(),
        statements_per_image: ratio(statements.len(), images),
        mean_statement_words: ratio(words, statements.len()),
        primary_shares: primaries
            .into_iter()
            .map(|(k, v)| (k, 100.0 * ratio(v, n_labels)))
            .collect(),
        per_dimension,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub dimension: Dimension,
    pub ground_truth: bool,
}

/// Quota per stratum: `n` split evenly over the four dimensions, then over
/// true/false within each. Remainders go to earlier dimensions and to `true`.
pub fn stratum_quotas(n: usize) -> BTreeMap<Stratum, usize> {
    let mut out = BTreeMap::new();
    for (i, d) in Dimension::ALL.into_iter().enumerate() {
        let dq = n / 4 + usize::from(i < n % 4);
        out.insert(
            Stratum {
                dimension: d,
                ground_truth: true,
            },
            dq - dq / 2,
        );
        out.insert(
            Stratum {
                dimension: d,
                ground_truth: false,
            },
            dq / 2,
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct BenchmarkSample {
    /// Selected statements sorted by id.
    pub statements: Vec<Statement>,
    pub requested: usize,
    /// Quota that could not be filled under the one-per-image rule.
    pub shortfall: BTreeMap<Stratum, usize>,
}

/// Stratified seeded sample with at most one statement per image.
///
/// Images are assigned to stratum slots by augmenting paths over a seeded
/// image order, so the sample reaches the largest size the quotas and the
/// one-per-image rule allow.
pub fn sample_benchmark(statements: &[Statement], n: usize, seed: u64) -> BenchmarkSample {
    let quotas = stratum_quotas(n);
    let strata: Vec<Stratum> = quotas.keys().copied().collect();

    // stratum -> image -> candidate statements
    let mut cand: Vec<BTreeMap<&str, Vec<&Statement>>> = vec![BTreeMap::new(); strata.len()];
    for s in statements {
        let k = Stratum {
            dimension: s.dimension,
            ground_truth: s.ground_truth,
        };
        let si = strata.binary_search(&k).expect("every stratum is listed");
        cand[si].entry(s.image_id.as_str()).or_default().push(s);
    }
    let mut images: Vec<&str> = statements.iter().map(|s| s.image_id.as_str()).collect();
    images.sort_unstable();
    images.dedup();
    let mut rng = rng_for(seed, &["sample-order"]);
    images.shuffle(&mut rng);
    let image_index: HashMap<&str, usize> = images.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let adj: Vec<Vec<usize>> = cand
        .iter()
        .map(|m| {
            let mut v: Vec<usize> = m.keys().map(|k| image_index[k]).collect();
            v.sort_unstable();
            v
        })
        .collect();

    let mut owner: Vec<Option<usize>> = vec![None; images.len()];
    fn augment(s: usize, adj: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for &img in &adj[s] {
            if seen[img] {
                continue;
            }
            seen[img] = true;
            if owner[img].is_none() || augment(owner[img].unwrap(), adj, owner, seen) {
                owner[img] = Some(s);
                return true;
            }
        }
        false
    }

    // Strata take one image per round so a scarce corpus spreads its
    // shortfall evenly. Each step is a free image in seeded order or an
    // augmenting path, which keeps the matching maximum.
    let want: Vec<usize> = strata.iter().map(|s| quotas[s]).collect();
    let mut got = vec![0usize; strata.len()];
    let mut stalled = vec![false; strata.len()];
    loop {
        let mut progressed = false;
        for si in 0..strata.len() {
            if stalled[si] || got[si] == want[si] {
                continue;
            }
            if let Some(&img) = adj[si].iter().find(|&&img| owner[img].is_none()) {
                owner[img] = Some(si);
            } else {
                let mut seen = vec![false; images.len()];
                if !augment(si, &adj, &mut owner, &mut seen) {
                    stalled[si] = true;
                    continue;
                }
            }
            got[si] += 1;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    let shortfall: BTreeMap<Stratum, usize> = strata
        .iter()
        .enumerate()
        .filter(|&(si, _)| got[si] < want[si])
        .map(|(si, s)| (*s, want[si] - got[si]))
        .collect();
    if !shortfall.is_empty() {
        let missing: usize = shortfall.values().sum();
        log::warn!("benchmark sample short by {missing} of {n} under the one-statement-per-image rule");
    }

    let mut chosen: Vec<Statement> = Vec::new();
    for (img, o) in owner.iter().enumerate() {
        if let Some(si) = o {
            let id = images[img];
            let options = &cand[*si][id];
            let mut r = rng_for(seed, &["sample-pick", id]);
            chosen.push((*options.choose(&mut r).unwrap()).clone());
        }
    }
    chosen.sort_by(|a, b| a.id.cmp(&b.id));
    BenchmarkSample {
        statements: chosen,
        requested: n,
        shortfall,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotas_split_evenly() {
        let q = stratum_quotas(8);
        assert!(q.values().all(|&v| v == 1));
        let q = stratum_quotas(3164);
        assert_eq!(q.values().sum::<usize>(), 3164);
        let q = stratum_quotas(11);
        let pol_true = q[&Stratum {
            dimension: Dimension::SentimentPolarity,
            ground_truth: true,
        }];
        assert_eq!(pol_true, 2);
        assert_eq!(q.values().sum::<usize>(), 11);
    }

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Row {
        a: u32,
        b: String,
    }

    #[test]
    fn jsonl_round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.jsonl");
        let rows = vec![Row { a: 1, b: "x".into() }, Row { a: 2, b: "y\nz".into() }];
        write_jsonl(&p, "test/1", &rows).unwrap();
        assert_eq!(count_lines(&p).unwrap(), 2);
        let back: Vec<Row> = read_jsonl(&p, "test/1").unwrap();
        assert_eq!(back, rows);
        assert!(matches!(
            read_jsonl::<Row>(&p, "test/2"),
            Err(CorpusError::Schema { line: 1, .. })
        ));
        assert!(matches!(
            require_jsonl::<Row>(&dir.path().join("none.jsonl"), "x", "tag"),
            Err(CorpusError::MissingArtifact { .. })
        ));
    }

    #[test]
    fn manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(&dir.path().join("a.jsonl"), "t", &[1, 2, 3].map(|a| Row { a, b: String::new() })).unwrap();
        let mut m = Manifest::new(1, "cfg");
        m.recount(dir.path(), &["a.jsonl"]).unwrap();
        assert_eq!(m.counts["a.jsonl"], 3);
        assert!(m.mismatches(dir.path()).unwrap().is_empty());
        m.counts.insert("a.jsonl".into(), 4);
        assert_eq!(m.mismatches(dir.path()).unwrap(), ["a.jsonl"]);
        m.mark_complete("tag", "d1");
        assert!(m.is_complete("tag", "d1"));
        assert!(!m.is_complete("tag", "d2"));
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap().unwrap(), m);
    }
}
