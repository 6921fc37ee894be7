//! Stage orchestration over an output directory.
//!
//! Every stage reads the artifacts of earlier stages, writes its own, and
//! records an input digest in `manifest.json`. A stage whose inputs have not
//! changed since it last completed is skipped. Model calls go through the
//! gateway journal, so a stage interrupted midway replays finished requests
//! when rerun.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::corpus::{self, CorpusError, CorpusStats, ImageRecord, Manifest};
use crate::digest::{digest_parts_hex, sha256_hex};
use crate::eval::{self, EvalError, EvalParams, MetricsReport, Trial};
use crate::gateway::{ChatBackend, Gateway, GatewayError, HttpBackend, Journal, MockBackend, MockVocabulary};
use crate::refinement::{self, AgreementReport, AuditEntry, ConsensusOutcome, Judgment, RefinementError};
use crate::similarity::{self, EmbeddingCache, EmbeddingProvider, EmbeddingVector, HttpEmbedder, MockEmbedder, SimilarityIndex};
use crate::statements::{self, ConstructParams, Prototype, PrototypeBank, PrototypeFailure, Statement};
use crate::tagging::{self, ImageExtraction, ImageLabels, Quarantined, TagParams, TaggingError};
use crate::taxonomy::{load_parrott, AttachmentMap, Taxonomy, TaxonomyError};

pub const IMAGES: &str = "images.jsonl";
pub const EXTRACTIONS: &str = "extractions.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const ATTACHMENTS: &str = "attachments.tsv";
pub const QUARANTINE: &str = "quarantine.jsonl";
pub const PROTOTYPES: &str = "prototypes.jsonl";
pub const STATEMENTS: &str = "statements.jsonl";
pub const BENCHMARK: &str = "benchmark.jsonl";
pub const RESPONSES: &str = "responses.jsonl";
pub const JUDGMENTS: &str = "judgments.jsonl";
pub const CONSENSUS: &str = "consensus.jsonl";
pub const CURATED: &str = "curated.jsonl";
pub const AUDIT: &str = "audit.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const JOURNAL: &str = "journal/requests.jsonl";
pub const EMBEDDINGS_DIR: &str = "embeddings";

const CONSENSUS_SCHEMA: &str = "insets.consensus/1";
const COUNTED: &[&str] = &[
    IMAGES,
    EXTRACTIONS,
    LABELS,
    QUARANTINE,
    PROTOTYPES,
    STATEMENTS,
    BENCHMARK,
    RESPONSES,
    JUDGMENTS,
    CONSENSUS,
    CURATED,
    AUDIT,
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tagging(#[from] TaggingError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Similarity(#[from] similarity::SimilarityError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Refinement(#[from] RefinementError),
    #[error("{0}")]
    Other(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub status: StageStatus,
    pub summary: String,
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

/// The mock backend as configured for a run.
pub fn mock_backend(cfg: &Config, tax: &Taxonomy) -> MockBackend {
    MockBackend::new(cfg.seed, MockVocabulary::from_taxonomy(tax)).with_policy(cfg.mock_policy.clone())
}

/// A gateway with every configured profile registered. `journal` enables
/// request journaling for resumption.
pub fn gateway_from_config(cfg: &Config, tax: &Taxonomy, journal: Option<&Path>) -> Result<Gateway> {
    let mut gw = Gateway::new().with_backoff(Duration::from_millis(cfg.backoff_ms));
    if let Some(p) = journal {
        let j = Journal::open(p).map_err(|source| CorpusError::Io {
            path: p.to_path_buf(),
            source,
        })?;
        gw = gw.with_journal(j);
    }
    let mock: Arc<dyn ChatBackend> = Arc::new(mock_backend(cfg, tax));
    for profile in cfg.effective_models() {
        let backend: Arc<dyn ChatBackend> = if profile.is_mock() {
            mock.clone()
        } else {
            Arc::new(HttpBackend::for_profile(&profile).map_err(|e| PipelineError::Other(e.to_string()))?)
        };
        gw.register(profile, backend)?;
    }
    Ok(gw)
}

pub struct Pipeline {
    pub cfg: Config,
    pub gateway: Gateway,
    pub taxonomy: Taxonomy,
    out: PathBuf,
}

impl Pipeline {
    /// Gateway built from the config, journaled under the output directory.
    pub fn from_config(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let taxonomy = load_parrott();
        let gateway = gateway_from_config(&cfg, &taxonomy, Some(&cfg.out_dir.join(JOURNAL)))?;
        Ok(Self::with_gateway(cfg, gateway))
    }

    pub fn with_gateway(cfg: Config, gateway: Gateway) -> Self {
        let out = cfg.out_dir.clone();
        Pipeline {
            cfg,
            gateway,
            taxonomy: load_parrott(),
            out,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn manifest(&self) -> Result<Manifest> {
        Ok(Manifest::load(&self.path(MANIFEST))?.unwrap_or_else(|| Manifest::new(self.cfg.seed, &self.cfg.digest())))
    }

    fn finish(&self, mut m: Manifest, stage: Option<(&str, &str)>) -> Result<()> {
        m.seed = self.cfg.seed;
        m.config_digest = self.cfg.digest();
        if let Some((s, d)) = stage {
            m.mark_complete(s, d);
        }
        m.recount(&self.out, COUNTED)?;
        m.save(&self.path(MANIFEST))?;
        Ok(())
    }

    /// A stage is skipped only when its inputs are unchanged and every
    /// output it wrote is still present.
    fn fresh(&self, m: &Manifest, stage: &str, digest: &str, outputs: &[&str]) -> bool {
        m.is_complete(stage, digest) && outputs.iter().all(|o| self.path(o).exists())
    }

    fn input_digest(&self, files: &[&str], extra: &[&str]) -> Result<String> {
        let mut parts = vec![self.cfg.digest()];
        for f in files {
            let p = self.path(f);
            parts.push(if p.exists() { file_digest(&p)? } else { String::new() });
        }
        parts.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&[u8]> = parts.iter().map(|s| s.as_bytes()).collect();
        Ok(digest_parts_hex(&refs))
    }

    fn images(&self) -> Result<Vec<ImageRecord>> {
        Ok(corpus::require_jsonl(&self.path(IMAGES), corpus::IMAGES_SCHEMA, "ingest")?)
    }

    pub fn ingest(&self, corpus_dir: Option<&Path>) -> Result<StageOutcome> {
        std::fs::create_dir_all(&self.out).map_err(|source| CorpusError::Io {
            path: self.out.clone(),
            source,
        })?;
        let dir = corpus_dir.unwrap_or(&self.cfg.corpus_dir);
        let existing: Vec<ImageRecord> = if self.path(IMAGES).exists() {
            self.images()?
        } else {
            Vec::new()
        };
        let report = corpus::ingest(dir, &existing)?;
        let added = report.records.len() - existing.len();
        let status = if added == 0 && self.path(IMAGES).exists() {
            StageStatus::UpToDate
        } else {
            corpus::write_jsonl(&self.path(IMAGES), corpus::IMAGES_SCHEMA, &report.records)?;
            StageStatus::Ran
        };
        self.finish(self.manifest()?, None)?;
        Ok(StageOutcome {
            stage: "ingest",
            status,
            summary: format!(
                "{} images ({} new, {} duplicates, {} skipped)",
                report.records.len(),
                added,
                report.duplicates,
                report.skipped.len()
            ),
        })
    }

    fn overrides(&self) -> Result<(AttachmentMap, String)> {
        match &self.cfg.tagging.overrides {
            None => Ok((AttachmentMap::default(), String::new())),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| CorpusError::Io {
                    path: p.clone(),
                    source,
                })?;
                let map = AttachmentMap::parse_overrides(&text)
                    .map_err(|e| PipelineError::Other(format!("{}: {e}", p.display())))?;
                Ok((map, sha256_hex(text.as_bytes())))
            }
        }
    }

    pub fn tag(&self) -> Result<StageOutcome> {
        let images = self.images()?;
        let (overrides, override_digest) = self.overrides()?;
        let digest = self.input_digest(&[IMAGES], &[&override_digest])?;
        let manifest = self.manifest()?;
        if self.fresh(&manifest, "tag", &digest, &[EXTRACTIONS, LABELS, ATTACHMENTS]) {
            return Ok(up_to_date("tag"));
        }
        let params = TagParams {
            generators: self.cfg.tagging.generators.clone(),
            judge: self.cfg.tagging.judge.clone(),
            vote: self.cfg.vote_params(),
        };
        let out = tagging::tag_corpus(&images, &self.gateway, &self.taxonomy, &overrides, &params)?;
        corpus::write_jsonl(&self.path(EXTRACTIONS), corpus::EXTRACTIONS_SCHEMA, &out.extractions)?;
        corpus::write_jsonl(&self.path(LABELS), corpus::LABELS_SCHEMA, &out.labels)?;
        write_text(&self.path(ATTACHMENTS), &out.attachments.to_tsv())?;
        self.replace_quarantine("tag", &out.quarantined)?;
        let n_labels: usize = out.labels.iter().map(|l| l.labels.len()).sum();
        self.finish(manifest, Some(("tag", &digest)))?;
        Ok(StageOutcome {
            stage: "tag",
            status: StageStatus::Ran,
            summary: format!(
                "{} images labeled ({} labels, {} pooled terms kept of {}), {} quarantined",
                out.labels.len(),
                n_labels,
                out.filter.kept.len(),
                out.filter.kept.len() + out.filter.dropped.len() + out.filter.unparseable.len(),
                out.quarantined.len()
            ),
        })
    }

    fn replace_quarantine(&self, stage: &str, new: &[Quarantined]) -> Result<()> {
        let path = self.path(QUARANTINE);
        let mut all: Vec<Quarantined> = if path.exists() {
            corpus::read_jsonl(&path, corpus::QUARANTINE_SCHEMA)?
        } else {
            Vec::new()
        };
        all.retain(|q| q.stage != stage);
        all.extend_from_slice(new);
        corpus::write_jsonl(&path, corpus::QUARANTINE_SCHEMA, &all)?;
        Ok(())
    }

    /// The open-vocabulary taxonomy stored by the `tag` stage.
    pub fn pom(&self) -> Result<Taxonomy> {
        let path = self.path(ATTACHMENTS);
        if !path.exists() {
            return Err(CorpusError::MissingArtifact {
                path,
                stage: "tag".into(),
            }
            .into());
        }
        let text = std::fs::read_to_string(&path).map_err(|source| CorpusError::Io { path: path.clone(), source })?;
        let map = AttachmentMap::parse_overrides(&text).map_err(|e| PipelineError::Other(format!("{}: {e}", path.display())))?;
        Ok(self.taxonomy.extend(&map)?)
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingProvider>> {
        let e = &self.cfg.embedding;
        if e.is_mock() || self.cfg.mock {
            Ok(Box::new(MockEmbedder::new(self.cfg.seed)))
        } else {
            Ok(Box::new(HttpEmbedder::new(
                &e.endpoint,
                &e.model,
                e.api_key_env.as_deref(),
                Duration::from_secs(e.timeout_secs),
            )?))
        }
    }

    pub fn construct(&self) -> Result<StageOutcome> {
        let images = self.images()?;
        let labels: Vec<ImageLabels> = corpus::require_jsonl(&self.path(LABELS), corpus::LABELS_SCHEMA, "tag")?;
        let digest = self.input_digest(&[IMAGES, LABELS, ATTACHMENTS], &[])?;
        let manifest = self.manifest()?;
        if self.fresh(&manifest, "construct", &digest, &[PROTOTYPES, STATEMENTS]) {
            return Ok(up_to_date("construct"));
        }
        let pom = self.pom()?;
        let by_id: HashMap<&str, &ImageRecord> = images.iter().map(|r| (r.image_id.as_str(), r)).collect();

        // prototypes, one work item per (image, label)
        let work: Vec<(&ImageLabels, usize)> = labels
            .iter()
            .flat_map(|l| (0..l.labels.len()).map(move |i| (l, i)))
            .collect();
        let generated: Vec<(Vec<Prototype>, Vec<PrototypeFailure>)> = work
            .par_iter()
            .map(|(l, i)| {
                let label = &l.labels[*i];
                let payload = by_id
                    .get(l.image_id.as_str())
                    .ok_or_else(|| format!("image {} missing from {IMAGES}", l.image_id))
                    .and_then(|r| r.load_payload().map_err(|e| e.to_string()));
                match payload {
                    Ok(p) => statements::generate_prototypes(&self.gateway, &l.image_id, &p, label),
                    Err(reason) => (
                        Vec::new(),
                        statements::PrototypeKind::ALL
                            .into_iter()
                            .map(|kind| PrototypeFailure {
                                image_id: l.image_id.clone(),
                                label_term: label.term.clone(),
                                kind,
                                reason: reason.clone(),
                            })
                            .collect(),
                    ),
                }
            })
            .collect();
        let mut prototypes = Vec::new();
        let mut quarantine = Vec::new();
        for (ok, failed) in generated {
            prototypes.extend(ok);
            quarantine.extend(failed.into_iter().map(|f| Quarantined {
                image_id: f.image_id,
                stage: "construct".into(),
                reason: format!("{:?} prototype for `{}`: {}", f.kind, f.label_term, f.reason),
            }));
        }

        // embeddings for labeled images
        let provider = self.embedder()?;
        let cache = EmbeddingCache::open(self.path(EMBEDDINGS_DIR), &provider.id())?;
        let embedded: Vec<std::result::Result<EmbeddingVector, (String, String)>> = labels
            .par_iter()
            .filter(|l| !l.labels.is_empty())
            .map(|l| {
                let rec = by_id
                    .get(l.image_id.as_str())
                    .ok_or_else(|| (l.image_id.clone(), "missing image record".to_string()))?;
                let payload = rec.load_payload().map_err(|e| (l.image_id.clone(), e.to_string()))?;
                similarity::embed(&l.image_id, &payload, provider.as_ref(), Some(&cache))
                    .map(|(v, _)| v)
                    .map_err(|e| (l.image_id.clone(), e.to_string()))
            })
            .collect();
        let mut vectors = Vec::new();
        for e in embedded {
            match e {
                Ok(v) => vectors.push(v),
                Err((image_id, reason)) => quarantine.push(Quarantined {
                    image_id,
                    stage: "construct".into(),
                    reason: format!("embedding: {reason}"),
                }),
            }
        }
        let index = SimilarityIndex::build(&vectors, &labels)?;
        let bank = PrototypeBank::new(prototypes.iter().cloned());
        let params = ConstructParams {
            seed: self.cfg.seed,
            incorrect_per_label: self.cfg.construct.incorrect_per_label,
        };
        let built = statements::construct_corpus(&labels, &bank, Some(&index), &pom, &params);

        corpus::write_jsonl(&self.path(PROTOTYPES), corpus::PROTOTYPES_SCHEMA, &prototypes)?;
        corpus::write_jsonl(&self.path(STATEMENTS), corpus::STATEMENTS_SCHEMA, &built)?;
        self.replace_quarantine("construct", &quarantine)?;
        self.finish(manifest, Some(("construct", &digest)))?;
        Ok(StageOutcome {
            stage: "construct",
            status: StageStatus::Ran,
            summary: format!(
                "{} statements from {} prototypes over {} images",
                built.len(),
                prototypes.len(),
                labels.len()
            ),
        })
    }

    pub fn statements(&self) -> Result<Vec<Statement>> {
        Ok(corpus::require_jsonl(&self.path(STATEMENTS), corpus::STATEMENTS_SCHEMA, "construct")?)
    }

    pub fn sample(&self, size: Option<usize>) -> Result<StageOutcome> {
        let n = size.unwrap_or(self.cfg.sample.size);
        let statements = self.statements()?;
        let digest = self.input_digest(&[STATEMENTS], &[&n.to_string()])?;
        let manifest = self.manifest()?;
        if self.fresh(&manifest, "sample", &digest, &[BENCHMARK]) {
            return Ok(up_to_date("sample"));
        }
        let s = corpus::sample_benchmark(&statements, n, self.cfg.seed);
        corpus::write_jsonl(&self.path(BENCHMARK), corpus::STATEMENTS_SCHEMA, &s.statements)?;
        self.finish(manifest, Some(("sample", &digest)))?;
        let short: usize = s.shortfall.values().sum();
        Ok(StageOutcome {
            stage: "sample",
            status: StageStatus::Ran,
            summary: if short == 0 {
                format!("{} of {} statements sampled", s.statements.len(), statements.len())
            } else {
                format!(
                    "{} statements sampled, {short} short of {n} under the one-per-image rule",
                    s.statements.len()
                )
            },
        })
    }

    /// The statements `evaluate` scores: the curated benchmark when present
    /// and preferred, else the sample.
    pub fn evaluation_set(&self) -> Result<(Vec<Statement>, &'static str)> {
        if self.cfg.eval.prefer_curated && self.path(CURATED).exists() {
            return Ok((corpus::read_jsonl(&self.path(CURATED), corpus::STATEMENTS_SCHEMA)?, CURATED));
        }
        Ok((
            corpus::require_jsonl(&self.path(BENCHMARK), corpus::STATEMENTS_SCHEMA, "sample")?,
            BENCHMARK,
        ))
    }

    pub fn responses(&self) -> Result<Vec<Trial>> {
        let p = self.path(RESPONSES);
        if !p.exists() {
            return Ok(Vec::new());
        }
        Ok(corpus::read_jsonl(&p, corpus::RESPONSES_SCHEMA)?)
    }

    /// Runs the harness for `model`, replacing its earlier trials in
    /// `responses.jsonl`.
    pub fn evaluate(&self, model: &str) -> Result<MetricsReport> {
        if self.gateway.profile(model).is_none() {
            return Err(GatewayError::UnknownProfile(model.to_string()).into());
        }
        let (bench, _) = self.evaluation_set()?;
        let images: HashMap<String, ImageRecord> = self
            .images()?
            .into_iter()
            .map(|r| (r.image_id.clone(), r))
            .collect();
        let params = EvalParams {
            temperature: self.cfg.eval.temperature,
        };
        let trials = eval::evaluate(model, &bench, &images, &self.gateway, &params);
        let mut all = self.responses()?;
        all.retain(|t| t.model != model);
        all.extend(trials.iter().cloned());
        all.sort_by(|a, b| a.model.cmp(&b.model).then_with(|| a.statement_id.cmp(&b.statement_id)));
        corpus::write_jsonl(&self.path(RESPONSES), corpus::RESPONSES_SCHEMA, &all)?;
        self.finish(self.manifest()?, None)?;
        Ok(eval::metrics(model, &trials)?)
    }

    /// Metrics for every model in `responses.jsonl`.
    pub fn report(&self) -> Result<Vec<MetricsReport>> {
        let mut by: BTreeMap<String, Vec<Trial>> = BTreeMap::new();
        for t in self.responses()? {
            by.entry(t.model.clone()).or_default().push(t);
        }
        if by.is_empty() {
            return Err(CorpusError::MissingArtifact {
                path: self.path(RESPONSES),
                stage: "evaluate".into(),
            }
            .into());
        }
        by.iter()
            .map(|(m, ts)| eval::metrics(m, ts).map_err(Into::into))
            .collect()
    }

    pub fn judgments(&self) -> Result<Vec<Judgment>> {
        Ok(corpus::require_jsonl(&self.path(JUDGMENTS), corpus::JUDGMENTS_SCHEMA, "serve")?)
    }

    fn sampled(&self) -> Result<Vec<Statement>> {
        Ok(corpus::require_jsonl(&self.path(BENCHMARK), corpus::STATEMENTS_SCHEMA, "sample")?)
    }

    /// Consensus outcomes and the agreement report over collected judgments.
    pub fn consensus(&self, dimension: Option<statements::Dimension>) -> Result<(AgreementReport, Vec<ConsensusOutcome>, usize)> {
        let judgments = self.judgments()?;
        let bench = self.sampled()?;
        let (done, pending) = refinement::outcomes(&judgments)?;
        let report = refinement::agreement_report(&judgments, &bench, dimension)?;
        corpus::write_jsonl(&self.path(CONSENSUS), CONSENSUS_SCHEMA, &done)?;
        self.finish(self.manifest()?, None)?;
        Ok((report, done, pending.len()))
    }

    pub fn curate(&self) -> Result<StageOutcome> {
        let digest = self.input_digest(&[BENCHMARK, JUDGMENTS], &[])?;
        let manifest = self.manifest()?;
        if self.fresh(&manifest, "curate", &digest, &[CURATED]) {
            return Ok(up_to_date("curate"));
        }
        let judgments = self.judgments()?;
        let bench = self.sampled()?;
        let (done, pending) = refinement::outcomes(&judgments)?;
        let curated = refinement::curate(&bench, &done);
        corpus::write_jsonl(&self.path(CURATED), corpus::STATEMENTS_SCHEMA, &curated.benchmark)?;
        corpus::write_jsonl::<AuditEntry>(&self.path(AUDIT), corpus::AUDIT_SCHEMA, &curated.audit)?;
        self.finish(manifest, Some(("curate", &digest)))?;
        let flipped = curated.benchmark.iter().filter(|s| s.rectified).count();
        Ok(StageOutcome {
            stage: "curate",
            status: StageStatus::Ran,
            summary: format!(
                "{} kept ({} rectified), {} dropped, {} pending",
                curated.benchmark.len(),
                flipped,
                bench.len() - curated.benchmark.len() - pending.len(),
                pending.len()
            ),
        })
    }

    pub fn stats(&self) -> Result<CorpusStats> {
        let labels: Vec<ImageLabels> = corpus::require_jsonl(&self.path(LABELS), corpus::LABELS_SCHEMA, "tag")?;
        let statements = if self.path(STATEMENTS).exists() {
            self.statements()?
        } else {
            Vec::new()
        };
        Ok(corpus::stats(&labels, &statements))
    }

    pub fn extractions(&self) -> Result<Vec<ImageExtraction>> {
        Ok(corpus::require_jsonl(&self.path(EXTRACTIONS), corpus::EXTRACTIONS_SCHEMA, "tag")?)
    }

    /// Artifact files whose manifest count disagrees with the disk.
    pub fn verify_manifest(&self) -> Result<Vec<String>> {
        Ok(self.manifest()?.mismatches(&self.out)?)
    }
}

fn up_to_date(stage: &'static str) -> StageOutcome {
    StageOutcome {
        stage,
        status: StageStatus::UpToDate,
        summary: "inputs unchanged; nothing to do".into(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|source| CorpusError::Io { path: tmp.clone(), source })?;
    std::fs::rename(&tmp, path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Pretty JSON for reports.
pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}
