//! Open-vocabulary emotion tagging.
//!
//! Each generator model analyzes an image and lists the emotions it evokes.
//! The terms of the whole corpus are pooled, screened by a judge model,
//! attached under tertiary categories of the taxonomy, and finally voted per
//! image: secondary categories proposed by enough models receive a label
//! quota that is filled with the most frequently proposed terms.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, ImageRecord};
use crate::digest::rng_for;
use crate::gateway::{ChatRequest, Gateway, GatewayError, ImagePayload, GENERATIVE_TEMPERATURE, JUDGE_TEMPERATURE};
use crate::prompts;
use crate::taxonomy::{
    normalize_term, AttachSource, AttachTarget, AttachmentMap, Level, Polarity, Rejection, Taxonomy,
};

pub const MAX_TERMS: usize = 10;
const MAX_TERM_WORDS: usize = 4;

#[derive(Debug, Error)]
pub enum TaggingError {
    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: CorpusError,
    },
    #[error("image {image_id}: {source}")]
    Gateway {
        image_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("judge failed on `{term}`: {source}")]
    Judge {
        term: String,
        #[source]
        source: GatewayError,
    },
    #[error("no generator profiles configured")]
    NoGenerators,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionMention {
    pub term: String,
    pub model: String,
    pub image_id: String,
}

/// Splits a model's emotion list into normalized terms.
///
/// Pieces are separated by newlines, commas, and semicolons. Each piece loses
/// leading bullets (`-`, `*`, `•`, `1.`, `2)`), anything from the first `:`,
/// and every character other than letters, spaces, hyphens, and apostrophes.
/// Pieces longer than four words are dropped as prose. The result is
/// deduplicated in order and capped at ten terms.
pub fn parse_terms(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in text.split(['\n', ',', ';']) {
        let mut p = piece.trim();
        loop {
            let before = p;
            p = p.trim_start_matches(['-', '*', '•', '·', '#']).trim_start();
            let digits = p.len() - p.trim_start_matches(|c: char| c.is_ascii_digit()).len();
            if digits > 0 {
                let rest = &p[digits..];
                if let Some(r) = rest.strip_prefix(['.', ')']) {
                    p = r.trim_start();
                }
            }
            if p == before {
                break;
            }
        }
        if let Some((head, _)) = p.split_once(':') {
            p = head;
        }
        let cleaned: String = p
            .chars()
            .map(|c| if c == '’' { '\'' } else { c })
            .filter(|c| c.is_alphabetic() || c.is_whitespace() || *c == '-' || *c == '\'')
            .collect();
        let term = normalize_term(cleaned.trim_matches(|c: char| c == '-' || c == '\'' || c.is_whitespace()));
        if term.is_empty() || term.split(' ').count() > MAX_TERM_WORDS {
            continue;
        }
        if !out.contains(&term) {
            out.push(term);
        }
        if out.len() == MAX_TERMS {
            break;
        }
    }
    out
}

pub fn analyze_image(gateway: &Gateway, profile: &str, image: &ImagePayload) -> Result<String, GatewayError> {
    let req = ChatRequest::new(prompts::ANALYZE_PROMPT)
        .with_image(image.clone())
        .with_temperature(GENERATIVE_TEMPERATURE);
    Ok(gateway.complete(profile, &req)?.text)
}

/// Asks `profile` to list the emotions in `analysis`. An empty analysis yields
/// an empty list without a call.
pub fn extract_emotions(gateway: &Gateway, profile: &str, analysis: &str) -> Result<Vec<String>, GatewayError> {
    if analysis.trim().is_empty() {
        return Ok(Vec::new());
    }
    let req = ChatRequest::new(prompts::extract_prompt(analysis)).with_temperature(GENERATIVE_TEMPERATURE);
    Ok(parse_terms(&gateway.complete(profile, &req)?.text))
}

/// Pooled terms with the number of (image, model) mentions of each.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionPool {
    pub counts: BTreeMap<String, usize>,
}

impl EmotionPool {
    pub fn add(&mut self, term: &str) {
        *self.counts.entry(normalize_term(term)).or_default() += 1;
    }

    pub fn from_mentions<'a>(mentions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut pool = EmotionPool::default();
        for m in mentions {
            pool.add(m);
        }
        pool
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.counts.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.counts.contains_key(term)
    }

    fn restricted(&self, keep: &BTreeSet<String>) -> Self {
        EmotionPool {
            counts: self
                .counts
                .iter()
                .filter(|(k, _)| keep.contains(*k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Pulls the value out of a `{"word": "response"}` reply. Straight or curly
/// quotes; the key may be `word` or the term itself.
pub fn parse_judge_reply(text: &str, term: &str) -> Option<String> {
    let norm: String = text
        .chars()
        .map(|c| match c {
            '“' | '”' | '„' | '″' => '"',
            '‘' | '’' => '\'',
            c => c,
        })
        .collect();
    let start = norm.find('{')?;
    let end = norm.rfind('}')?;
    if end <= start {
        return None;
    }
    let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&norm[start..=end]).ok()?;
    let key = obj
        .keys()
        .find(|k| {
            let k = normalize_term(k);
            k == "word" || k == normalize_term(term)
        })
        .cloned()
        .or_else(|| (obj.len() == 1).then(|| obj.keys().next().unwrap().clone()))?;
    let value = obj.get(&key)?.as_str()?;
    let v = normalize_term(value.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()));
    (!v.is_empty()).then_some(v)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: EmotionPool,
    pub dropped: Vec<String>,
    /// Terms whose judgment stayed unparseable after one retry (dropped).
    pub unparseable: Vec<String>,
}

fn judge_once(gateway: &Gateway, judge: &str, prompt: &str, attempt: u64) -> Result<String, GatewayError> {
    let mut req = ChatRequest::new(prompt).with_temperature(JUDGE_TEMPERATURE);
    if attempt > 0 {
        req = req.with_seed(attempt);
    }
    Ok(gateway.complete(judge, &req)?.text)
}

/// Keeps the terms the judge says describe an emotional state.
pub fn filter_pool(pool: &EmotionPool, gateway: &Gateway, judge: &str) -> Result<FilterOutcome, TaggingError> {
    let terms: Vec<&str> = pool.terms().collect();
    let verdicts: Vec<(String, Option<bool>)> = terms
        .par_iter()
        .map(|term| {
            let prompt = prompts::filter_prompt(term);
            for attempt in 0..2 {
                let reply = judge_once(gateway, judge, &prompt, attempt).map_err(|source| TaggingError::Judge {
                    term: term.to_string(),
                    source,
                })?;
                match parse_judge_reply(&reply, term).as_deref() {
                    Some("yes") => return Ok((term.to_string(), Some(true))),
                    Some("no") => return Ok((term.to_string(), Some(false))),
                    _ => log::warn!("filter judge reply for `{term}` unparseable: {reply:?}"),
                }
            }
            Ok((term.to_string(), None))
        })
        .collect::<Result<_, TaggingError>>()?;
    let mut out = FilterOutcome::default();
    let mut keep = BTreeSet::new();
    for (term, verdict) in verdicts {
        match verdict {
            Some(true) => {
                keep.insert(term);
            }
            Some(false) => out.dropped.push(term),
            None => out.unparseable.push(term),
        }
    }
    out.kept = pool.restricted(&keep);
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct AttachOutcome {
    pub map: AttachmentMap,
    /// Terms whose judge answer named no listed category after one retry.
    pub fallbacks: Vec<String>,
    /// Override entries with an invalid target.
    pub rejected: Vec<Rejection>,
}

/// Maps every pooled term to a tertiary category (or not-applicable). Terms
/// that already name a tertiary attach to themselves without a judge call;
/// `overrides` replace judge answers.
pub fn attach_pool(
    pool: &EmotionPool,
    gateway: &Gateway,
    judge: &str,
    tax: &Taxonomy,
    overrides: &AttachmentMap,
) -> Result<AttachOutcome, TaggingError> {
    let categories = tax.tertiary_names();
    let category_set: BTreeSet<&str> = categories.iter().copied().collect();
    let terms: Vec<&str> = pool.terms().collect();
    let answers: Vec<(String, AttachTarget, bool)> = terms
        .par_iter()
        .map(|term| {
            if category_set.contains(term) {
                return Ok((term.to_string(), AttachTarget::Tertiary(term.to_string()), false));
            }
            if overrides.get(term).is_some() {
                return Ok((term.to_string(), AttachTarget::NotApplicable, false));
            }
            let prompt = prompts::attach_prompt(term, &categories);
            for attempt in 0..2 {
                let reply = judge_once(gateway, judge, &prompt, attempt).map_err(|source| TaggingError::Judge {
                    term: term.to_string(),
                    source,
                })?;
                if let Some(answer) = parse_judge_reply(&reply, term) {
                    match AttachTarget::parse(&answer) {
                        AttachTarget::NotApplicable => {
                            return Ok((term.to_string(), AttachTarget::NotApplicable, false))
                        }
                        AttachTarget::Tertiary(t) if category_set.contains(t.as_str()) => {
                            return Ok((term.to_string(), AttachTarget::Tertiary(t), false))
                        }
                        _ => {}
                    }
                }
                log::warn!("attach judge reply for `{term}` outside the category list: {reply:?}");
            }
            Ok((term.to_string(), AttachTarget::NotApplicable, true))
        })
        .collect::<Result<_, TaggingError>>()?;

    let mut out = AttachOutcome::default();
    for (term, target, fallback) in answers {
        out.map.insert(&term, target, AttachSource::ModelJudge);
        if fallback {
            out.fallbacks.push(term);
        }
    }
    let mut valid = overrides.clone();
    out.rejected = valid.retain_valid(tax);
    for r in &out.rejected {
        log::warn!("override `{}` -> `{}` rejected: {}", r.term, r.target, r.reason);
    }
    // overrides only apply to pooled terms
    let pooled: AttachmentMap = {
        let mut m = AttachmentMap::default();
        for (term, a) in valid.iter() {
            if pool.contains(term) {
                m.insert(term, a.target.clone(), AttachSource::ManualOverride);
            }
        }
        m
    };
    out.map.merge_overrides(&pooled);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteParams {
    /// Minimum number of distinct models behind a secondary category.
    pub threshold: usize,
    pub quota_step: usize,
    pub quota_cap: usize,
    pub seed: u64,
}

impl VoteParams {
    /// τ = ⌈models / 2⌉, step 2, cap 2.
    pub fn for_models(models: usize, seed: u64) -> Self {
        VoteParams {
            threshold: models.div_ceil(2).max(1),
            quota_step: 2,
            quota_cap: 2,
            seed,
        }
    }

    pub fn quota(&self, votes: usize) -> usize {
        if votes < self.threshold {
            return 0;
        }
        let step = self.quota_step.max(1);
        self.quota_cap.min(1 + (votes - self.threshold) / step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub term: String,
    pub tertiary: String,
    pub secondary: String,
    pub primary: String,
    pub polarity: Polarity,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub term: String,
    pub proposers: Vec<String>,
    pub mean_position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryVote {
    pub secondary: String,
    pub votes: usize,
    pub quota: usize,
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLabels {
    pub image_id: String,
    pub labels: Vec<Label>,
    pub votes: Vec<CategoryVote>,
    /// Proposed terms with no tertiary ancestor in the taxonomy.
    #[serde(default)]
    pub unplaced: Vec<String>,
}

impl ImageLabels {
    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.term.as_str())
    }

    pub fn tertiaries(&self) -> BTreeSet<&str> {
        self.labels.iter().map(|l| l.tertiary.as_str()).collect()
    }
}

struct Tally {
    proposers: BTreeSet<String>,
    position_sum: usize,
}

/// Quota voting over the terms each model proposed for one image.
///
/// Models are identified by name; the order of `per_model` does not affect
/// the result. A model listing a term twice counts once, at its first
/// position.
pub fn vote_labels(
    image_id: &str,
    per_model: &[(String, Vec<String>)],
    pom: &Taxonomy,
    params: &VoteParams,
) -> ImageLabels {
    if per_model.is_empty() {
        log::warn!("image {image_id}: no model proposals to vote on");
    }
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    let mut unplaced = BTreeSet::new();
    let mut models: Vec<&(String, Vec<String>)> = per_model.iter().collect();
    models.sort_by(|a, b| a.0.cmp(&b.0));
    for (model, terms) in models {
        let mut seen = BTreeSet::new();
        for (pos, raw) in terms.iter().enumerate() {
            let term = normalize_term(raw);
            if !seen.insert(term.clone()) {
                continue;
            }
            if pom.tertiary_of(&term).is_err() {
                unplaced.insert(term);
                continue;
            }
            let t = tallies.entry(term).or_insert_with(|| Tally {
                proposers: BTreeSet::new(),
                position_sum: 0,
            });
            if t.proposers.insert(model.clone()) {
                t.position_sum += pos;
            }
        }
    }

    let mut by_secondary: BTreeMap<String, Vec<(&String, &Tally)>> = BTreeMap::new();
    for (term, tally) in &tallies {
        let sec = pom.secondary_of(term).expect("placed terms have a secondary").to_string();
        by_secondary.entry(sec).or_default().push((term, tally));
    }

    let mut categories: Vec<CategoryVote> = Vec::new();
    let mut labels: Vec<Label> = Vec::new();
    // (secondary, distinct models voting for it, its terms)
    let mut ordered: Vec<(String, usize, Vec<_>)> = by_secondary
        .into_iter()
        .map(|(sec, terms)| {
            let votes = terms
                .iter()
                .flat_map(|(_, t)| t.proposers.iter())
                .collect::<BTreeSet<_>>()
                .len();
            (sec, votes, terms)
        })
        .collect();
    ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    for (sec, votes, mut terms) in ordered {
        terms.sort_by(|(ta, a), (tb, b)| rank_order(ta, a, tb, b));
        let quota = params.quota(votes);
        for (term, tally) in terms.iter().take(quota) {
            let proposers: Vec<&String> = tally.proposers.iter().collect();
            let mut rng = rng_for(params.seed, &["attribution", image_id, term]);
            let model = proposers[rng.random_range(0..proposers.len())].clone();
            labels.push(Label {
                term: (*term).clone(),
                tertiary: pom.tertiary_of(term).unwrap().to_string(),
                secondary: sec.clone(),
                primary: pom.primary_of(term).unwrap().to_string(),
                polarity: pom.polarity_of(term).unwrap(),
                model,
            });
        }
        categories.push(CategoryVote {
            secondary: sec,
            votes,
            quota,
            candidates: terms
                .iter()
                .map(|(term, t)| Candidate {
                    term: (*term).clone(),
                    proposers: t.proposers.iter().cloned().collect(),
                    mean_position: t.position_sum as f64 / t.proposers.len() as f64,
                })
                .collect(),
        });
    }

    ImageLabels {
        image_id: image_id.to_string(),
        labels,
        votes: categories,
        unplaced: unplaced.into_iter().collect(),
    }
}

/// More proposers first, then smaller mean position (compared exactly), then
/// the term itself.
fn rank_order(ta: &str, a: &Tally, tb: &str, b: &Tally) -> Ordering {
    let (na, nb) = (a.proposers.len(), b.proposers.len());
    nb.cmp(&na)
        .then_with(|| (a.position_sum * nb).cmp(&(b.position_sum * na)))
        .then_with(|| ta.cmp(tb))
}

/// Terms one model reported for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageExtraction {
    pub image_id: String,
    pub model: String,
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quarantined {
    pub image_id: String,
    pub stage: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TagParams {
    pub generators: Vec<String>,
    pub judge: String,
    pub vote: VoteParams,
}

pub struct TagOutput {
    pub extractions: Vec<ImageExtraction>,
    pub labels: Vec<ImageLabels>,
    pub attachments: AttachmentMap,
    pub pom: Taxonomy,
    pub filter: FilterOutcome,
    pub attach_fallbacks: Vec<String>,
    pub rejected_overrides: Vec<Rejection>,
    pub quarantined: Vec<Quarantined>,
}

fn extract_for_image(
    gateway: &Gateway,
    generators: &[String],
    image: &ImageRecord,
) -> Result<Vec<ImageExtraction>, TaggingError> {
    let payload = image.load_payload().map_err(|source| TaggingError::Image {
        image_id: image.image_id.clone(),
        source,
    })?;
    generators
        .iter()
        .map(|model| {
            let wrap = |source| TaggingError::Gateway {
                image_id: image.image_id.clone(),
                source,
            };
            let analysis = analyze_image(gateway, model, &payload).map_err(wrap)?;
            let terms = extract_emotions(gateway, model, &analysis).map_err(wrap)?;
            if terms.is_empty() {
                log::warn!("image {}: {model} produced no parseable emotions", image.image_id);
            }
            Ok(ImageExtraction {
                image_id: image.image_id.clone(),
                model: model.clone(),
                terms,
            })
        })
        .collect()
}

/// Full tagging stage over `images`. Per-image failures quarantine the image;
/// judge failures abort the stage.
pub fn tag_corpus(
    images: &[ImageRecord],
    gateway: &Gateway,
    tax: &Taxonomy,
    overrides: &AttachmentMap,
    params: &TagParams,
) -> Result<TagOutput, TaggingError> {
    if params.generators.is_empty() {
        return Err(TaggingError::NoGenerators);
    }
    let results: Vec<Result<Vec<ImageExtraction>, TaggingError>> = images
        .par_iter()
        .map(|img| extract_for_image(gateway, &params.generators, img))
        .collect();

    let mut extractions = Vec::new();
    let mut quarantined = Vec::new();
    for (img, r) in images.iter().zip(results) {
        match r {
            Ok(ex) => extractions.extend(ex),
            Err(e) => {
                log::warn!("quarantining {}: {e}", img.image_id);
                quarantined.push(Quarantined {
                    image_id: img.image_id.clone(),
                    stage: "tag".into(),
                    reason: e.to_string(),
                });
            }
        }
    }

    let pool = EmotionPool::from_mentions(extractions.iter().flat_map(|e| e.terms.iter().map(String::as_str)));
    let filter = filter_pool(&pool, gateway, &params.judge)?;
    let attach = attach_pool(&filter.kept, gateway, &params.judge, tax, overrides)?;
    let pom = match tax.extend(&attach.map) {
        Ok(p) => p,
        Err(e) => unreachable!("attachments are validated before extension: {e}"),
    };

    let usable: BTreeSet<&str> = filter
        .kept
        .terms()
        .filter(|t| matches!(attach.map.get(t).map(|a| &a.target), Some(AttachTarget::Tertiary(_))))
        .collect();

    let mut labels = Vec::new();
    let mut i = 0;
    while i < extractions.len() {
        let image_id = extractions[i].image_id.clone();
        let mut per_model = Vec::new();
        while i < extractions.len() && extractions[i].image_id == image_id {
            let e = &extractions[i];
            let terms: Vec<String> = e.terms.iter().filter(|t| usable.contains(t.as_str())).cloned().collect();
            per_model.push((e.model.clone(), terms));
            i += 1;
        }
        labels.push(vote_labels(&image_id, &per_model, &pom, &params.vote));
    }

    Ok(TagOutput {
        extractions,
        labels,
        attachments: attach.map,
        pom,
        filter,
        attach_fallbacks: attach.fallbacks,
        rejected_overrides: attach.rejected,
        quarantined,
    })
}

/// Rebuilds the open-vocabulary taxonomy from a stored attachment file.
pub fn pom_from_attachments(tax: &Taxonomy, attachments: &AttachmentMap) -> Result<Taxonomy, crate::taxonomy::TaxonomyError> {
    tax.extend(attachments)
}

/// Whether `term` can carry a label: it must resolve at tertiary depth or below.
pub fn is_placeable(pom: &Taxonomy, term: &str) -> bool {
    matches!(pom.level_of(term), Ok(Level::Tertiary | Level::OpenVocab))
}
