//! Deterministic offline backend.
//!
//! Every reply is a pure function of the mock seed, the profile name, the
//! request text, the request seed, and the image digest. Images fall into one
//! of three polarity buckets by digest, so a mock corpus always contains
//! fully-positive, fully-negative, and mixed images with known polarity.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ModelProfile};
use crate::digest::rng_for;
use crate::prompts::{first_slot, PromptKind, DESCRIPTION_HEADER};
use crate::taxonomy::{normalize_term, Level, Polarity, Taxonomy};

/// Open-vocabulary terms the mock emits on top of the tertiary names, with
/// the tertiary the mock judge attaches them to.
const OPEN_VOCAB: &[(&str, &str)] = &[
    ("serenity", "pleasure"),
    ("tranquility", "pleasure"),
    ("peacefulness", "pleasure"),
    ("contentment", "pleasure"),
    ("calmness", "relief"),
    ("awe", "amazement"),
    ("wonder", "astonishment"),
    ("surprise", "astonishment"),
    ("nostalgia", "longing"),
    ("gratitude", "gladness"),
    ("warmth", "tenderness"),
    ("curiosity", "eagerness"),
    ("playfulness", "amusement"),
    ("admiration", "adoration"),
    ("inspiration", "enthusiasm"),
    ("romance", "passion"),
    ("unease", "uneasiness"),
    ("tension", "suspense"),
    ("solitude", "loneliness"),
    ("heartbreak", "grief"),
    ("desolation", "despair"),
    ("disgust", "revulsion"),
    ("irritation", "annoyance"),
    ("nervousness", "anxiety"),
    ("foreboding", "dread"),
    ("mourning", "grief"),
    ("vulnerability", "insecurity"),
    ("helplessness", "despair"),
    ("sadness", "sorrow"),
];

/// Words that are not emotions; the mock filter judge answers "No" for them.
const DISTRACTORS: &[&str] = &["sunset", "composition", "brightness", "mountains", "crowd"];

const CORE_TERMS: usize = 4;
const KEEP_CORE_PERCENT: u32 = 75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityBucket {
    AllPositive,
    AllNegative,
    Mixed,
}

#[derive(Debug, Clone)]
struct MockTerm {
    term: String,
    polarity: Polarity,
    secondary: String,
    tertiary: String,
}

/// Emotion terms the mock draws from, each with its polarity and the tertiary
/// category the mock judge will attach it to.
#[derive(Debug, Clone)]
pub struct MockVocabulary {
    terms: Vec<MockTerm>,
    distractors: Vec<String>,
}

impl MockVocabulary {
    /// All tertiary names of `tax` plus the built-in open-vocabulary list.
    pub fn from_taxonomy(tax: &Taxonomy) -> Self {
        let mut terms = Vec::new();
        for name in tax.names_at(Level::Tertiary) {
            terms.push(MockTerm {
                term: name.to_string(),
                polarity: tax.polarity_of(name).expect("tertiary has polarity"),
                secondary: tax.secondary_of(name).expect("tertiary has parent").to_string(),
                tertiary: name.to_string(),
            });
        }
        for (term, tertiary) in OPEN_VOCAB {
            if tax.resolve(tertiary).map(|id| tax.node(id).level) != Some(Level::Tertiary) {
                continue;
            }
            terms.push(MockTerm {
                term: term.to_string(),
                polarity: tax.polarity_of(tertiary).unwrap(),
                secondary: tax.secondary_of(tertiary).unwrap().to_string(),
                tertiary: tertiary.to_string(),
            });
        }
        MockVocabulary {
            terms,
            distractors: DISTRACTORS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    fn find(&self, term: &str) -> Option<&MockTerm> {
        let t = normalize_term(term);
        self.terms.iter().find(|m| m.term == t)
    }

    pub fn polarity_of(&self, term: &str) -> Option<Polarity> {
        self.find(term).map(|m| m.polarity)
    }

    /// Tertiary the mock judge attaches `term` to; `None` for non-emotions.
    pub fn attachment_of(&self, term: &str) -> Option<&str> {
        self.find(term).map(|m| m.tertiary.as_str())
    }

    fn pool(&self, polarity: Polarity) -> Vec<&MockTerm> {
        self.terms.iter().filter(|m| m.polarity == polarity).collect()
    }
}

/// How the mock answers evaluation (judgment) prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum JudgmentPolicy {
    AlwaysCorrect,
    AlwaysIncorrect,
    AlwaysGiveUp,
    /// Per-request hashed draw: `correct_percent` "Correct", `giveup_percent`
    /// refusals, the rest "Incorrect".
    Mixed { correct_percent: u32, giveup_percent: u32 },
}

impl Default for JudgmentPolicy {
    fn default() -> Self {
        JudgmentPolicy::Mixed {
            correct_percent: 60,
            giveup_percent: 2,
        }
    }
}

#[derive(Clone)]
pub struct MockBackend {
    seed: u64,
    vocabulary: Arc<MockVocabulary>,
    policy: JudgmentPolicy,
}

const INTERPRETATION_OPENINGS: &[&str] = &[
    "The soft interplay of light and shadow across the scene",
    "The expressions and posture of the people in the frame",
    "The muted palette and the wide empty space",
    "The vivid colors and the dynamic composition",
    "The weathered textures and the quiet setting",
    "The close framing of the central subject",
];
const INTERPRETATION_ENDINGS: &[&str] = &[
    "recalls familiar personal moments",
    "draws attention to a fleeting but meaningful detail",
    "invites the viewer to linger on what is shown",
    "suggests a story unfolding just beyond the frame",
];
const CONTEXT_EVENTS: &[&str] = &[
    "After years apart, two old friends finally meet again at a small train station",
    "A family waits for news from a hospital in a distant city",
    "The neighborhood bakery that served the town for decades closes its doors for good",
    "A young athlete returns home after an unexpected win at a regional competition",
    "A storm knocks out the power on the night of a long-planned celebration",
    "An elderly couple revisits the place where they first met",
    "A volunteer team spends the weekend rebuilding a flooded school",
    "A letter arrives for someone who moved away many years ago",
];
const CONTEXT_TAILS: &[&str] = &[
    "Nobody says a word for a long while.",
    "The evening goes on as if nothing happened.",
];
const PROFESSIONS: &[&str] = &[
    "retired schoolteacher",
    "nurse working night shifts",
    "freelance photographer",
    "software engineer",
    "farmer",
    "university student studying history",
    "firefighter",
    "museum curator",
    "taxi driver",
    "marine biologist",
];
const TRAITS: &[&str] = &[
    "who grew up in a small coastal village",
    "who recently moved to a new country",
    "who spends weekends volunteering at an animal shelter",
    "who keeps a detailed diary of every trip",
    "who lost a close friend last year",
    "who is preparing for the birth of a first child",
];

impl MockBackend {
    pub fn new(seed: u64, vocabulary: MockVocabulary) -> Self {
        MockBackend {
            seed,
            vocabulary: Arc::new(vocabulary),
            policy: JudgmentPolicy::default(),
        }
    }

    pub fn with_policy(mut self, policy: JudgmentPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn vocabulary(&self) -> &MockVocabulary {
        &self.vocabulary
    }

    pub fn bucket_for(&self, image_digest: &str) -> PolarityBucket {
        let mut rng = rng_for(self.seed, &["mock-bucket", image_digest]);
        match rng.random_range(0..3) {
            0 => PolarityBucket::AllPositive,
            1 => PolarityBucket::AllNegative,
            _ => PolarityBucket::Mixed,
        }
    }

    fn pick_distinct_secondaries<'a, R: Rng>(
        pool: &[&'a MockTerm],
        n: usize,
        used: &mut BTreeSet<String>,
        rng: &mut R,
    ) -> Vec<&'a MockTerm> {
        let mut shuffled = pool.to_vec();
        shuffled.shuffle(rng);
        let mut out = Vec::new();
        for t in shuffled {
            if out.len() == n {
                break;
            }
            if used.insert(t.secondary.clone()) {
                out.push(t);
            }
        }
        out
    }

    /// Terms shared by every profile for this image.
    fn core_terms(&self, image_digest: &str) -> Vec<&MockTerm> {
        let bucket = self.bucket_for(image_digest);
        let mut rng = rng_for(self.seed, &["mock-core", image_digest]);
        let pos = self.vocabulary.pool(Polarity::Positive);
        let neg = self.vocabulary.pool(Polarity::Negative);
        let mut used = BTreeSet::new();
        match bucket {
            PolarityBucket::AllPositive => Self::pick_distinct_secondaries(&pos, CORE_TERMS, &mut used, &mut rng),
            PolarityBucket::AllNegative => Self::pick_distinct_secondaries(&neg, CORE_TERMS, &mut used, &mut rng),
            PolarityBucket::Mixed => {
                let n_pos = rng.random_range(1..=3);
                let mut v = Self::pick_distinct_secondaries(&pos, n_pos, &mut used, &mut rng);
                v.extend(Self::pick_distinct_secondaries(&neg, CORE_TERMS - n_pos, &mut used, &mut rng));
                v
            }
        }
    }

    /// The emotion terms (and, for mixed images, possibly one distractor word)
    /// this profile reports for the image, in output order.
    pub fn terms_for(&self, profile: &str, image_digest: &str) -> Vec<String> {
        let bucket = self.bucket_for(image_digest);
        let core = self.core_terms(image_digest);
        let mut rng = rng_for(self.seed, &["mock-terms", profile, image_digest]);
        let mut out: Vec<String> = core
            .iter()
            .filter(|_| rng.random_range(0..100) < KEEP_CORE_PERCENT)
            .map(|t| t.term.clone())
            .collect();
        let pool: Vec<&MockTerm> = match bucket {
            PolarityBucket::AllPositive => self.vocabulary.pool(Polarity::Positive),
            PolarityBucket::AllNegative => self.vocabulary.pool(Polarity::Negative),
            PolarityBucket::Mixed => self.vocabulary.terms.iter().collect(),
        };
        let extras = rng.random_range(1..=2);
        let mut added = 0;
        while added < extras || out.len() < 5 {
            let t = pool.choose(&mut rng).expect("non-empty pool");
            if !out.contains(&t.term) {
                out.push(t.term.clone());
                added += 1;
            }
        }
        out.shuffle(&mut rng);
        if bucket == PolarityBucket::Mixed && rng.random_bool(0.5) {
            let d = self.vocabulary.distractors.choose(&mut rng).unwrap().clone();
            let at = rng.random_range(0..=out.len());
            out.insert(at, d);
        }
        out.truncate(10);
        out
    }

    fn analysis_text(&self, profile: &str, image_digest: &str) -> String {
        let terms = self.terms_for(profile, image_digest);
        let mut rng = rng_for(self.seed, &["mock-analysis", profile, image_digest]);
        let opening = INTERPRETATION_OPENINGS.choose(&mut rng).unwrap();
        format!(
            "{opening} shapes the overall mood of this picture. Evoked emotions: {}. These reactions depend partly on the viewer's own experiences.",
            terms.join(", ")
        )
    }

    fn extraction_text(&self, description: &str) -> String {
        let listed: Vec<String> = match description.find("Evoked emotions:") {
            Some(i) => {
                let rest = &description[i + "Evoked emotions:".len()..];
                let end = rest.find('.').unwrap_or(rest.len());
                rest[..end]
                    .split(',')
                    .map(normalize_term)
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            None => {
                let lower = description.to_lowercase();
                let mut hits: Vec<(usize, String)> = self
                    .vocabulary
                    .terms
                    .iter()
                    .filter_map(|t| find_word(&lower, &t.term).map(|p| (p, t.term.clone())))
                    .collect();
                hits.sort();
                hits.into_iter().map(|(_, t)| t).collect()
            }
        };
        listed
            .iter()
            .take(10)
            .enumerate()
            .map(|(i, t)| format!("{}. {}", i + 1, capitalize(t)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn judgment_text(&self, profile: &str, request: &ChatRequest) -> String {
        let draw = || {
            let seed = request.seed.map(|s| s.to_string()).unwrap_or_default();
            let image = request.image_digest().unwrap_or_default();
            rng_for(self.seed, &["mock-judge", profile, &request.user_text, &image, &seed])
                .random_range(0..100u32)
        };
        match &self.policy {
            JudgmentPolicy::AlwaysCorrect => "Correct".into(),
            JudgmentPolicy::AlwaysIncorrect => "Incorrect".into(),
            JudgmentPolicy::AlwaysGiveUp => "I am unable to determine this from the image.".into(),
            JudgmentPolicy::Mixed {
                correct_percent,
                giveup_percent,
            } => {
                let x = draw();
                if x < *giveup_percent {
                    "I am unable to determine this from the image.".into()
                } else if x < giveup_percent + correct_percent {
                    "Correct".into()
                } else {
                    "Incorrect".into()
                }
            }
        }
    }

    fn prototype_text(&self, kind: PromptKind, profile: &str, image: &str, emotion: &str) -> String {
        let mut rng = rng_for(self.seed, &["mock-proto", profile, image, emotion, &format!("{kind:?}")]);
        match kind {
            PromptKind::Interpretation => format!(
                "{} could stir {emotion} in viewers, as it {}.",
                INTERPRETATION_OPENINGS.choose(&mut rng).unwrap(),
                INTERPRETATION_ENDINGS.choose(&mut rng).unwrap()
            ),
            PromptKind::Context => {
                let mut s = format!("{}.", CONTEXT_EVENTS.choose(&mut rng).unwrap());
                if rng.random_range(0..4) == 0 {
                    s.push(' ');
                    s.push_str(CONTEXT_TAILS.choose(&mut rng).unwrap());
                }
                s
            }
            _ => format!(
                "A {}-year-old {} {}.",
                rng.random_range(19..=78),
                PROFESSIONS.choose(&mut rng).unwrap(),
                TRAITS.choose(&mut rng).unwrap()
            ),
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn find_word(haystack: &str, word: &str) -> Option<usize> {
    let mut from = 0;
    while let Some(i) = haystack[from..].find(word) {
        let start = from + i;
        let end = start + word.len();
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..].chars().next().is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return Some(start);
        }
        from = end;
    }
    None
}

impl ChatBackend for MockBackend {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<String, BackendError> {
        let name = profile.name.as_str();
        let image = request.image_digest().unwrap_or_default();
        let text = &request.user_text;
        Ok(match PromptKind::detect(text) {
            PromptKind::Analyze => {
                if image.is_empty() {
                    "No image was provided, so no emotional analysis is possible.".into()
                } else {
                    self.analysis_text(name, &image)
                }
            }
            PromptKind::Extract => {
                let description = text
                    .split_once(DESCRIPTION_HEADER)
                    .map(|(_, d)| d)
                    .unwrap_or("");
                self.extraction_text(description)
            }
            PromptKind::Filter => {
                let word = first_slot(text).unwrap_or("");
                let verdict = if self.vocabulary.find(word).is_some() { "Yes" } else { "No" };
                format!("{{\"word\": \"{verdict}\"}}")
            }
            PromptKind::Attach => {
                let word = first_slot(text).unwrap_or("");
                let target = self.vocabulary.attachment_of(word).unwrap_or("not applicable");
                format!("{{\"word\": \"{target}\"}}")
            }
            kind @ (PromptKind::Interpretation | PromptKind::Context | PromptKind::Character) => {
                let emotion = first_slot(text).unwrap_or("this feeling");
                self.prototype_text(kind, name, &image, emotion)
            }
            PromptKind::Judgment => self.judgment_text(name, request),
            PromptKind::Other => "Mock response.".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ImagePayload;
    use crate::prompts;
    use crate::taxonomy::load_parrott;

    fn backend() -> (Taxonomy, MockBackend) {
        let tax = load_parrott();
        let vocab = MockVocabulary::from_taxonomy(&tax);
        (tax, MockBackend::new(11, vocab))
    }

    fn image(i: u32) -> ImagePayload {
        ImagePayload::new("image/png", i.to_le_bytes().to_vec())
    }

    #[test]
    fn same_inputs_same_text() {
        let (_, m) = backend();
        let p = ModelProfile::mock("a");
        let req = ChatRequest::new(prompts::ANALYZE_PROMPT).with_image(image(1));
        assert_eq!(m.send(&p, &req).unwrap(), m.send(&p, &req).unwrap());
    }

    #[test]
    fn bucket_contract_holds() {
        let (tax, m) = backend();
        for i in 0..200u32 {
            let img = image(i);
            let d = img.digest();
            let terms = m.terms_for("a", &d);
            assert!((5..=10).contains(&terms.len()), "{terms:?}");
            let want = match m.bucket_for(&d) {
                PolarityBucket::AllPositive => Some(Polarity::Positive),
                PolarityBucket::AllNegative => Some(Polarity::Negative),
                PolarityBucket::Mixed => None,
            };
            if let Some(want) = want {
                for t in &terms {
                    let pol = m.vocabulary().attachment_of(t).map(|x| tax.polarity_of(x).unwrap());
                    assert_eq!(pol, Some(want), "{t}");
                }
            }
        }
    }

    #[test]
    fn extraction_reads_analysis() {
        let (_, m) = backend();
        let p = ModelProfile::mock("a");
        let img = image(3);
        let analysis = m
            .send(&p, &ChatRequest::new(prompts::ANALYZE_PROMPT).with_image(img.clone()))
            .unwrap();
        let listed = m.send(&p, &ChatRequest::new(prompts::extract_prompt(&analysis))).unwrap();
        let expected = m.terms_for("a", &img.digest());
        assert_eq!(listed.lines().count(), expected.len());
        assert!(listed.starts_with("1. "));
    }

    #[test]
    fn judges_answer_in_json() {
        let (_, m) = backend();
        let p = ModelProfile::mock("judge");
        let yes = m.send(&p, &ChatRequest::new(prompts::filter_prompt("melancholy"))).unwrap();
        assert_eq!(yes, "{\"word\": \"Yes\"}");
        let no = m.send(&p, &ChatRequest::new(prompts::filter_prompt("sunset"))).unwrap();
        assert_eq!(no, "{\"word\": \"No\"}");
        let att = m
            .send(&p, &ChatRequest::new(prompts::attach_prompt("serenity", &["pleasure"])))
            .unwrap();
        assert_eq!(att, "{\"word\": \"pleasure\"}");
    }

    #[test]
    fn always_correct_policy() {
        let (_, m) = backend();
        let m = m.with_policy(JudgmentPolicy::AlwaysCorrect);
        let p = ModelProfile::mock("x");
        for i in 0..20 {
            let req = ChatRequest::new(prompts::eval_prompt(&format!("s{i}"))).with_seed(i);
            assert_eq!(m.send(&p, &req).unwrap(), "Correct");
        }
    }

    #[test]
    fn word_boundary_search() {
        assert_eq!(find_word("enjoyment and joy", "joy"), Some(14));
        assert_eq!(find_word("enjoyment", "joy"), None);
    }
}
