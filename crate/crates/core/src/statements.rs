//! Prototype generation and correct/incorrect statement construction in the
//! four judgment dimensions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{digest_parts_hex, rng_for};
use crate::gateway::{ChatRequest, Gateway, GatewayError, ImagePayload, GENERATIVE_TEMPERATURE};
use crate::prompts;
use crate::similarity::{SimilarityError, SimilarityIndex};
use crate::tagging::{ImageLabels, Label};
use crate::taxonomy::{Polarity, Taxonomy};

#[derive(Debug, Error)]
pub enum StatementError {
    #[error("polarity class of an empty label set is undefined")]
    EmptyLabelSet,
    #[error(transparent)]
    Taxonomy(#[from] crate::taxonomy::TaxonomyError),
}

/// Statement templates #8 to #13.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    PositivePolarity,
    NegativePolarity,
    MixedPolarity,
    Interpretation,
    Context,
    Subjectivity,
}

impl TemplateId {
    pub fn number(self) -> u8 {
        match self {
            TemplateId::PositivePolarity => 8,
            TemplateId::NegativePolarity => 9,
            TemplateId::MixedPolarity => 10,
            TemplateId::Interpretation => 11,
            TemplateId::Context => 12,
            TemplateId::Subjectivity => 13,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimension {
    SentimentPolarity,
    EmotionInterpretation,
    SceneContext,
    PerceptionSubjectivity,
}

impl Dimension {
    pub const ALL: [Dimension; 4] = [
        Dimension::SentimentPolarity,
        Dimension::EmotionInterpretation,
        Dimension::SceneContext,
        Dimension::PerceptionSubjectivity,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            Dimension::SentimentPolarity => "Polarity",
            Dimension::EmotionInterpretation => "Interpretation",
            Dimension::SceneContext => "Context",
            Dimension::PerceptionSubjectivity => "Subjectivity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Dimension::ALL.into_iter().find(|d| {
            let name = serde_json::to_value(d).unwrap();
            name.as_str() == Some(s.as_str()) || d.short_name().eq_ignore_ascii_case(&s)
        })
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeKind {
    Interpretation,
    Context,
    Character,
}

impl PrototypeKind {
    pub const ALL: [PrototypeKind; 3] = [PrototypeKind::Interpretation, PrototypeKind::Context, PrototypeKind::Character];

    pub fn prompt(self, emotion: &str) -> String {
        match self {
            PrototypeKind::Interpretation => prompts::interpretation_prompt(emotion),
            PrototypeKind::Context => prompts::context_prompt(emotion),
            PrototypeKind::Character => prompts::character_prompt(emotion),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prototype {
    pub kind: PrototypeKind,
    pub text: String,
    pub image_id: String,
    pub label_term: String,
    pub generator_model: String,
}

/// Text up to and including the first `.`, `!` or `?` that ends the text or
/// is followed by whitespace.
pub fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    let mut chars = t.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return t,
                Some((_, n)) if n.is_whitespace() => return &t[..i + c.len_utf8()],
                _ => {}
            }
        }
    }
    t
}

fn clean_prototype(kind: PrototypeKind, raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    match kind {
        PrototypeKind::Interpretation => collapsed,
        PrototypeKind::Context | PrototypeKind::Character => first_sentence(&collapsed).to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrototypeFailure {
    pub image_id: String,
    pub label_term: String,
    pub kind: PrototypeKind,
    pub reason: String,
}

/// Asks the label's attributed model for the three prototypes. Each kind
/// fails independently.
pub fn generate_prototypes(
    gateway: &Gateway,
    image_id: &str,
    image: &ImagePayload,
    label: &Label,
) -> (Vec<Prototype>, Vec<PrototypeFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for kind in PrototypeKind::ALL {
        let req = ChatRequest::new(kind.prompt(&label.term))
            .with_image(image.clone())
            .with_temperature(GENERATIVE_TEMPERATURE);
        let outcome = gateway
            .complete(&label.model, &req)
            .map_err(|e: GatewayError| e.to_string())
            .and_then(|resp| {
                let text = clean_prototype(kind, &resp.text);
                if text.is_empty() {
                    Err("empty response".to_string())
                } else {
                    Ok(text)
                }
            });
        match outcome {
            Ok(text) => ok.push(Prototype {
                kind,
                text,
                image_id: image_id.to_string(),
                label_term: label.term.clone(),
                generator_model: label.model.clone(),
            }),
            Err(reason) => {
                log::warn!("image {image_id}, label `{}`: {kind:?} prototype failed: {reason}", label.term);
                failed.push(PrototypeFailure {
                    image_id: image_id.to_string(),
                    label_term: label.term.clone(),
                    kind,
                    reason,
                });
            }
        }
    }
    (ok, failed)
}

/// Prototypes indexed by (image, label, kind).
#[derive(Debug, Clone, Default)]
pub struct PrototypeBank {
    map: BTreeMap<(String, String, PrototypeKind), Prototype>,
}

impl PrototypeBank {
    pub fn new(prototypes: impl IntoIterator<Item = Prototype>) -> Self {
        let mut bank = PrototypeBank::default();
        for p in prototypes {
            bank.insert(p);
        }
        bank
    }

    pub fn insert(&mut self, p: Prototype) {
        self.map.insert((p.image_id.clone(), p.label_term.clone(), p.kind), p);
    }

    pub fn get(&self, image_id: &str, term: &str, kind: PrototypeKind) -> Option<&Prototype> {
        self.map.get(&(image_id.to_string(), term.to_string(), kind))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype> {
        self.map.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityClass {
    FullyPositive,
    FullyNegative,
    Mixed,
}

impl PolarityClass {
    pub fn from_polarities(polarities: impl IntoIterator<Item = Polarity>) -> Option<Self> {
        let (mut pos, mut neg) = (false, false);
        for p in polarities {
            match p {
                Polarity::Positive => pos = true,
                Polarity::Negative => neg = true,
            }
        }
        match (pos, neg) {
            (false, false) => None,
            (true, false) => Some(PolarityClass::FullyPositive),
            (false, true) => Some(PolarityClass::FullyNegative),
            (true, true) => Some(PolarityClass::Mixed),
        }
    }

    pub fn template(self) -> TemplateId {
        match self {
            PolarityClass::FullyPositive => TemplateId::PositivePolarity,
            PolarityClass::FullyNegative => TemplateId::NegativePolarity,
            PolarityClass::Mixed => TemplateId::MixedPolarity,
        }
    }
}

pub fn classify_polarity_set<'a>(
    terms: impl IntoIterator<Item = &'a str>,
    tax: &Taxonomy,
) -> Result<PolarityClass, StatementError> {
    let polarities = terms
        .into_iter()
        .map(|t| tax.polarity_of(t))
        .collect::<Result<Vec<_>, _>>()?;
    PolarityClass::from_polarities(polarities).ok_or(StatementError::EmptyLabelSet)
}

/// A term together with the spectrum it was judged under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionRef {
    pub term: String,
    pub polarity: Polarity,
}

impl EmotionRef {
    fn of(label: &Label) -> Self {
        EmotionRef {
            term: label.term.clone(),
            polarity: label.polarity,
        }
    }
}

/// Prototype material and where it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Material {
    pub text: String,
    pub image_id: String,
    pub label: EmotionRef,
    pub generator_model: String,
}

impl Material {
    fn of(p: &Prototype, label: &Label) -> Self {
        Material {
            text: p.text.clone(),
            image_id: p.image_id.clone(),
            label: EmotionRef::of(label),
            generator_model: p.generator_model.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Matched,
    /// Interpretation from a visually similar, emotionally dissimilar image.
    AffectiveGap,
    /// Interpretation from an emotionally similar, visually dissimilar image.
    EmotionalTrigger,
    /// Material exchanged with an opposite-polarity label of the same image.
    IntraSwap,
    /// Emotion slot replaced by a tertiary from the opposite spectrum.
    FlipPolarity,
    CanonicalOrder,
    ReversedOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Construction {
    Polarity {
        class: PolarityClass,
        labels: Vec<EmotionRef>,
    },
    Interpretation {
        strategy: Strategy,
        label: EmotionRef,
        interpretation: Material,
    },
    Context {
        strategy: Strategy,
        label: EmotionRef,
        context: Material,
        emotion: EmotionRef,
    },
    Subjectivity {
        strategy: Strategy,
        label: EmotionRef,
        character: Material,
        preferred: EmotionRef,
        other: EmotionRef,
        /// Whether `other` came from this image's labels (else sampled).
        other_from_image: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub template: TemplateId,
    pub seed: u64,
    #[serde(flatten)]
    pub construction: Construction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub id: String,
    pub image_id: String,
    pub dimension: Dimension,
    pub text: String,
    pub ground_truth: bool,
    pub provenance: Provenance,
    /// Set when human refinement flipped `ground_truth`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rectified: bool,
}

impl Statement {
    fn new(image_id: &str, dimension: Dimension, provenance: Provenance) -> Self {
        let text = render(&provenance);
        let ground_truth = derive_ground_truth(image_id, &provenance);
        let id = statement_id(image_id, dimension, &text, ground_truth);
        Statement {
            id,
            image_id: image_id.to_string(),
            dimension,
            text,
            ground_truth,
            provenance,
            rectified: false,
        }
    }

    /// Whether the stored bit agrees with the construction record (flipped
    /// statements disagree by design).
    pub fn consistent_with_provenance(&self) -> bool {
        self.ground_truth == derive_ground_truth(&self.image_id, &self.provenance)
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Stable content hash.
pub fn statement_id(image_id: &str, dimension: Dimension, text: &str, ground_truth: bool) -> String {
    let dim = serde_json::to_string(&dimension).unwrap();
    let gt = if ground_truth { "1" } else { "0" };
    digest_parts_hex(&[image_id.as_bytes(), dim.as_bytes(), text.as_bytes(), gt.as_bytes()])[..20].to_string()
}

pub fn dimension_of(template: TemplateId) -> Dimension {
    match template {
        TemplateId::PositivePolarity | TemplateId::NegativePolarity | TemplateId::MixedPolarity => {
            Dimension::SentimentPolarity
        }
        TemplateId::Interpretation => Dimension::EmotionInterpretation,
        TemplateId::Context => Dimension::SceneContext,
        TemplateId::Subjectivity => Dimension::PerceptionSubjectivity,
    }
}

/// Renders the statement text from its construction record.
pub fn render(p: &Provenance) -> String {
    match &p.construction {
        Construction::Polarity { .. } => prompts::polarity_statement(p.template)
            .expect("polarity construction uses a polarity template")
            .to_string(),
        Construction::Interpretation { label, interpretation, .. } => {
            format!("{} {}", interpretation.text, prompts::interpretation_conclusion(&label.term))
        }
        Construction::Context { context, emotion, .. } => prompts::context_statement(&context.text, &emotion.term),
        Construction::Subjectivity {
            character,
            preferred,
            other,
            ..
        } => prompts::subjectivity_statement(&character.text, &preferred.term, &other.term),
    }
}

/// Ground truth as a function of the construction record alone: a statement
/// is correct exactly when its material and emotion slot belong to the same
/// label of the judged image (and, for polarity, the template matches the
/// class).
pub fn derive_ground_truth(image_id: &str, p: &Provenance) -> bool {
    match &p.construction {
        Construction::Polarity { class, .. } => class.template() == p.template,
        Construction::Interpretation { label, interpretation, .. } => {
            interpretation.image_id == image_id && interpretation.label.term == label.term
        }
        Construction::Context { context, emotion, .. } => {
            context.image_id == image_id && context.label.term == emotion.term
        }
        Construction::Subjectivity {
            character, preferred, ..
        } => character.image_id == image_id && character.label.term == preferred.term,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstructParams {
    pub seed: u64,
    /// Incorrect statements per (label, dimension); each uses a distinct
    /// applicable strategy.
    pub incorrect_per_label: usize,
}

impl Default for ConstructParams {
    fn default() -> Self {
        ConstructParams {
            seed: 0,
            incorrect_per_label: 1,
        }
    }
}

struct ImageContext<'a> {
    labels: &'a ImageLabels,
    bank: &'a PrototypeBank,
    all: &'a BTreeMap<&'a str, &'a ImageLabels>,
    gap_source: Option<&'a str>,
    trigger_source: Option<&'a str>,
    tax: &'a Taxonomy,
    params: &'a ConstructParams,
}

impl ImageContext<'_> {
    fn id(&self) -> &str {
        &self.labels.image_id
    }

    fn proto(&self, label: &Label, kind: PrototypeKind) -> Option<Material> {
        self.bank
            .get(self.id(), &label.term, kind)
            .map(|p| Material::of(p, label))
    }

    fn opposite_labels(&self, label: &Label) -> Vec<&Label> {
        self.labels
            .labels
            .iter()
            .filter(|l| l.polarity != label.polarity)
            .collect()
    }

    fn provenance(&self, template: TemplateId, construction: Construction) -> Provenance {
        Provenance {
            template,
            seed: self.params.seed,
            construction,
        }
    }

    fn rng(&self, dim: &str, label: &str) -> rand_chacha::ChaCha8Rng {
        rng_for(self.params.seed, &["construct", dim, self.id(), label])
    }

    /// Interpretation material of some label of `source`; labels sharing the
    /// tertiary of `label` are preferred.
    fn foreign_interpretation<R: Rng>(&self, source: &str, label: &Label, rng: &mut R) -> Option<Material> {
        let src = self.all.get(source)?;
        let with_proto: Vec<(&Label, &Prototype)> = src
            .labels
            .iter()
            .filter_map(|l| {
                self.bank
                    .get(source, &l.term, PrototypeKind::Interpretation)
                    .map(|p| (l, p))
            })
            .collect();
        let same: Vec<_> = with_proto
            .iter()
            .filter(|(l, _)| l.tertiary == label.tertiary)
            .copied()
            .collect();
        let pool = if same.is_empty() { with_proto } else { same };
        pool.choose(rng).map(|(l, p)| Material::of(p, l))
    }

    fn polarity(&self) -> Vec<Statement> {
        let Some(class) = PolarityClass::from_polarities(self.labels.labels.iter().map(|l| l.polarity)) else {
            return Vec::new();
        };
        let refs: Vec<EmotionRef> = self.labels.labels.iter().map(EmotionRef::of).collect();
        [TemplateId::PositivePolarity, TemplateId::NegativePolarity, TemplateId::MixedPolarity]
            .into_iter()
            .map(|t| {
                let p = self.provenance(
                    t,
                    Construction::Polarity {
                        class,
                        labels: refs.clone(),
                    },
                );
                Statement::new(self.id(), Dimension::SentimentPolarity, p)
            })
            .collect()
    }

    fn interpretation(&self, label: &Label) -> Vec<Statement> {
        let Some(own) = self.proto(label, PrototypeKind::Interpretation) else {
            return Vec::new();
        };
        let mut rng = self.rng("interpretation", &label.term);
        let make = |strategy, interpretation| {
            let p = self.provenance(
                TemplateId::Interpretation,
                Construction::Interpretation {
                    strategy,
                    label: EmotionRef::of(label),
                    interpretation,
                },
            );
            Statement::new(self.id(), Dimension::EmotionInterpretation, p)
        };
        let mut out = vec![make(Strategy::Matched, own)];

        let mut options: Vec<(Strategy, Material)> = Vec::new();
        if let Some(src) = self.gap_source {
            if let Some(m) = self.foreign_interpretation(src, label, &mut rng) {
                options.push((Strategy::AffectiveGap, m));
            }
        }
        if let Some(src) = self.trigger_source {
            if let Some(m) = self.foreign_interpretation(src, label, &mut rng) {
                options.push((Strategy::EmotionalTrigger, m));
            }
        }
        let swaps: Vec<Material> = self
            .opposite_labels(label)
            .into_iter()
            .filter_map(|o| self.proto(o, PrototypeKind::Interpretation))
            .collect();
        if let Some(m) = swaps.choose(&mut rng) {
            options.push((Strategy::IntraSwap, m.clone()));
        }
        for (strategy, m) in pick(options, self.params.incorrect_per_label, &mut rng) {
            out.push(make(strategy, m));
        }
        out
    }

    fn context(&self, label: &Label) -> Vec<Statement> {
        let Some(own) = self.proto(label, PrototypeKind::Context) else {
            return Vec::new();
        };
        let mut rng = self.rng("context", &label.term);
        let make = |strategy, context, emotion| {
            let p = self.provenance(
                TemplateId::Context,
                Construction::Context {
                    strategy,
                    label: EmotionRef::of(label),
                    context,
                    emotion,
                },
            );
            Statement::new(self.id(), Dimension::SceneContext, p)
        };
        let mut out = vec![make(Strategy::Matched, own.clone(), EmotionRef::of(label))];

        let mut options: Vec<(Strategy, Material, EmotionRef)> = Vec::new();
        if let Ok(t) = self.tax.sample_opposite_tertiary(&label.term, &mut rng) {
            let emotion = EmotionRef {
                term: t.to_string(),
                polarity: label.polarity.opposite(),
            };
            options.push((Strategy::FlipPolarity, own, emotion));
        }
        let swaps: Vec<Material> = self
            .opposite_labels(label)
            .into_iter()
            .filter_map(|o| self.proto(o, PrototypeKind::Context))
            .collect();
        if let Some(m) = swaps.choose(&mut rng) {
            options.push((Strategy::IntraSwap, m.clone(), EmotionRef::of(label)));
        }
        for (strategy, m, e) in pick(options, self.params.incorrect_per_label, &mut rng) {
            out.push(make(strategy, m, e));
        }
        out
    }

    fn subjectivity(&self, label: &Label) -> Vec<Statement> {
        let Some(character) = self.proto(label, PrototypeKind::Character) else {
            return Vec::new();
        };
        let mut rng = self.rng("subjectivity", &label.term);
        let opposite = self.opposite_labels(label);
        let (other, from_image) = match opposite.choose(&mut rng) {
            Some(o) => (EmotionRef::of(o), true),
            None => match self.tax.sample_opposite_tertiary(&label.term, &mut rng) {
                Ok(t) => (
                    EmotionRef {
                        term: t.to_string(),
                        polarity: label.polarity.opposite(),
                    },
                    false,
                ),
                Err(_) => return Vec::new(),
            },
        };
        let me = EmotionRef::of(label);
        let make = |strategy, preferred: &EmotionRef, other: &EmotionRef| {
            let p = self.provenance(
                TemplateId::Subjectivity,
                Construction::Subjectivity {
                    strategy,
                    label: me.clone(),
                    character: character.clone(),
                    preferred: preferred.clone(),
                    other: other.clone(),
                    other_from_image: from_image,
                },
            );
            Statement::new(self.id(), Dimension::PerceptionSubjectivity, p)
        };
        let mut out = vec![make(Strategy::CanonicalOrder, &me, &other)];
        if self.params.incorrect_per_label > 0 {
            out.push(make(Strategy::ReversedOrder, &other, &me));
        }
        out
    }

    fn build(&self) -> Vec<Statement> {
        let mut out = self.polarity();
        for label in &self.labels.labels {
            out.extend(self.interpretation(label));
        }
        for label in &self.labels.labels {
            out.extend(self.context(label));
        }
        for label in &self.labels.labels {
            out.extend(self.subjectivity(label));
        }
        let mut seen = BTreeSet::new();
        out.retain(|s| seen.insert(s.id.clone()));
        out
    }
}

/// `n` options chosen seeded-uniformly without replacement, in option order.
fn pick<T, R: Rng>(options: Vec<T>, n: usize, rng: &mut R) -> Vec<T> {
    if options.len() <= n {
        return options;
    }
    let mut idx: Vec<usize> = (0..options.len()).collect();
    let mut chosen = BTreeSet::new();
    while chosen.len() < n {
        let i = rng.random_range(0..idx.len());
        chosen.insert(idx.swap_remove(i));
    }
    options
        .into_iter()
        .enumerate()
        .filter(|(i, _)| chosen.contains(i))
        .map(|(_, o)| o)
        .collect()
}

/// Statements for every labeled image, in input order. `index` supplies
/// inter-image sources; without it only intra-image disruption applies.
pub fn construct_corpus(
    labels: &[ImageLabels],
    bank: &PrototypeBank,
    index: Option<&SimilarityIndex>,
    tax: &Taxonomy,
    params: &ConstructParams,
) -> Vec<Statement> {
    let all: BTreeMap<&str, &ImageLabels> = labels.iter().map(|l| (l.image_id.as_str(), l)).collect();
    labels
        .par_iter()
        .map(|l| {
            let lookup = |f: for<'a> fn(&'a SimilarityIndex, &'a str) -> Result<&'a str, SimilarityError>| {
                index.and_then(|ix| match f(ix, &l.image_id) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        if !l.labels.is_empty() {
                            log::debug!("{e}");
                        }
                        None
                    }
                })
            };
            let ctx = ImageContext {
                labels: l,
                bank,
                all: &all,
                gap_source: lookup(SimilarityIndex::most_visual_similar_emotion_dissimilar),
                trigger_source: lookup(SimilarityIndex::most_emotion_similar_visual_dissimilar),
                tax,
                params,
            };
            ctx.build()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}
