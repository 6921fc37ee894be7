//! Parrott's hierarchical emotion model and its open-vocabulary extension.
//!
//! The built-in tree is embedded as TSV (`primary<TAB>secondary<TAB>tertiary`)
//! and parsed at load time. Open-vocabulary terms are attached as leaves under
//! a tertiary category through an [`AttachmentMap`], producing a new taxonomy
//! value; a loaded taxonomy is never mutated.
//!
//! Names repeat across levels in the source table ("sadness" is both a primary
//! and a secondary category, "joy" is a primary and a tertiary), so names are
//! unique per level and every lookup resolves to the deepest node that carries
//! the name.

mod attach;

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attach::{AttachSource, AttachTarget, Attachment, AttachmentMap, Rejection};

const PARROTT_TSV: &str = include_str!("../../data/parrott.tsv");

/// Depth of a node in the tree, ordered from the root downwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Primary,
    Secondary,
    Tertiary,
    OpenVocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn opposite(self) -> Self {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Positive => f.write_str("positive"),
            Polarity::Negative => f.write_str("negative"),
        }
    }
}

/// Polarity of the six primary emotions.
pub fn primary_polarity(primary: &str) -> Option<Polarity> {
    match primary {
        "joy" | "love" | "surprise" => Some(Polarity::Positive),
        "anger" | "fear" | "sadness" => Some(Polarity::Negative),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmotionNode {
    pub name: String,
    pub level: Level,
    pub parent: Option<NodeId>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaxonomyError {
    #[error("taxonomy data line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("unknown emotion term `{0}`")]
    UnknownTerm(String),
    #[error("`{term}` has no ancestor at {level:?} level")]
    NoAncestor { term: String, level: Level },
    #[error("{} attachment(s) rejected: {}", .0.len(), .0.iter().map(|r| r.term.as_str()).collect::<Vec<_>>().join(", "))]
    Rejected(Vec<Rejection>),
}

/// Lowercase, trim, and collapse internal whitespace runs to one space.
pub fn normalize_term(raw: &str) -> String {
    raw.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    nodes: Vec<EmotionNode>,
    index: HashMap<String, Vec<NodeId>>,
}

/// The built-in 6/25/115 Parrott tree.
pub fn load_parrott() -> Taxonomy {
    Taxonomy::from_tsv(PARROTT_TSV).expect("embedded Parrott taxonomy is corrupt")
}

impl Taxonomy {
    /// Parses `primary<TAB>secondary<TAB>tertiary` rows; `#` lines and blank
    /// lines are skipped.
    pub fn from_tsv(text: &str) -> Result<Self, TaxonomyError> {
        let mut tax = Taxonomy {
            nodes: Vec::new(),
            index: HashMap::new(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let cols: Vec<String> = raw.split('\t').map(normalize_term).collect();
            if cols.len() != 3 || cols.iter().any(String::is_empty) {
                return Err(TaxonomyError::Corrupt {
                    line,
                    reason: format!("expected 3 non-empty tab-separated columns, got `{raw}`"),
                });
            }
            let (p, s, t) = (&cols[0], &cols[1], &cols[2]);
            if primary_polarity(p).is_none() {
                return Err(TaxonomyError::Corrupt {
                    line,
                    reason: format!("`{p}` is not one of the six primary emotions"),
                });
            }
            let pid = match tax.find_at(p, Level::Primary) {
                Some(id) => id,
                None => tax.push(p, Level::Primary, None),
            };
            let sid = match tax.find_at(s, Level::Secondary) {
                Some(id) if tax.nodes[id.0].parent == Some(pid) => id,
                Some(_) => {
                    return Err(TaxonomyError::Corrupt {
                        line,
                        reason: format!("secondary `{s}` listed under two primaries"),
                    })
                }
                None => tax.push(s, Level::Secondary, Some(pid)),
            };
            if tax.find_at(t, Level::Tertiary).is_some() {
                return Err(TaxonomyError::Corrupt {
                    line,
                    reason: format!("duplicate tertiary `{t}`"),
                });
            }
            tax.push(t, Level::Tertiary, Some(sid));
        }
        if tax.nodes.is_empty() {
            return Err(TaxonomyError::Corrupt {
                line: 0,
                reason: "no rows".into(),
            });
        }
        Ok(tax)
    }

    fn push(&mut self, name: &str, level: Level, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(EmotionNode {
            name: name.to_string(),
            level,
            parent,
        });
        self.index.entry(name.to_string()).or_default().push(id);
        id
    }

    fn find_at(&self, name: &str, level: Level) -> Option<NodeId> {
        self.index
            .get(name)?
            .iter()
            .copied()
            .find(|id| self.nodes[id.0].level == level)
    }

    pub fn nodes(&self) -> &[EmotionNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &EmotionNode {
        &self.nodes[id.0]
    }

    pub fn count(&self, level: Level) -> usize {
        self.nodes.iter().filter(|n| n.level == level).count()
    }

    /// Names at `level`, in load order.
    pub fn names_at(&self, level: Level) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.level == level)
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn tertiary_names(&self) -> Vec<&str> {
        self.names_at(Level::Tertiary)
    }

    /// Deepest node named `term` (after normalization).
    pub fn resolve(&self, term: &str) -> Option<NodeId> {
        let key = normalize_term(term);
        self.index
            .get(&key)?
            .iter()
            .copied()
            .max_by_key(|id| self.nodes[id.0].level)
    }

    pub fn contains(&self, term: &str) -> bool {
        self.resolve(term).is_some()
    }

    pub fn level_of(&self, term: &str) -> Result<Level, TaxonomyError> {
        Ok(self.node(self.lookup(term)?).level)
    }

    fn lookup(&self, term: &str) -> Result<NodeId, TaxonomyError> {
        self.resolve(term)
            .ok_or_else(|| TaxonomyError::UnknownTerm(normalize_term(term)))
    }

    /// Names from the resolved node up to its primary, starting with the node.
    pub fn path(&self, term: &str) -> Result<Vec<&str>, TaxonomyError> {
        let mut out = Vec::new();
        let mut cur = Some(self.lookup(term)?);
        while let Some(id) = cur {
            let node = &self.nodes[id.0];
            out.push(node.name.as_str());
            cur = node.parent;
        }
        Ok(out)
    }

    /// Ancestor (or self) of `term` at `level`.
    pub fn ancestor_at(&self, term: &str, level: Level) -> Result<&str, TaxonomyError> {
        let mut cur = Some(self.lookup(term)?);
        while let Some(id) = cur {
            let node = &self.nodes[id.0];
            if node.level == level {
                return Ok(&node.name);
            }
            if node.level < level {
                break;
            }
            cur = node.parent;
        }
        Err(TaxonomyError::NoAncestor {
            term: normalize_term(term),
            level,
        })
    }

    pub fn tertiary_of(&self, term: &str) -> Result<&str, TaxonomyError> {
        self.ancestor_at(term, Level::Tertiary)
    }

    pub fn secondary_of(&self, term: &str) -> Result<&str, TaxonomyError> {
        self.ancestor_at(term, Level::Secondary)
    }

    pub fn primary_of(&self, term: &str) -> Result<&str, TaxonomyError> {
        self.ancestor_at(term, Level::Primary)
    }

    pub fn polarity_of(&self, term: &str) -> Result<Polarity, TaxonomyError> {
        let primary = self.primary_of(term)?;
        Ok(primary_polarity(primary).expect("primaries are validated at load"))
    }

    /// True when both terms resolve to the same tertiary category. Terms
    /// without a tertiary ancestor never share one.
    pub fn same_tertiary(&self, a: &str, b: &str) -> bool {
        match (self.tertiary_of(a), self.tertiary_of(b)) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        }
    }

    /// Tertiary categories whose polarity is `polarity`, in load order.
    pub fn tertiaries_with_polarity(&self, polarity: Polarity) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.level == Level::Tertiary)
            .map(|n| n.name.as_str())
            .filter(|t| self.polarity_of(t).ok() == Some(polarity))
            .collect()
    }

    /// Uniformly random tertiary from the spectrum opposite to `term`'s.
    pub fn sample_opposite_tertiary<R: Rng + ?Sized>(
        &self,
        term: &str,
        rng: &mut R,
    ) -> Result<&str, TaxonomyError> {
        let target = self.polarity_of(term)?.opposite();
        let pool = self.tertiaries_with_polarity(target);
        Ok(pool[rng.random_range(0..pool.len())])
    }

    /// New taxonomy with every applicable attachment added as an open-vocabulary
    /// leaf. Terms already naming a tertiary or open-vocabulary node merge into
    /// it. Any attachment whose target is not a tertiary fails the whole call.
    pub fn extend(&self, attachments: &AttachmentMap) -> Result<Taxonomy, TaxonomyError> {
        let rejected = attachments.validate(self);
        if !rejected.is_empty() {
            return Err(TaxonomyError::Rejected(rejected));
        }
        let mut out = self.clone();
        for (term, attachment) in attachments.iter() {
            let AttachTarget::Tertiary(target) = &attachment.target else {
                continue;
            };
            let existing = out.resolve(term).map(|id| out.nodes[id.0].level);
            if matches!(existing, Some(Level::Tertiary | Level::OpenVocab)) {
                continue;
            }
            let parent = out
                .find_at(target, Level::Tertiary)
                .expect("validated above");
            out.push(term, Level::OpenVocab, Some(parent));
        }
        Ok(out)
    }
}
