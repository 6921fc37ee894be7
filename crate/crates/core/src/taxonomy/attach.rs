use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{normalize_term, Level, Taxonomy};

/// Where an open-vocabulary term hangs in the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachTarget {
    Tertiary(String),
    NotApplicable,
}

impl AttachTarget {
    /// `not applicable` (any case) maps to [`AttachTarget::NotApplicable`].
    pub fn parse(raw: &str) -> Self {
        let t = normalize_term(raw);
        if t == "not applicable" || t == "not_applicable" || t == "n/a" {
            AttachTarget::NotApplicable
        } else {
            AttachTarget::Tertiary(t)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachSource {
    ModelJudge,
    ManualOverride,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attachment {
    pub target: AttachTarget,
    pub source: AttachSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub term: String,
    pub target: String,
    pub reason: String,
}

/// Open-vocabulary term → tertiary category. Manual overrides shadow judge
/// results for the same term regardless of insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttachmentMap {
    entries: BTreeMap<String, Attachment>,
}

impl AttachmentMap {
    pub fn insert(&mut self, term: &str, target: AttachTarget, source: AttachSource) {
        let term = normalize_term(term);
        if let Some(prev) = self.entries.get(&term) {
            if prev.source == AttachSource::ManualOverride && source == AttachSource::ModelJudge {
                return;
            }
        }
        self.entries.insert(term, Attachment { target, source });
    }

    /// Applies every entry of `overrides` on top of `self`.
    pub fn merge_overrides(&mut self, overrides: &AttachmentMap) {
        for (term, a) in &overrides.entries {
            self.insert(term, a.target.clone(), AttachSource::ManualOverride);
        }
    }

    pub fn get(&self, term: &str) -> Option<&Attachment> {
        self.entries.get(&normalize_term(term))
    }

    pub fn remove(&mut self, term: &str) -> Option<Attachment> {
        self.entries.remove(&normalize_term(term))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Attachment)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose target is not a tertiary of `tax`.
    pub fn validate(&self, tax: &Taxonomy) -> Vec<Rejection> {
        let mut out = Vec::new();
        for (term, a) in &self.entries {
            let AttachTarget::Tertiary(target) = &a.target else {
                continue;
            };
            let reason = match tax.index.get(target.as_str()) {
                None => Some("target is not a node of the taxonomy".to_string()),
                Some(ids) if !ids.iter().any(|id| tax.node(*id).level == Level::Tertiary) => {
                    Some(format!(
                        "target is a {:?} node, not a tertiary category",
                        tax.node(ids[0]).level
                    ))
                }
                _ => None,
            };
            if let Some(reason) = reason {
                out.push(Rejection {
                    term: term.clone(),
                    target: target.clone(),
                    reason,
                });
            }
        }
        out
    }

    /// Drops invalid entries and returns them.
    pub fn retain_valid(&mut self, tax: &Taxonomy) -> Vec<Rejection> {
        let rejected = self.validate(tax);
        for r in &rejected {
            self.entries.remove(&r.term);
        }
        rejected
    }

    /// Parses the override format: `term<TAB>tertiary` per line, `#` comments.
    pub fn parse_overrides(text: &str) -> Result<Self, String> {
        let mut map = AttachmentMap::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let Some((term, target)) = line.split_once('\t') else {
                return Err(format!("line {}: expected `term<TAB>tertiary`", i + 1));
            };
            let term = normalize_term(term);
            if term.is_empty() {
                return Err(format!("line {}: empty term", i + 1));
            }
            map.insert(&term, AttachTarget::parse(target), AttachSource::ManualOverride);
        }
        Ok(map)
    }

    /// Serializes in the override format; not-applicable entries are written
    /// as `not applicable`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (term, a) in &self.entries {
            let target = match &a.target {
                AttachTarget::Tertiary(t) => t.as_str(),
                AttachTarget::NotApplicable => "not applicable",
            };
            let _ = writeln!(out, "{term}\t{target}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::load_parrott;

    #[test]
    fn override_shadows_judge() {
        let mut map = AttachmentMap::default();
        map.insert("calm", AttachTarget::Tertiary("pleasure".into()), AttachSource::ManualOverride);
        map.insert("calm", AttachTarget::Tertiary("relief".into()), AttachSource::ModelJudge);
        assert_eq!(map.get("calm").unwrap().target, AttachTarget::Tertiary("pleasure".into()));
    }

    #[test]
    fn override_file_round_trip() {
        let text = "# overrides\nserenity\tpleasure\nsunset\tnot applicable\n\n";
        let map = AttachmentMap::parse_overrides(text).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map.get("sunset").unwrap().target, AttachTarget::NotApplicable);
        let again = AttachmentMap::parse_overrides(&map.to_tsv()).unwrap();
        assert_eq!(again, map);
        assert!(AttachmentMap::parse_overrides("no tab here").is_err());
    }

    #[test]
    fn secondary_target_rejected() {
        let tax = load_parrott();
        let mut map = AttachmentMap::default();
        map.insert("serenity", AttachTarget::Tertiary("contentment".into()), AttachSource::ManualOverride);
        let rejected = map.validate(&tax);
        assert_eq!(rejected.len(), 1);
        assert!(rejected[0].reason.contains("Secondary"));
    }
}
