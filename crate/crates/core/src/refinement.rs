//! Five-annotator consensus, agreement statistics and benchmark curation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::percent;
use crate::statements::{Dimension, Statement};

pub const ANNOTATORS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum RefinementError {
    #[error("statement {statement_id} has {have} of {ANNOTATORS} judgments")]
    Pending { statement_id: String, have: usize },
    #[error("statement {statement_id} has {have} judgments, more than {ANNOTATORS}")]
    TooMany { statement_id: String, have: usize },
    #[error("annotator {annotator_id} judged {statement_id} more than once")]
    Duplicate { statement_id: String, annotator_id: String },
    #[error("judgments for different statements passed together")]
    MixedStatements,
    #[error("kappa row {row} sums to {sum}, expected {raters}")]
    RowSum { row: usize, sum: usize, raters: usize },
    #[error("kappa is undefined: {0}")]
    KappaUndefined(&'static str),
    #[error("no judgments to report on")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub statement_id: String,
    pub annotator_id: String,
    /// Whether the annotator found the automatic ground truth accurate.
    pub verdict: bool,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusClass {
    Confirmed,
    Rectified,
    Ambiguous,
}

impl ConsensusClass {
    pub fn from_agree_count(agree: usize) -> Self {
        match agree {
            4 | 5 => ConsensusClass::Confirmed,
            0 | 1 => ConsensusClass::Rectified,
            _ => ConsensusClass::Ambiguous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusOutcome {
    pub statement_id: String,
    pub agree_count: usize,
    pub class: ConsensusClass,
}

/// Consensus over the judgments of one statement. Fewer than five is
/// `Pending`.
pub fn consensus_of(judgments: &[Judgment]) -> Result<ConsensusOutcome, RefinementError> {
    let Some(first) = judgments.first() else {
        return Err(RefinementError::Pending {
            statement_id: String::new(),
            have: 0,
        });
    };
    let statement_id = first.statement_id.clone();
    let mut annotators = BTreeSet::new();
    for j in judgments {
        if j.statement_id != statement_id {
            return Err(RefinementError::MixedStatements);
        }
        if !annotators.insert(j.annotator_id.as_str()) {
            return Err(RefinementError::Duplicate {
                statement_id,
                annotator_id: j.annotator_id.clone(),
            });
        }
    }
    match judgments.len() {
        n if n < ANNOTATORS => Err(RefinementError::Pending { statement_id, have: n }),
        n if n > ANNOTATORS => Err(RefinementError::TooMany { statement_id, have: n }),
        _ => {
            let agree = judgments.iter().filter(|j| j.verdict).count();
            Ok(ConsensusOutcome {
                statement_id,
                agree_count: agree,
                class: ConsensusClass::from_agree_count(agree),
            })
        }
    }
}

/// Fleiss' κ for items rated by `raters` raters into `K` categories.
pub fn fleiss_kappa<const K: usize>(rows: &[[usize; K]], raters: usize) -> Result<f64, RefinementError> {
    if rows.is_empty() {
        return Err(RefinementError::KappaUndefined("no items"));
    }
    if raters < 2 {
        return Err(RefinementError::KappaUndefined("fewer than two raters"));
    }
    for (i, r) in rows.iter().enumerate() {
        let sum: usize = r.iter().sum();
        if sum != raters {
            return Err(RefinementError::RowSum { row: i, sum, raters });
        }
    }
    let n = raters as f64;
    let items = rows.len() as f64;
    let p_bar = rows
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..K)
        .map(|j| {
            let pj = rows.iter().map(|r| r[j] as f64).sum::<f64>() / (items * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return if (p_bar - 1.0).abs() < 1e-15 {
            Ok(1.0)
        } else {
            Err(RefinementError::KappaUndefined("expected agreement is 1"))
        };
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Groups judgments per statement and computes each outcome. Statements
/// with fewer than five judgments are returned as pending ids.
pub fn outcomes(judgments: &[Judgment]) -> Result<(Vec<ConsensusOutcome>, Vec<String>), RefinementError> {
    let mut by: BTreeMap<&str, Vec<Judgment>> = BTreeMap::new();
    for j in judgments {
        by.entry(j.statement_id.as_str()).or_default().push(j.clone());
    }
    let mut done = Vec::new();
    let mut pending = Vec::new();
    for (id, js) in by {
        match consensus_of(&js) {
            Ok(o) => done.push(o),
            Err(RefinementError::Pending { .. }) => pending.push(id.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok((done, pending))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditAction {
    Kept,
    Flipped,
    Dropped,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub statement_id: String,
    pub action: AuditAction,
    #[serde(default)]
    pub agree_count: Option<usize>,
    pub ground_truth_before: bool,
    pub ground_truth_after: Option<bool>,
}

#[derive(Debug, Clone, Default)]
pub struct Curated {
    pub benchmark: Vec<Statement>,
    pub audit: Vec<AuditEntry>,
}

/// Confirmed statements are kept, rectified ones kept with the ground truth
/// flipped and `rectified` set, ambiguous and pending ones dropped.
pub fn curate(statements: &[Statement], outcomes: &[ConsensusOutcome]) -> Curated {
    let by: BTreeMap<&str, &ConsensusOutcome> = outcomes.iter().map(|o| (o.statement_id.as_str(), o)).collect();
    let mut out = Curated::default();
    for s in statements {
        let before = s.ground_truth;
        let (action, agree) = match by.get(s.id.as_str()) {
            None => (AuditAction::Pending, None),
            Some(o) => match o.class {
                ConsensusClass::Confirmed => (AuditAction::Kept, Some(o.agree_count)),
                ConsensusClass::Rectified => (AuditAction::Flipped, Some(o.agree_count)),
                ConsensusClass::Ambiguous => (AuditAction::Dropped, Some(o.agree_count)),
            },
        };
        let after = match action {
            AuditAction::Kept => {
                out.benchmark.push(s.clone());
                Some(before)
            }
            AuditAction::Flipped => {
                let mut f = s.clone();
                f.ground_truth = !before;
                f.rectified = true;
                out.benchmark.push(f);
                Some(!before)
            }
            AuditAction::Dropped | AuditAction::Pending => None,
        };
        out.audit.push(AuditEntry {
            statement_id: s.id.clone(),
            action,
            agree_count: agree,
            ground_truth_before: before,
            ground_truth_after: after,
        });
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementColumn {
    pub statements: usize,
    pub pending: usize,
    /// Outcomes per agree count, index 0..=5.
    pub counts: [usize; 6],
    /// Percent per agree count, index 0..=5.
    pub histogram: [f64; 6],
    pub kappa: Option<f64>,
    pub confirmed: f64,
    pub rectified: f64,
    pub ambiguous: f64,
    /// Percent confirmed among statements built as correct.
    pub construction_accuracy_correct: Option<f64>,
    /// Percent confirmed among statements built as incorrect.
    pub construction_accuracy_incorrect: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub per_dimension: BTreeMap<Dimension, AgreementColumn>,
    pub total: AgreementColumn,
}

fn column(items: &[(&Statement, Option<&ConsensusOutcome>)]) -> AgreementColumn {
    let mut col = AgreementColumn {
        statements: items.len(),
        ..Default::default()
    };
    let mut rows: Vec<[usize; 2]> = Vec::new();
    let (mut t_all, mut t_ok, mut f_all, mut f_ok) = (0, 0, 0, 0);
    for (s, o) in items {
        let Some(o) = o else {
            col.pending += 1;
            continue;
        };
        col.counts[o.agree_count] += 1;
        rows.push([o.agree_count, ANNOTATORS - o.agree_count]);
        let ok = o.class == ConsensusClass::Confirmed;
        if s.ground_truth {
            t_all += 1;
            t_ok += usize::from(ok);
        } else {
            f_all += 1;
            f_ok += usize::from(ok);
        }
    }
    let decided = rows.len();
    for k in 0..=ANNOTATORS {
        col.histogram[k] = percent(col.counts[k], decided);
    }
    col.confirmed = percent(col.counts[4] + col.counts[5], decided);
    col.rectified = percent(col.counts[0] + col.counts[1], decided);
    col.ambiguous = percent(col.counts[2] + col.counts[3], decided);
    col.kappa = fleiss_kappa(&rows, ANNOTATORS).ok();
    col.construction_accuracy_correct = (t_all > 0).then(|| percent(t_ok, t_all));
    col.construction_accuracy_incorrect = (f_all > 0).then(|| percent(f_ok, f_all));
    col
}

/// Agreement statistics over the statements that received judgments,
/// optionally restricted to one dimension.
pub fn agreement_report(
    judgments: &[Judgment],
    statements: &[Statement],
    dimension: Option<Dimension>,
) -> Result<AgreementReport, RefinementError> {
    if judgments.is_empty() {
        return Err(RefinementError::Empty);
    }
    let (done, _) = outcomes(judgments)?;
    let by: BTreeMap<&str, &ConsensusOutcome> = done.iter().map(|o| (o.statement_id.as_str(), o)).collect();
    let judged: BTreeSet<&str> = judgments.iter().map(|j| j.statement_id.as_str()).collect();
    let items: Vec<(&Statement, Option<&ConsensusOutcome>)> = statements
        .iter()
        .filter(|s| judged.contains(s.id.as_str()))
        .filter(|s| dimension.is_none_or(|d| s.dimension == d))
        .map(|s| (s, by.get(s.id.as_str()).copied()))
        .collect();
    if items.is_empty() {
        return Err(RefinementError::Empty);
    }
    let mut per: BTreeMap<Dimension, Vec<(&Statement, Option<&ConsensusOutcome>)>> = BTreeMap::new();
    for it in &items {
        per.entry(it.0.dimension).or_default().push(*it);
    }
    Ok(AgreementReport {
        per_dimension: per.iter().map(|(d, v)| (*d, column(v))).collect(),
        total: column(&items),
    })
}

pub fn render_agreement_table(r: &AgreementReport) -> String {
    let mut cols: Vec<(String, &AgreementColumn)> = r
        .per_dimension
        .iter()
        .map(|(d, c)| (d.short_name().to_string(), c))
        .collect();
    cols.push(("Total".into(), &r.total));
    let fmt_opt = |v: Option<f64>, digits: usize| match v {
        Some(x) => format!("{x:.digits$}"),
        None => "-".into(),
    };
    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    for k in (0..=ANNOTATORS).rev() {
        rows.push((
            format!("Agreement {k}/{ANNOTATORS} (%)"),
            cols.iter().map(|(_, c)| format!("{:.1}", c.histogram[k])).collect(),
        ));
    }
    rows.push(("Kappa".into(), cols.iter().map(|(_, c)| fmt_opt(c.kappa, 2)).collect()));
    rows.push((
        "Construction accuracy, correct (%)".into(),
        cols.iter().map(|(_, c)| fmt_opt(c.construction_accuracy_correct, 1)).collect(),
    ));
    rows.push((
        "Construction accuracy, incorrect (%)".into(),
        cols.iter().map(|(_, c)| fmt_opt(c.construction_accuracy_incorrect, 1)).collect(),
    ));
    rows.push(("Pending".into(), cols.iter().map(|(_, c)| c.pending.to_string()).collect()));

    let w0 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let widths: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(i, (name, _))| rows.iter().map(|r| r.1[i].len()).chain([name.len()]).max().unwrap())
        .collect();
    let mut out = format!("{:<w0$}", "");
    for (i, (name, _)) in cols.iter().enumerate() {
        let _ = write!(out, "  {:>w$}", name, w = widths[i]);
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<w0$}");
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", c, w = widths[i]);
        }
        out.push('\n');
    }
    out
}
