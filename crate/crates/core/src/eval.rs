//! Statement-judgment evaluation: three queries per image–statement pair,
//! majority decision, accuracy and response-bias ratios.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ImageRecord;
use crate::gateway::{ChatRequest, Gateway, GENERATIVE_TEMPERATURE};
use crate::prompts;
use crate::statements::{Dimension, Statement};

pub const QUERIES_PER_TRIAL: usize = 3;
pub const POSITIVE_BIAS_ABOVE: f64 = 90.0;
pub const NEGATIVE_BIAS_BELOW: f64 = 10.0;
pub const GIVEUP_FLAG_ABOVE: f64 = 10.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("statement text is empty")]
    EmptyStatement,
    #[error("no trials to score")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Correct,
    Incorrect,
    GiveUp,
}

pub fn render_eval_prompt(statement: &str) -> Result<String, EvalError> {
    if statement.trim().is_empty() {
        return Err(EvalError::EmptyStatement);
    }
    Ok(prompts::eval_prompt(statement))
}

/// Case-insensitive; "incorrect" is checked before "correct", which it
/// contains.
pub fn parse_response(text: &str) -> Decision {
    let lower = text.to_lowercase();
    if lower.contains("incorrect") {
        Decision::Incorrect
    } else if lower.contains("correct") {
        Decision::Correct
    } else {
        Decision::GiveUp
    }
}

/// Most frequent decision; a three-way tie is a give-up.
pub fn majority(decisions: &[Decision]) -> Decision {
    let mut counts: BTreeMap<Decision, usize> = BTreeMap::new();
    for d in decisions {
        *counts.entry(*d).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let top: Vec<Decision> = counts.iter().filter(|(_, &c)| c == best).map(|(d, _)| *d).collect();
    if top.len() == 1 {
        top[0]
    } else {
        Decision::GiveUp
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub statement_id: String,
    pub image_id: String,
    pub model: String,
    pub dimension: Dimension,
    pub ground_truth: bool,
    pub responses: Vec<String>,
    pub decision: Decision,
    /// Set when the gateway failed; the trial then counts as a give-up.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    pub fn parsed(&self) -> Vec<Decision> {
        self.responses.iter().map(|r| parse_response(r)).collect()
    }

    pub fn is_hit(&self) -> bool {
        match self.decision {
            Decision::Correct => self.ground_truth,
            Decision::Incorrect => !self.ground_truth,
            Decision::GiveUp => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub temperature: f32,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            temperature: GENERATIVE_TEMPERATURE,
        }
    }
}

fn failed_trial(statement: &Statement, model: &str, responses: Vec<String>, error: String) -> Trial {
    let mut responses = responses;
    responses.resize(QUERIES_PER_TRIAL, String::new());
    Trial {
        statement_id: statement.id.clone(),
        image_id: statement.image_id.clone(),
        model: model.to_string(),
        dimension: statement.dimension,
        ground_truth: statement.ground_truth,
        responses,
        decision: Decision::GiveUp,
        error: Some(error),
    }
}

/// Three queries carrying seeds 0, 1, 2 so each is a distinct request.
pub fn run_trial(
    statement: &Statement,
    image: &ImageRecord,
    model: &str,
    gateway: &Gateway,
    params: &EvalParams,
) -> Trial {
    let prompt = match render_eval_prompt(&statement.text) {
        Ok(p) => p,
        Err(e) => return failed_trial(statement, model, Vec::new(), e.to_string()),
    };
    let payload = match image.load_payload() {
        Ok(p) => p,
        Err(e) => return failed_trial(statement, model, Vec::new(), e.to_string()),
    };
    let mut responses = Vec::with_capacity(QUERIES_PER_TRIAL);
    for k in 0..QUERIES_PER_TRIAL {
        let req = ChatRequest::new(prompt.clone())
            .with_image(payload.clone())
            .with_temperature(params.temperature)
            .with_seed(k as u64);
        match gateway.complete(model, &req) {
            Ok(r) => responses.push(r.text),
            Err(e) => return failed_trial(statement, model, responses, e.to_string()),
        }
    }
    let decision = majority(&responses.iter().map(|r| parse_response(r)).collect::<Vec<_>>());
    Trial {
        statement_id: statement.id.clone(),
        image_id: statement.image_id.clone(),
        model: model.to_string(),
        dimension: statement.dimension,
        ground_truth: statement.ground_truth,
        responses,
        decision,
        error: None,
    }
}

/// Trials for every statement, sorted by statement id.
pub fn evaluate(
    model: &str,
    benchmark: &[Statement],
    images: &HashMap<String, ImageRecord>,
    gateway: &Gateway,
    params: &EvalParams,
) -> Vec<Trial> {
    let mut trials: Vec<Trial> = benchmark
        .par_iter()
        .map(|s| match images.get(&s.image_id) {
            Some(img) => run_trial(s, img, model, gateway, params),
            None => failed_trial(s, model, Vec::new(), format!("unknown image {}", s.image_id)),
        })
        .collect();
    trials.sort_by(|a, b| a.statement_id.cmp(&b.statement_id));
    trials
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DimensionMetrics {
    pub trials: usize,
    pub hits: usize,
    pub misses: usize,
    pub giveups: usize,
    pub accuracy: f64,
    pub error_rate: f64,
    pub giveup_rate: f64,
}

impl DimensionMetrics {
    fn from_counts(trials: usize, hits: usize, giveups: usize) -> Self {
        let misses = trials - hits - giveups;
        DimensionMetrics {
            trials,
            hits,
            misses,
            giveups,
            accuracy: percent(hits, trials),
            error_rate: percent(misses, trials),
            giveup_rate: percent(giveups, trials),
        }
    }
}

pub fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub per_dimension: BTreeMap<Dimension, DimensionMetrics>,
    pub total: DimensionMetrics,
    /// Share of all responses parsed as "Correct".
    pub positive_ratio: f64,
    /// Share of all responses giving neither judgment.
    pub giveup_ratio: f64,
    pub decision_positive_ratio: f64,
    pub decision_giveup_ratio: f64,
    pub responses: usize,
    pub failed_trials: usize,
    pub flags: Vec<String>,
}

/// Metrics over `trials` in one pass sorted by statement id.
pub fn metrics(model: &str, trials: &[Trial]) -> Result<MetricsReport, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::NoTrials);
    }
    let mut sorted: Vec<&Trial> = trials.iter().collect();
    sorted.sort_by(|a, b| a.statement_id.cmp(&b.statement_id));

    let mut dims: BTreeMap<Dimension, (usize, usize, usize)> = BTreeMap::new();
    let (mut responses, mut pos, mut gu, mut dpos, mut dgu, mut failed) = (0, 0, 0, 0, 0, 0);
    for t in &sorted {
        let e = dims.entry(t.dimension).or_default();
        e.0 += 1;
        e.1 += usize::from(t.is_hit());
        e.2 += usize::from(t.decision == Decision::GiveUp);
        for d in t.parsed() {
            responses += 1;
            pos += usize::from(d == Decision::Correct);
            gu += usize::from(d == Decision::GiveUp);
        }
        dpos += usize::from(t.decision == Decision::Correct);
        dgu += usize::from(t.decision == Decision::GiveUp);
        failed += usize::from(t.error.is_some());
    }
    let per_dimension: BTreeMap<Dimension, DimensionMetrics> = dims
        .iter()
        .map(|(d, &(n, h, g))| (*d, DimensionMetrics::from_counts(n, h, g)))
        .collect();
    let (n, h, g) = dims
        .values()
        .fold((0, 0, 0), |acc, &(n, h, g)| (acc.0 + n, acc.1 + h, acc.2 + g));
    let positive_ratio = percent(pos, responses);
    let giveup_ratio = percent(gu, responses);
    let mut flags = Vec::new();
    if positive_ratio > POSITIVE_BIAS_ABOVE {
        flags.push(format!("positive ratio {positive_ratio:.1}% suggests a yes-bias"));
    }
    if positive_ratio < NEGATIVE_BIAS_BELOW {
        flags.push(format!("positive ratio {positive_ratio:.1}% suggests a no-bias"));
    }
    if giveup_ratio > GIVEUP_FLAG_ABOVE {
        flags.push(format!("give-up ratio {giveup_ratio:.1}% is high"));
    }
    if failed > 0 {
        flags.push(format!("{failed} trial(s) failed and count as give-ups"));
    }
    Ok(MetricsReport {
        model: model.to_string(),
        per_dimension,
        total: DimensionMetrics::from_counts(n, h, g),
        positive_ratio,
        giveup_ratio,
        decision_positive_ratio: percent(dpos, sorted.len()),
        decision_giveup_ratio: percent(dgu, sorted.len()),
        responses,
        failed_trials: failed,
        flags,
    })
}

/// Aligned text table: one row per model, accuracy per dimension, total,
/// positive and give-up ratios.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let mut header: Vec<String> = vec!["Model".into()];
    header.extend(Dimension::ALL.iter().map(|d| d.short_name().to_string()));
    header.extend(["Total", "Positive Ratio", "Give-up Ratio"].map(String::from));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone()];
            for d in Dimension::ALL {
                row.push(match r.per_dimension.get(&d) {
                    Some(m) => format!("{:.1}", m.accuracy),
                    None => "-".into(),
                });
            }
            row.push(format!("{:.1}", r.total.accuracy));
            row.push(format!("{:.1}", r.positive_ratio));
            row.push(format!("{:.1}", r.giveup_ratio));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap()
        })
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<w$}", c, w = widths[i]);
            } else {
                let _ = write!(s, "  {:>w$}", c, w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(out.trim_end().chars().count()));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    for r in reports {
        for f in &r.flags {
            let _ = writeln!(out, "! {}: {f}", r.model);
        }
    }
    out
}
