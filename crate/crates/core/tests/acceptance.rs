//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 when any
//! criterion fails. Run with `cargo test -p insets-core --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use insets_core::digest::rng_for;
use insets_core::gateway::{BackendError, ChatBackend, ChatRequest, ModelProfile};
use insets_core::pipeline::{self, Pipeline};
use insets_core::refinement::{self, fleiss_kappa};
use insets_core::similarity::{EmbeddingVector, SimilarityIndex};
use insets_core::statements::{
    classify_polarity_set, Construction, Dimension, PolarityClass, Provenance, Statement, StatementError, Strategy,
    TemplateId,
};
use insets_core::tagging::{vote_labels, VoteParams};
use insets_core::taxonomy::{AttachSource, AttachTarget, AttachmentMap, Level};
use insets_core::{load_parrott, Judgment, Polarity, Taxonomy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and bounds, fixed here.
const TAXONOMY_LOAD_BUDGET: Duration = Duration::from_secs(1);
const VOTING_CASES: usize = 1000;
const SIMILARITY_SEEDS: u64 = 50;
const SIMILARITY_ITEMS: usize = 200;
const REFINEMENT_TOLERANCE: f64 = 0.1;
const KAPPA_TOLERANCE: f64 = 1e-9;
const PIPELINE_BUDGET: Duration = Duration::from_secs(600);
const DENSITY_RANGE: (f64, f64) = (20.0, 32.0);
const BALANCE_TOLERANCE: f64 = 0.10;
const CORPUS_IMAGES: usize = 60;
const RUN_SEED: u64 = 11;

type Check = fn() -> Result<String, String>;

fn main() {
    let checks: [(&str, Check); 9] = [
        ("taxonomy fidelity", taxonomy_fidelity),
        ("voting oracle", voting_oracle),
        ("polarity classes", polarity_classes),
        ("ground-truth re-derivation", ground_truth_rederivation),
        ("similarity oracle", similarity_oracle),
        ("refinement numbers", refinement_numbers),
        ("harness arithmetic", harness_arithmetic),
        ("determinism and resumability", determinism_and_resume),
        ("statement density", statement_density),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(format!(
                "panicked: {}",
                e.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            ))
        });
        match result {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1)
            }
        }
    }
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- taxonomy

fn fixture(name: &str) -> String {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn table_triples() -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for line in fixture("parrott_table.txt").lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('|').map(str::trim).collect();
        for t in cols[2].split(',') {
            out.insert((cols[0].to_lowercase(), cols[1].to_lowercase(), t.trim().to_lowercase()));
        }
    }
    out
}

fn taxonomy_fidelity() -> Result<String, String> {
    let start = Instant::now();
    let tax = load_parrott();
    let elapsed = start.elapsed();

    let mut loaded = BTreeSet::new();
    for n in tax.nodes().iter().filter(|n| n.level == Level::Tertiary) {
        let sec = tax.node(n.parent.unwrap());
        let pri = tax.node(sec.parent.unwrap());
        loaded.insert((pri.name.clone(), sec.name.clone(), n.name.clone()));
    }
    let expected = table_triples();
    let missing: Vec<_> = expected.difference(&loaded).collect();
    let extra: Vec<_> = loaded.difference(&expected).collect();
    let counts = (
        tax.count(Level::Primary),
        tax.count(Level::Secondary),
        tax.count(Level::Tertiary),
    );
    let detail = format!(
        "{}/{}/{} nodes, table diff: {} missing, {} extra, load {:?}",
        counts.0,
        counts.1,
        counts.2,
        missing.len(),
        extra.len(),
        elapsed
    );
    ensure(missing.is_empty() && extra.is_empty(), || format!("{detail}; missing {missing:?} extra {extra:?}"))?;
    ensure(elapsed < TAXONOMY_LOAD_BUDGET, || format!("{detail}; over budget"))?;
    ensure(counts == (6, 25, 113), || {
        format!("{detail}; expected 6/25/113 (the table itself lists {} tertiary entries)", expected.len())
    })?;
    Ok(detail)
}

// ------------------------------------------------------------------ voting

/// Vocabulary for random proposals: tertiaries sharing a few secondaries,
/// open-vocabulary leaves, and names that have no tertiary ancestor.
const VOTE_TERMS: &[&str] = &[
    "bliss", "glee", "delight", "zeal", "thrill", "hope", "eagerness", "fury", "hatred", "spite", "grief", "sorrow",
    "panic", "terror", "worry", "dread", "wistfulness", "serenity", "dismay", "love", "surprise", "sadness",
];

fn vote_pom() -> Taxonomy {
    let mut map = AttachmentMap::default();
    map.insert("wistfulness", AttachTarget::Tertiary("longing".into()), AttachSource::ManualOverride);
    map.insert("serenity", AttachTarget::Tertiary("relief".into()), AttachSource::ManualOverride);
    load_parrott().extend(&map).unwrap()
}

#[derive(Debug, PartialEq)]
struct OracleLabel {
    term: String,
    tertiary: String,
    secondary: String,
    primary: String,
    polarity: Polarity,
    model: String,
}

struct Proposal {
    proposers: BTreeSet<String>,
    first_positions: Vec<usize>,
}

/// a strictly outranks b: more proposers, then lower mean first position,
/// then alphabetical.
fn outranks(ta: &str, a: &Proposal, tb: &str, b: &Proposal) -> bool {
    let (na, nb) = (a.proposers.len(), b.proposers.len());
    if na != nb {
        return na > nb;
    }
    let sa: usize = a.first_positions.iter().sum();
    let sb: usize = b.first_positions.iter().sum();
    // sa/na < sb/nb
    if sa * nb != sb * na {
        return sa * nb < sb * na;
    }
    ta < tb
}

fn brute_force_vote(
    image: &str,
    per_model: &[(String, Vec<String>)],
    pom: &Taxonomy,
    tau: usize,
    step: usize,
    cap: usize,
    seed: u64,
) -> (Vec<OracleLabel>, BTreeSet<String>, BTreeMap<String, usize>) {
    let mut props: BTreeMap<String, Proposal> = BTreeMap::new();
    let mut unplaced = BTreeSet::new();
    for (model, terms) in per_model {
        for (pos, term) in terms.iter().enumerate() {
            if terms[..pos].contains(term) {
                continue;
            }
            let path = pom.path(term).unwrap();
            let placed = matches!(pom.level_of(term).unwrap(), Level::Tertiary | Level::OpenVocab);
            if !placed {
                unplaced.insert(term.clone());
                continue;
            }
            assert!(path.len() >= 3);
            let p = props.entry(term.clone()).or_insert(Proposal {
                proposers: BTreeSet::new(),
                first_positions: Vec::new(),
            });
            p.proposers.insert(model.clone());
            p.first_positions.push(pos);
        }
    }
    let secondary = |t: &str| {
        let path = pom.path(t).unwrap();
        path[path.len() - 2].to_string()
    };
    let mut groups: BTreeMap<String, Vec<&String>> = BTreeMap::new();
    for t in props.keys() {
        groups.entry(secondary(t)).or_default().push(t);
    }
    let mut votes_of = BTreeMap::new();
    let mut picked: Vec<(usize, String, Vec<String>)> = Vec::new();
    for (sec, terms) in &groups {
        let votes: BTreeSet<&String> = terms.iter().flat_map(|t| props[*t].proposers.iter()).collect();
        let votes = votes.len();
        votes_of.insert(sec.clone(), votes);
        let quota = if votes < tau { 0 } else { cap.min(1 + (votes - tau) / step) };
        let size = quota.min(terms.len());
        // every subset of the right size whose members all outrank every
        // non-member; exactly one exists
        let mut winners: Vec<Vec<String>> = Vec::new();
        for mask in 0u32..(1 << terms.len()) {
            if mask.count_ones() as usize != size {
                continue;
            }
            let inside: Vec<&String> = (0..terms.len()).filter(|i| mask & (1 << i) != 0).map(|i| terms[i]).collect();
            let outside: Vec<&String> = (0..terms.len()).filter(|i| mask & (1 << i) == 0).map(|i| terms[i]).collect();
            if inside
                .iter()
                .all(|a| outside.iter().all(|b| outranks(a, &props[*a], b, &props[*b])))
            {
                let mut chosen: Vec<String> = inside.iter().map(|s| s.to_string()).collect();
                chosen.sort_by(|a, b| {
                    if outranks(a, &props[a], b, &props[b]) {
                        std::cmp::Ordering::Less
                    } else {
                        std::cmp::Ordering::Greater
                    }
                });
                winners.push(chosen);
            }
        }
        assert_eq!(winners.len(), 1, "selection is unique");
        picked.push((votes, sec.clone(), winners.pop().unwrap()));
    }
    picked.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut labels = Vec::new();
    for (_, sec, terms) in picked {
        for term in terms {
            let path = pom.path(&term).unwrap();
            let primary = path.last().unwrap().to_string();
            let polarity = if ["joy", "love", "surprise"].contains(&primary.as_str()) {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let proposers: Vec<&String> = props[&term].proposers.iter().collect();
            let mut rng = rng_for(seed, &["attribution", image, &term]);
            let model = proposers[rng.random_range(0..proposers.len())].clone();
            labels.push(OracleLabel {
                tertiary: path[path.len() - 3].to_string(),
                secondary: sec.clone(),
                primary,
                polarity,
                model,
                term,
            });
        }
    }
    (labels, unplaced, votes_of)
}

fn voting_oracle() -> Result<String, String> {
    let pom = vote_pom();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut with_labels = 0;
    for case in 0..VOTING_CASES {
        let models = rng.random_range(1..=5usize);
        let mut per_model: Vec<(String, Vec<String>)> = (0..models)
            .map(|m| {
                let n = rng.random_range(0..=8usize);
                let terms = (0..n)
                    .map(|_| VOTE_TERMS[rng.random_range(0..VOTE_TERMS.len())].to_string())
                    .collect();
                (format!("model-{m}"), terms)
            })
            .collect();
        per_model.shuffle(&mut rng);
        let tau = rng.random_range(1..=models);
        let step = rng.random_range(1..=3usize);
        let cap = rng.random_range(1..=3usize);
        let seed = rng.random::<u64>();
        let image = format!("img{case}");
        let params = VoteParams {
            threshold: tau,
            quota_step: step,
            quota_cap: cap,
            seed,
        };
        let got = vote_labels(&image, &per_model, &pom, &params);
        let (want, unplaced, votes) = brute_force_vote(&image, &per_model, &pom, tau, step, cap, seed);
        let got_labels: Vec<OracleLabel> = got
            .labels
            .iter()
            .map(|l| OracleLabel {
                term: l.term.clone(),
                tertiary: l.tertiary.clone(),
                secondary: l.secondary.clone(),
                primary: l.primary.clone(),
                polarity: l.polarity,
                model: l.model.clone(),
            })
            .collect();
        let got_votes: BTreeMap<String, usize> = got.votes.iter().map(|v| (v.secondary.clone(), v.votes)).collect();
        let got_unplaced: BTreeSet<String> = got.unplaced.iter().cloned().collect();
        ensure(got_labels == want, || {
            format!("case {case}: labels differ\n  input {per_model:?} tau={tau} step={step} cap={cap}\n  got {got_labels:?}\n  want {want:?}")
        })?;
        ensure(got_votes == votes && got_unplaced == unplaced, || format!("case {case}: vote diagnostics differ"))?;
        with_labels += usize::from(!want.is_empty());
    }
    Ok(format!("{VOTING_CASES} random cases equal the brute force ({with_labels} with labels)"))
}

// ---------------------------------------------------------------- polarity

const POLARITY_TERMS: [(&str, bool); 10] = [
    ("adoration", true),
    ("fury", false),
    ("bliss", true),
    ("grief", false),
    ("hope", true),
    ("panic", false),
    ("relief", true),
    ("guilt", false),
    ("amazement", true),
    ("loneliness", false),
];

fn polarity_classes() -> Result<String, String> {
    let tax = load_parrott();
    let mut checked = 0;
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    ensure(
        matches!(classify_polarity_set(std::iter::empty(), &tax), Err(StatementError::EmptyLabelSet)),
        || "empty set must be rejected".into(),
    )?;
    for mask in 1u32..(1 << POLARITY_TERMS.len()) {
        if mask.count_ones() > 3 {
            continue;
        }
        let subset: Vec<(&str, bool)> = (0..POLARITY_TERMS.len())
            .filter(|i| mask & (1 << i) != 0)
            .map(|i| POLARITY_TERMS[i])
            .collect();
        let want = if subset.iter().all(|(_, p)| *p) {
            PolarityClass::FullyPositive
        } else if subset.iter().all(|(_, p)| !*p) {
            PolarityClass::FullyNegative
        } else {
            PolarityClass::Mixed
        };
        let got = classify_polarity_set(subset.iter().map(|(t, _)| *t), &tax).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("{subset:?}: got {got:?}, want {want:?}"))?;
        *per_class.entry(format!("{want:?}")).or_default() += 1;
        checked += 1;
    }
    Ok(format!("{checked} non-empty subsets match {per_class:?}"))
}

// ------------------------------------------------------- shared mock runs

struct Run {
    _tmp: tempfile::TempDir,
    corpus: PathBuf,
    out: PathBuf,
    elapsed: Duration,
}

fn corpus_dir() -> &'static (tempfile::TempDir, PathBuf) {
    static CORPUS: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    CORPUS.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("images");
        common::make_corpus(&dir, CORPUS_IMAGES);
        (tmp, dir)
    })
}

fn full_run() -> Run {
    let corpus = corpus_dir().1.clone();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let start = Instant::now();
    let p = Pipeline::from_config(common::mock_config(&corpus, &out, RUN_SEED)).unwrap();
    common::run_all(&p);
    Run {
        _tmp: tmp,
        corpus,
        out,
        elapsed: start.elapsed(),
    }
}

fn reference_run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(full_run)
}

fn open(run_out: &Path) -> Pipeline {
    Pipeline::from_config(common::mock_config(&corpus_dir().1, run_out, RUN_SEED)).unwrap()
}

// ----------------------------------------------------------- ground truth

fn template_fixtures() -> BTreeMap<u8, String> {
    fixture("statement_templates.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (n, text) = l.split_once('\t').unwrap();
            (n.parse().unwrap(), text.to_string())
        })
        .collect()
}

fn expected_text(s: &Statement, fx: &BTreeMap<u8, String>) -> String {
    let t = &fx[&s.provenance.template.number()];
    match &s.provenance.construction {
        Construction::Polarity { .. } => t.clone(),
        Construction::Interpretation { label, interpretation, .. } => {
            format!("{} {}", interpretation.text, t.replace("[emotion]", &label.term))
        }
        Construction::Context { context, emotion, .. } => {
            t.replace("[context]", &context.text).replace("[emotion]", &emotion.term)
        }
        Construction::Subjectivity {
            character,
            preferred,
            other,
            ..
        } => t
            .replace("[role]", &character.text)
            .replace("[emotion1]", &preferred.term)
            .replace("[emotion2]", &other.term),
    }
}

fn ground_truth_rederivation() -> Result<String, String> {
    let run = reference_run();
    let p = open(&run.out);
    let statements = p.statements().map_err(|e| e.to_string())?;
    let pom = p.pom().map_err(|e| e.to_string())?;
    let fx = template_fixtures();
    ensure(fx.len() == 6, || format!("expected 6 template fixtures, found {}", fx.len()))?;

    let polarity = |term: &str| pom.polarity_of(term).map_err(|e| e.to_string());
    let (mut rederived, mut opposite_pairs, mut rendered) = (0, 0, 0);
    for s in &statements {
        // independent re-derivation from the construction record
        let gt = match &s.provenance.construction {
            Construction::Polarity { labels, .. } => {
                let pos = labels.iter().any(|l| polarity(&l.term) == Ok(Polarity::Positive));
                let neg = labels.iter().any(|l| polarity(&l.term) == Ok(Polarity::Negative));
                let want = match (pos, neg) {
                    (true, false) => TemplateId::PositivePolarity,
                    (false, true) => TemplateId::NegativePolarity,
                    _ => TemplateId::MixedPolarity,
                };
                want == s.provenance.template
            }
            Construction::Interpretation { label, interpretation, .. } => {
                interpretation.image_id == s.image_id && interpretation.label.term == label.term
            }
            Construction::Context { context, emotion, .. } => {
                context.image_id == s.image_id && context.label.term == emotion.term
            }
            Construction::Subjectivity { character, preferred, .. } => {
                character.image_id == s.image_id && character.label.term == preferred.term
            }
        };
        ensure(gt == s.ground_truth, || format!("statement {} stores {} but re-derives {gt}", s.id, s.ground_truth))?;
        rederived += 1;

        let opposite = |a: &str, b: &str| -> Result<bool, String> { Ok(polarity(a)? != polarity(b)?) };
        let pair = match &s.provenance.construction {
            Construction::Interpretation {
                strategy: Strategy::IntraSwap,
                label,
                interpretation,
            } => Some((label.term.clone(), interpretation.label.term.clone())),
            Construction::Context {
                strategy: Strategy::IntraSwap,
                label,
                context,
                ..
            } => Some((label.term.clone(), context.label.term.clone())),
            Construction::Context {
                strategy: Strategy::FlipPolarity,
                label,
                emotion,
                ..
            } => Some((label.term.clone(), emotion.term.clone())),
            Construction::Subjectivity { preferred, other, .. } => Some((preferred.term.clone(), other.term.clone())),
            _ => None,
        };
        if let Some((a, b)) = pair {
            ensure(opposite(&a, &b)?, || format!("statement {} pairs `{a}` and `{b}` of one polarity", s.id))?;
            opposite_pairs += 1;
        }

        let want = expected_text(s, &fx);
        ensure(want.as_bytes() == s.text.as_bytes(), || {
            format!("statement {} renders\n  {:?}\nfixture gives\n  {want:?}", s.id, s.text)
        })?;
        rendered += 1;
    }
    ensure(!statements.is_empty(), || "no statements constructed".into())?;
    Ok(format!(
        "{rederived}/{} ground-truth bits re-derived, {opposite_pairs} swap/flip pairs opposite, {rendered} texts byte-equal to templates",
        statements.len()
    ))
}

// -------------------------------------------------------------- similarity

fn exhaustive(items: &[(String, Vec<f64>, BTreeSet<String>)], q: usize, share: bool, maximize: bool) -> Option<String> {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut scored: Vec<(f64, &str)> = items
        .iter()
        .enumerate()
        .filter(|(i, it)| *i != q && share != items[q].2.is_disjoint(&it.2))
        .map(|(_, it)| (cos(&items[q].1, &it.1), it.0.as_str()))
        .collect();
    // best score first, smallest id among equals
    scored.sort_by(|a, b| {
        let ord = if maximize { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
        ord.then_with(|| a.1.cmp(b.1))
    });
    scored.first().map(|s| s.1.to_string())
}

fn similarity_oracle() -> Result<String, String> {
    const EMOTIONS: &[&str] = &["bliss", "fury", "grief", "hope", "panic", "relief", "longing", "dread"];
    let mut queries = 0;
    let mut not_found = 0;
    for seed in 0..SIMILARITY_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<(String, Vec<f64>, BTreeSet<String>)> = (0..SIMILARITY_ITEMS)
            .map(|i| {
                let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
                let k = rng.random_range(1..=2);
                let tags = (0..k)
                    .map(|_| EMOTIONS[rng.random_range(0..EMOTIONS.len())].to_string())
                    .collect();
                (format!("im{:04}", (i * 7919) % 10007), v, tags)
            })
            .collect();
        let normalized: Vec<(String, Vec<f64>, BTreeSet<String>)> = raw
            .iter()
            .map(|(id, v, t)| {
                let e = EmbeddingVector::new(id.clone(), v.clone()).unwrap();
                (id.clone(), e.values, t.clone())
            })
            .collect();
        let index = SimilarityIndex::from_parts(normalized).map_err(|e| e.to_string())?;
        for (q, item) in raw.iter().enumerate() {
            let got_gap = index.most_visual_similar_emotion_dissimilar(&item.0).ok().map(str::to_string);
            let got_trigger = index.most_emotion_similar_visual_dissimilar(&item.0).ok().map(str::to_string);
            let want_gap = exhaustive(&raw, q, false, true);
            let want_trigger = exhaustive(&raw, q, true, false);
            ensure(got_gap == want_gap, || format!("seed {seed} {}: gap {got_gap:?} vs {want_gap:?}", item.0))?;
            ensure(got_trigger == want_trigger, || {
                format!("seed {seed} {}: trigger {got_trigger:?} vs {want_trigger:?}", item.0)
            })?;
            not_found += usize::from(want_gap.is_none()) + usize::from(want_trigger.is_none());
            queries += 2;
        }
    }
    Ok(format!(
        "{queries} retrievals over {SIMILARITY_SEEDS} seeds x {SIMILARITY_ITEMS} embeddings equal the exhaustive scan ({not_found} with no candidate)"
    ))
}

// -------------------------------------------------------------- refinement

fn polarity_statement(id: String) -> Statement {
    Statement {
        id,
        image_id: "img".into(),
        dimension: Dimension::SentimentPolarity,
        text: "t".into(),
        ground_truth: true,
        provenance: Provenance {
            template: TemplateId::PositivePolarity,
            seed: 0,
            construction: Construction::Polarity {
                class: PolarityClass::FullyPositive,
                labels: Vec::new(),
            },
        },
        rectified: false,
    }
}

fn refinement_numbers() -> Result<String, String> {
    // Total column of the published agreement table, in percent, for 5/5 down to 0/5.
    let published = [54.0, 36.6, 1.4, 1.1, 3.1, 3.8];
    let pairs = 3164usize;
    let counts: Vec<usize> = published.iter().map(|p| (p * pairs as f64 / 100.0).round() as usize).collect();
    // frozen from the line above
    assert_eq!(counts, [1709, 1158, 44, 35, 98, 120]);
    assert_eq!(counts.iter().sum::<usize>(), pairs);

    let mut statements = Vec::new();
    let mut judgments = Vec::new();
    let mut n = 0;
    for (i, &c) in counts.iter().enumerate() {
        let agree = 5 - i;
        for _ in 0..c {
            let id = format!("s{n:05}");
            n += 1;
            for a in 0..5 {
                judgments.push(Judgment {
                    statement_id: id.clone(),
                    annotator_id: format!("ann{a}"),
                    verdict: a < agree,
                    timestamp_ms: n as u64,
                });
            }
            statements.push(polarity_statement(id));
        }
    }
    let report = refinement::agreement_report(&judgments, &statements, None).map_err(|e| e.to_string())?;
    let t = &report.total;
    for (name, got, want) in [
        ("confirmed", t.confirmed, 90.6),
        ("rectified", t.rectified, 6.9),
        ("ambiguous", t.ambiguous, 2.5),
    ] {
        ensure((got - want).abs() <= REFINEMENT_TOLERANCE, || format!("{name} {got:.3}% vs {want}%"))?;
    }

    // Four items, five raters, two categories. By hand:
    // per-item agreement 1, 0.6, 0.4, 1 -> mean 0.75
    // category shares 11/20 and 9/20 -> chance 202/400 = 0.505
    // kappa = (0.75 - 0.505) / (1 - 0.505) = 49/99
    let rows = [[5, 0], [4, 1], [2, 3], [0, 5]];
    let k = fleiss_kappa(&rows, 5).map_err(|e| e.to_string())?;
    ensure((k - 49.0 / 99.0).abs() < KAPPA_TOLERANCE, || format!("4-item kappa {k} vs 49/99"))?;
    // Three categories, four items, three raters. By hand:
    // per-item agreement 1, 1/3, 1/3, 1/3 -> mean 1/2
    // category totals 5, 4, 3 of 12 -> chance (25+16+9)/144 = 50/144
    // kappa = (72/144 - 50/144) / (94/144) = 11/47
    let rows3 = [[3, 0, 0], [2, 1, 0], [0, 2, 1]];
    let rows3: Vec<[usize; 3]> = rows3.into_iter().chain([[0, 1, 2]]).collect();
    let k3 = fleiss_kappa(&rows3, 3).map_err(|e| e.to_string())?;
    ensure((k3 - 11.0 / 47.0).abs() < KAPPA_TOLERANCE, || format!("3-category kappa {k3} vs 11/47"))?;
    for perfect in [vec![[5, 0], [0, 5], [5, 0]], vec![[5, 0], [5, 0]]] {
        let k = fleiss_kappa(&perfect, 5).map_err(|e| e.to_string())?;
        ensure(k == 1.0, || format!("perfect agreement gives {k}"))?;
    }
    Ok(format!(
        "confirmed {:.2}%, rectified {:.2}%, ambiguous {:.2}%; kappa {k:.12} = 49/99; perfect agreement 1.0 (binary kappa on this histogram: {:.3})",
        t.confirmed,
        t.rectified,
        t.ambiguous,
        t.kappa.unwrap_or(f64::NAN)
    ))
}

// ----------------------------------------------------------------- harness

/// Answers "Correct" to every evaluation prompt.
fn always_correct(_: &ModelProfile, _: &ChatRequest) -> Result<String, BackendError> {
    Ok("Correct".into())
}

#[derive(serde::Deserialize)]
struct RawTrial {
    model: String,
    dimension: Dimension,
    ground_truth: bool,
    responses: Vec<String>,
}

#[derive(Debug, Default, PartialEq)]
struct Recount {
    trials: usize,
    hits: usize,
    giveups: usize,
    responses: usize,
    correct_responses: usize,
    giveup_responses: usize,
    per_dimension: BTreeMap<Dimension, (usize, usize, usize)>,
}

fn word(text: &str) -> i8 {
    let t = text.to_ascii_lowercase();
    if t.contains("incorrect") {
        -1
    } else if t.contains("correct") {
        1
    } else {
        0
    }
}

fn recount(lines: &str) -> BTreeMap<String, Recount> {
    let mut out: BTreeMap<String, Recount> = BTreeMap::new();
    for line in lines.lines() {
        let t: RawTrial = serde_json::from_str(line).unwrap();
        let r = out.entry(t.model.clone()).or_default();
        let words: Vec<i8> = t.responses.iter().map(|x| word(x)).collect();
        let c = words.iter().filter(|w| **w == 1).count();
        let i = words.iter().filter(|w| **w == -1).count();
        let g = words.len() - c - i;
        // a unique most frequent word decides; any tie gives up
        let decision = if c > i && c > g {
            1
        } else if i > c && i > g {
            -1
        } else {
            0
        };
        let hit = (decision == 1 && t.ground_truth) || (decision == -1 && !t.ground_truth);
        r.trials += 1;
        r.hits += usize::from(hit);
        r.giveups += usize::from(decision == 0);
        r.responses += words.len();
        r.correct_responses += c;
        r.giveup_responses += g;
        let d = r.per_dimension.entry(t.dimension).or_default();
        d.0 += 1;
        d.1 += usize::from(hit);
        d.2 += usize::from(decision == 0);
    }
    out
}

fn pct(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

fn harness_arithmetic() -> Result<String, String> {
    let run = reference_run();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    for f in common::RUN_OUTPUTS.iter().chain(&["manifest.json"]) {
        std::fs::copy(run.out.join(f), out.join(f)).unwrap();
    }
    let cfg = common::mock_config(&run.corpus, &out, RUN_SEED);
    let bench = open(&run.out).evaluation_set().map_err(|e| e.to_string())?.0;

    // (image payload digest, statement text) -> ground truth
    let records: Vec<insets_core::ImageRecord> =
        insets_core::corpus::read_jsonl(&run.out.join(pipeline::IMAGES), insets_core::corpus::IMAGES_SCHEMA)
            .map_err(|e| e.to_string())?;
    let images: HashMap<String, String> = records
        .into_iter()
        .map(|r| (r.image_id.clone(), r.load_payload().unwrap().digest()))
        .collect();
    let truth: Arc<HashMap<(String, String), bool>> = Arc::new(
        bench
            .iter()
            .map(|s| ((images[&s.image_id].clone(), s.text.clone()), s.ground_truth))
            .collect(),
    );
    let oracle = move |_: &ModelProfile, req: &ChatRequest| -> Result<String, BackendError> {
        let text = req.user_text.split_once("\n\nStatement: ").map(|x| x.1).unwrap_or_default();
        let key = (req.image_digest().unwrap_or_default(), text.to_string());
        match truth.get(&key) {
            Some(true) => Ok("Correct.".into()),
            Some(false) => Ok("Incorrect.".into()),
            None => Err(BackendError::Malformed("unknown statement".into())),
        }
    };
    let mut gw = common::gateway_with(&cfg, None, |b| b);
    gw.register(ModelProfile::mock("scripted-correct"), Arc::new(always_correct)).unwrap();
    gw.register(ModelProfile::mock("scripted-oracle"), Arc::new(oracle)).unwrap();
    let p = Pipeline::with_gateway(cfg, gw);

    let yes = p.evaluate("scripted-correct").map_err(|e| e.to_string())?;
    let truth_count = bench.iter().filter(|s| s.ground_truth).count();
    ensure(yes.positive_ratio == 100.0 && yes.giveup_ratio == 0.0, || {
        format!("always-correct: positive {} giveup {}", yes.positive_ratio, yes.giveup_ratio)
    })?;
    ensure(yes.total.accuracy == pct(truth_count, bench.len()), || {
        format!("always-correct accuracy {} vs {truth_count}/{}", yes.total.accuracy, bench.len())
    })?;
    let gt = p.evaluate("scripted-oracle").map_err(|e| e.to_string())?;
    ensure(gt.total.accuracy == 100.0, || format!("ground-truth responder accuracy {}", gt.total.accuracy))?;

    let text = std::fs::read_to_string(p.path(pipeline::RESPONSES)).unwrap();
    let counts = recount(&text);
    let reports = p.report().map_err(|e| e.to_string())?;
    ensure(reports.len() == counts.len(), || "model count differs".into())?;
    for r in &reports {
        let c = &counts[&r.model];
        let same = r.total.trials == c.trials
            && r.total.accuracy == pct(c.hits, c.trials)
            && r.total.giveup_rate == pct(c.giveups, c.trials)
            && r.total.error_rate == pct(c.trials - c.hits - c.giveups, c.trials)
            && r.positive_ratio == pct(c.correct_responses, c.responses)
            && r.giveup_ratio == pct(c.giveup_responses, c.responses)
            && r.responses == c.responses
            && r.per_dimension.len() == c.per_dimension.len()
            && c.per_dimension.iter().all(|(d, &(n, h, g))| {
                let m = &r.per_dimension[d];
                m.trials == n && m.accuracy == pct(h, n) && m.giveup_rate == pct(g, n)
            });
        ensure(same, || format!("{}: report {r:?} disagrees with recount {c:?}", r.model))?;
    }
    Ok(format!(
        "always-correct accuracy {:.2}% = {truth_count}/{}, oracle 100%, {} model reports equal the recount",
        yes.total.accuracy,
        bench.len(),
        reports.len()
    ))
}

// ------------------------------------------------------------- determinism

/// Panics once `limit` backend calls have been made, standing in for a
/// process killed mid-stage.
struct Killer {
    inner: Arc<dyn ChatBackend>,
    calls: Arc<AtomicUsize>,
    limit: usize,
}

impl ChatBackend for Killer {
    fn send(&self, profile: &ModelProfile, request: &ChatRequest) -> Result<String, BackendError> {
        if self.calls.fetch_add(1, Ordering::SeqCst) >= self.limit {
            panic!("killed");
        }
        self.inner.send(profile, request)
    }
}

fn counting(calls: Arc<AtomicUsize>, limit: usize) -> impl FnOnce(Arc<dyn ChatBackend>) -> Arc<dyn ChatBackend> {
    move |inner| Arc::new(Killer { inner, calls, limit })
}

fn compare_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut bytes = 0;
    for f in common::RUN_OUTPUTS {
        let x = common::read(a, f);
        let y = common::read(b, f);
        ensure(x == y, || format!("{f} differs between runs"))?;
        bytes += x.len();
    }
    Ok(bytes)
}

fn determinism_and_resume() -> Result<String, String> {
    let first = reference_run();
    let second = full_run();
    let bytes = compare_outputs(&first.out, &second.out)?;

    // Count backend calls of an uninterrupted tag stage.
    let corpus = &corpus_dir().1;
    let tmp = tempfile::tempdir().unwrap();
    let probe = tmp.path().join("probe");
    let cfg = common::mock_config(corpus, &probe, RUN_SEED);
    let full_calls = Arc::new(AtomicUsize::new(0));
    let gw = common::gateway_with(&cfg, None, counting(full_calls.clone(), usize::MAX));
    let p = Pipeline::with_gateway(cfg, gw);
    p.ingest(None).unwrap();
    p.tag().unwrap();
    let full_calls = full_calls.load(Ordering::SeqCst);

    // Kill the tag stage half way, tear the journal's last line, resume.
    let out = tmp.path().join("killed");
    let cfg = common::mock_config(corpus, &out, RUN_SEED);
    let journal = out.join(pipeline::JOURNAL);
    let before = Arc::new(AtomicUsize::new(0));
    {
        let gw = common::gateway_with(&cfg, Some(&journal), counting(before.clone(), full_calls / 2));
        let p = Pipeline::with_gateway(cfg.clone(), gw);
        p.ingest(None).unwrap();
        let hook = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let killed = catch_unwind(AssertUnwindSafe(|| p.tag()));
        std::panic::set_hook(hook);
        ensure(killed.is_err(), || "tag was expected to be interrupted".into())?;
        ensure(!out.join(pipeline::LABELS).exists(), || "interrupted tag left labels behind".into())?;
    }
    let journaled = std::fs::read_to_string(&journal).unwrap().lines().count();
    {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new().append(true).open(&journal).unwrap();
        f.write_all(br#"{"schema":"insets.journal/1","digest":"abc"#).unwrap();
    }
    let after = Arc::new(AtomicUsize::new(0));
    let gw = common::gateway_with(&cfg, Some(&journal), counting(after.clone(), usize::MAX));
    let p = Pipeline::with_gateway(cfg, gw);
    p.tag().unwrap();
    let resumed_calls = after.load(Ordering::SeqCst);
    p.construct().unwrap();
    p.sample(Some(200)).unwrap();
    let model = p.cfg.eval.models[0].clone();
    p.evaluate(&model).unwrap();
    ensure(journaled > 0, || "nothing was journaled before the interruption".into())?;
    ensure(resumed_calls == full_calls - journaled, || {
        format!("resume made {resumed_calls} calls; expected {full_calls} - {journaled} journaled")
    })?;
    compare_outputs(&first.out, &out).map_err(|e| format!("resumed run: {e}"))?;

    ensure(first.elapsed < PIPELINE_BUDGET, || format!("pipeline took {:?}", first.elapsed))?;
    Ok(format!(
        "two runs byte-identical ({bytes} bytes); tag killed after {journaled} of {full_calls} calls, resume made the other {resumed_calls} and matched; full run {:.1?}",
        first.elapsed
    ))
}

// ----------------------------------------------------------------- density

fn statement_density() -> Result<String, String> {
    let run = reference_run();
    let p = open(&run.out);
    let statements = p.statements().map_err(|e| e.to_string())?;
    let labels: Vec<insets_core::ImageLabels> =
        insets_core::corpus::read_jsonl(&p.path(pipeline::LABELS), insets_core::corpus::LABELS_SCHEMA)
            .map_err(|e| e.to_string())?;
    let labeled = labels.iter().filter(|l| !l.labels.is_empty()).count();
    let per_image = statements.len() as f64 / labeled as f64;
    ensure((DENSITY_RANGE.0..=DENSITY_RANGE.1).contains(&per_image), || {
        format!("{per_image:.2} statements per labeled image")
    })?;
    let mut balance = Vec::new();
    for d in [
        Dimension::EmotionInterpretation,
        Dimension::SceneContext,
        Dimension::PerceptionSubjectivity,
    ] {
        let t = statements.iter().filter(|s| s.dimension == d && s.ground_truth).count();
        let f = statements.iter().filter(|s| s.dimension == d && !s.ground_truth).count();
        let ratio = t as f64 / f as f64;
        ensure((1.0 - BALANCE_TOLERANCE..=1.0 + BALANCE_TOLERANCE).contains(&ratio), || {
            format!("{d}: {t} correct vs {f} incorrect")
        })?;
        balance.push(format!("{} {t}:{f}", d.short_name()));
    }
    Ok(format!(
        "{per_image:.2} statements per image over {labeled} labeled images; {}",
        balance.join(", ")
    ))
}
