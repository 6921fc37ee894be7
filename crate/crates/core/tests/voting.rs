use std::collections::BTreeSet;

use insets_core::load_parrott;
use insets_core::tagging::{vote_labels, VoteParams};
use proptest::prelude::*;

const TERMS: &[&str] = &[
    "bliss", "glee", "zeal", "thrill", "hope", "fury", "spite", "grief", "sorrow", "panic", "worry", "dread", "love",
];

fn proposals() -> impl Strategy<Value = Vec<(String, Vec<String>)>> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(TERMS), 0..=8), 1..=5).prop_map(|lists| {
        lists
            .into_iter()
            .enumerate()
            .map(|(i, ts)| (format!("m{i}"), ts.into_iter().map(String::from).collect()))
            .collect()
    })
}

proptest! {
    #[test]
    fn model_order_does_not_matter(per_model in proposals(), seed in any::<u64>(), rot in 0usize..5) {
        let tax = load_parrott();
        let params = VoteParams::for_models(per_model.len(), seed);
        let a = vote_labels("img", &per_model, &tax, &params);
        let mut shuffled = per_model.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let b = vote_labels("img", &shuffled, &tax, &params);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn labels_respect_threshold_quota_and_attribution(per_model in proposals(), seed in any::<u64>()) {
        let tax = load_parrott();
        let params = VoteParams::for_models(per_model.len(), seed);
        let out = vote_labels("img", &per_model, &tax, &params);
        let terms: BTreeSet<&str> = out.terms().collect();
        prop_assert_eq!(terms.len(), out.labels.len());
        for l in &out.labels {
            let cat = out.votes.iter().find(|v| v.secondary == l.secondary).unwrap();
            prop_assert!(cat.votes >= params.threshold);
            let cand = cat.candidates.iter().find(|c| c.term == l.term).unwrap();
            prop_assert!(cand.proposers.contains(&l.model));
            let proposer_lists = per_model.iter().find(|(m, _)| *m == l.model).unwrap();
            prop_assert!(proposer_lists.1.contains(&l.term));
        }
        for v in &out.votes {
            let chosen = out.labels.iter().filter(|l| l.secondary == v.secondary).count();
            prop_assert_eq!(chosen, v.quota.min(v.candidates.len()));
            prop_assert!(v.quota <= params.quota_cap);
        }
        prop_assert!(out.unplaced.iter().all(|t| t == "love"));
    }
}
