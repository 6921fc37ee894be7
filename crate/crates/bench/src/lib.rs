//! Synthetic inputs shared by the benchmarks.

use std::collections::BTreeSet;
use std::path::Path;

use insets_core::similarity::SimilarityIndex;
use insets_core::{Config, Pipeline, Statement, Taxonomy};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `models` proposal lists of `per_model` tertiary names each.
pub fn proposals(tax: &Taxonomy, models: usize, per_model: usize, seed: u64) -> Vec<(String, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = tax.tertiary_names();
    (0..models)
        .map(|m| {
            let terms = (0..per_model).map(|_| names.choose(&mut rng).unwrap().to_string()).collect();
            (format!("model-{m}"), terms)
        })
        .collect()
}

/// Index of `n` random unit-ish vectors, each image carrying 1 to 4 tertiaries.
pub fn similarity_index(tax: &Taxonomy, n: usize, dim: usize, seed: u64) -> SimilarityIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = tax.tertiary_names();
    let items = (0..n)
        .map(|i| {
            let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k = rng.random_range(1..=4);
            let t: BTreeSet<String> = names.choose_multiple(&mut rng, k).map(|s| s.to_string()).collect();
            (format!("img{i:05}"), v, t)
        })
        .collect();
    SimilarityIndex::from_parts(items).unwrap()
}

/// Binary rating rows for `items` statements rated by five annotators.
pub fn kappa_rows(items: usize, seed: u64) -> Vec<[usize; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..items)
        .map(|_| {
            let agree = rng.random_range(0..=5);
            [agree, 5 - agree]
        })
        .collect()
}

/// Statements from a complete mock run over `images` generated pictures.
pub fn mock_statements(root: &Path, images: u32, seed: u64) -> Vec<Statement> {
    let corpus = root.join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    for i in 0..images {
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(i * 31 % 256) as u8, (x * 13 + i) as u8, (y * 7) as u8]));
        img.save(corpus.join(format!("b{i:04}.png"))).unwrap();
    }
    let cfg = Config {
        seed,
        corpus_dir: corpus,
        out_dir: root.join("run"),
        mock: true,
        backoff_ms: 0,
        ..Config::default()
    };
    let p = Pipeline::from_config(cfg).unwrap();
    p.ingest(None).unwrap();
    p.tag().unwrap();
    p.construct().unwrap();
    p.statements().unwrap()
}
