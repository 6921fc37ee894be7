#![allow(dead_code)]

use std::path::{Path, PathBuf};

use insets_core::Config;

/// Writes `n` distinct small PNG files under `dir`.
pub fn make_corpus(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n as u32 {
        let img = image::RgbImage::from_fn(12, 9, |x, y| {
            image::Rgb([((i * 37) % 256) as u8, (x * 20 + i) as u8, (y * 25 + i / 7) as u8])
        });
        img.save(dir.join(format!("img_{i:03}.png"))).unwrap();
    }
}

pub fn mock_config(corpus: &Path, out: &Path, seed: u64) -> Config {
    Config {
        seed,
        corpus_dir: corpus.to_path_buf(),
        out_dir: out.to_path_buf(),
        mock: true,
        backoff_ms: 0,
        ..Config::default()
    }
}

pub const ARTIFACTS: &[&str] = &[
    "images.jsonl",
    "extractions.jsonl",
    "labels.jsonl",
    "attachments.tsv",
    "quarantine.jsonl",
    "prototypes.jsonl",
    "statements.jsonl",
    "benchmark.jsonl",
];

pub fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

pub fn out_path(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Gateway over the configured mock profiles with `wrap` applied to the
/// shared mock backend.
pub fn gateway_with(
    cfg: &Config,
    journal: Option<&Path>,
    wrap: impl FnOnce(std::sync::Arc<dyn insets_core::gateway::ChatBackend>) -> std::sync::Arc<dyn insets_core::gateway::ChatBackend>,
) -> insets_core::Gateway {
    use insets_core::gateway::Journal;
    let tax = insets_core::load_parrott();
    let mut gw = insets_core::Gateway::new().with_backoff(std::time::Duration::ZERO);
    if let Some(p) = journal {
        gw = gw.with_journal(Journal::open(p).unwrap());
    }
    let backend = wrap(std::sync::Arc::new(insets_core::pipeline::mock_backend(cfg, &tax)));
    for profile in cfg.effective_models() {
        gw.register(profile, backend.clone()).unwrap();
    }
    gw
}

/// ingest, tag, construct, sample and evaluate (first eval model).
pub fn run_all(p: &insets_core::Pipeline) {
    p.ingest(None).unwrap();
    p.tag().unwrap();
    p.construct().unwrap();
    p.sample(Some(200)).unwrap();
    let model = p.cfg.eval.models[0].clone();
    p.evaluate(&model).unwrap();
}

pub const RUN_OUTPUTS: &[&str] = &[
    "images.jsonl",
    "extractions.jsonl",
    "labels.jsonl",
    "attachments.tsv",
    "quarantine.jsonl",
    "prototypes.jsonl",
    "statements.jsonl",
    "benchmark.jsonl",
    "responses.jsonl",
];
