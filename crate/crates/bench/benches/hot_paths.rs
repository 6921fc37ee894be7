use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use insets_core::eval::{majority, parse_response};
use insets_core::refinement::fleiss_kappa;
use insets_core::tagging::{vote_labels, VoteParams};
use insets_core::{corpus, load_parrott};

fn voting(c: &mut Criterion) {
    let tax = load_parrott();
    let params = VoteParams::for_models(3, 7);
    let mut g = c.benchmark_group("vote_labels");
    for per_model in [4, 12, 32] {
        let props = insets_bench::proposals(&tax, 3, per_model, 1);
        g.bench_with_input(BenchmarkId::from_parameter(per_model), &props, |b, p| {
            b.iter(|| vote_labels("img", black_box(p), &tax, &params))
        });
    }
    g.finish();
}

fn similarity(c: &mut Criterion) {
    let tax = load_parrott();
    let mut g = c.benchmark_group("similarity_scan");
    for n in [200, 2000] {
        let index = insets_bench::similarity_index(&tax, n, 64, 3);
        g.bench_with_input(BenchmarkId::from_parameter(n), &index, |b, idx| {
            b.iter(|| {
                let a = idx.most_visual_similar_emotion_dissimilar(black_box("img00042")).ok();
                let e = idx.most_emotion_similar_visual_dissimilar(black_box("img00042")).ok();
                (a.map(str::len), e.map(str::len))
            })
        });
    }
    g.finish();
}

fn kappa(c: &mut Criterion) {
    let rows = insets_bench::kappa_rows(3164, 5);
    c.bench_function("fleiss_kappa/3164", |b| b.iter(|| fleiss_kappa(black_box(&rows), 5)));
}

fn sampling(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let statements = insets_bench::mock_statements(dir.path(), 120, 11);
    let mut g = c.benchmark_group("sample_benchmark");
    g.sample_size(20);
    for n in [64, 400] {
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| corpus::sample_benchmark(black_box(&statements), n, 11))
        });
    }
    g.finish();
}

fn parsing(c: &mut Criterion) {
    let replies = [
        "Correct. The statement matches the image.",
        "The statement is incorrect because the scene is calm.",
        "I cannot tell from this image.",
    ];
    c.bench_function("parse_and_majority", |b| {
        b.iter(|| {
            let d: Vec<_> = replies.iter().map(|r| parse_response(black_box(r))).collect();
            majority(&d)
        })
    });
}

criterion_group!(benches, voting, similarity, kappa, sampling, parsing);
criterion_main!(benches);
