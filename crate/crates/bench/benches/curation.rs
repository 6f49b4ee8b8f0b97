use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use instructforge_bench::{answer_texts, reward_matrix, rollouts, sentences};
use instructforge_core::curation::{build_dpo_pair, rip_filter, tally_votes};
use instructforge_core::dedup::{dedup_rouge_l, rouge_l_f1};
use instructforge_core::{answers_equivalent, parse_answer};

fn answers(c: &mut Criterion) {
    let texts = answer_texts(600);
    c.bench_function("parse_answer/600 mixed", |b| b.iter(|| texts.iter().filter_map(|t| parse_answer(black_box(t))).count()));

    let forms: Vec<_> = texts.iter().filter_map(|t| parse_answer(t)).collect();
    c.bench_function("answers_equivalent/600 pairs", |b| {
        b.iter(|| forms.iter().zip(forms.iter().rev()).filter(|(x, y)| answers_equivalent(x, y)).count())
    });
    let sym_a = parse_answer("\\frac{2(n-1)(n-2)}{n(n+1)}").unwrap();
    let sym_b = parse_answer("\\frac{2n^2-6n+4}{n^2+n}").unwrap();
    c.bench_function("answers_equivalent/symbolic", |b| b.iter(|| answers_equivalent(black_box(&sym_a), black_box(&sym_b))));
}

fn voting(c: &mut Criterion) {
    let mut group = c.benchmark_group("tally_votes");
    for k in [16usize, 64] {
        let samples = rollouts(k, 3);
        group.bench_with_input(BenchmarkId::from_parameter(k), &samples, |b, s| b.iter(|| tally_votes(black_box(s))));
    }
    group.finish();

    let samples = rollouts(64, 9);
    c.bench_function("build_dpo_pair/64", |b| b.iter(|| build_dpo_pair("r", "p", black_box(&samples), 0.2)));
}

fn rip(c: &mut Criterion) {
    let mut group = c.benchmark_group("rip_filter");
    for prompts in [1000usize, 5000] {
        let rewards = reward_matrix(prompts, 32, 11);
        group.bench_with_input(BenchmarkId::from_parameter(prompts), &rewards, |b, r| b.iter(|| rip_filter(black_box(r), 0.5)));
    }
    group.finish();
}

fn rouge(c: &mut Criterion) {
    let s = sentences(2, 40, 5);
    c.bench_function("rouge_l_f1/40 words", |b| b.iter(|| rouge_l_f1(black_box(&s[0]), black_box(&s[1]))));
    let cands = sentences(200, 12, 6);
    let refs = sentences(50, 12, 7);
    c.bench_function("dedup_rouge_l/200 vs 50", |b| b.iter(|| dedup_rouge_l(black_box(&cands), &refs, 0.7)));
}

criterion_group!(benches, answers, voting, rip, rouge);
criterion_main!(benches);
