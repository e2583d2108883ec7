//! Parallel vs sequential batch work: gradient batches and corpus-wide
//! evaluation, the two data-parallel hot paths.
//!
//! `cargo bench -p credit-core` runs both paths from one build (the library
//! keeps an always-sequential twin of each entry point); building with
//! `--no-default-features` makes the default path sequential everywhere.

use criterion::{criterion_group, criterion_main, Criterion};

use credit_core::corpus::toy::{generate_toy_corpus, ToyGrammarSpec};
use credit_core::corpus::{expand_examples, Example, Vocabulary};
use credit_core::model::{CreditModel, DecodeOptions, ModelMeta};
use credit_core::par;
use credit_core::train::{sl_batch_grads, sl_batch_grads_seq};

fn setup() -> (CreditModel, Vec<Example>) {
    let spec = ToyGrammarSpec {
        n_train: 48,
        n_dev: 4,
        n_test: 4,
        ..ToyGrammarSpec::default()
    };
    let schema = spec.schema().unwrap();
    let (train, dev, test) = generate_toy_corpus(&spec).unwrap();
    let vocab = Vocabulary::build(&[&train, &dev, &test], &schema, 4096);
    let meta = ModelMeta { d_emb: 64, d_h: 32, ..ModelMeta::default() };
    let model = CreditModel::new(meta, schema.clone(), vocab, 11).unwrap();
    let examples = expand_examples(&train, &schema, &model.vocab, false).unwrap();
    (model, examples)
}

fn bench_batch_grads(c: &mut Criterion) {
    let (model, examples) = setup();
    let batch: Vec<&Example> = examples.iter().take(16).collect();
    let mut group = c.benchmark_group("sl_batch_grads");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| sl_batch_grads(&model, &batch, 0.2, 7, 0))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| sl_batch_grads_seq(&model, &batch, 0.2, 7, 0))
    });
    group.finish();
}

fn bench_eval_decode(c: &mut Criterion) {
    let (model, examples) = setup();
    let subset: Vec<Example> = examples.iter().take(24).cloned().collect();
    let opts = DecodeOptions::default();
    let mut group = c.benchmark_group("corpus_decode");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::ordered_map(&subset, |ex| model.predict(&ex.utterances, &opts)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::ordered_map_seq(&subset, |ex| model.predict(&ex.utterances, &opts)))
    });
    group.finish();
}

criterion_group!(benches, bench_batch_grads, bench_eval_decode);
criterion_main!(benches);
