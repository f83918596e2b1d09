use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use irc_core::config::{EncoderShape, TrainingConfig};
use irc_core::corpus::Example;
use irc_core::dataset_builder::TfidfIndex;
use irc_core::extraction::{gumbel_sample, SentenceScores};
use irc_core::inference::Setting;
use irc_core::model::IrcModel;
use irc_core::synthetic::{generate, SyntheticSpec};
use irc_core::trainer::{e2e_step, pretraining_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus() -> Vec<Example> {
    generate(&SyntheticSpec { examples: 32, ..SyntheticSpec::default() }).unwrap()
}

fn desk_model(train: &[Example]) -> IrcModel {
    let shape = EncoderShape { dim: 64, layers: 2, heads: 4, ff_dim: 128, max_positions: 128 };
    let mut t = TrainingConfig { batch_size: 8, ..TrainingConfig::default() };
    t.limits.max_sequence_length = 128;
    IrcModel::initialize(train, t, shape).unwrap()
}

fn bench_inference(c: &mut Criterion) {
    let data = corpus();
    let model = desk_model(&data);
    let opts = model.inference_options(Setting::CnaAware);
    c.bench_function("predict one example (rank, 3 pairs, grow)", |b| {
        b.iter(|| model.predict(&data[0], &opts).unwrap())
    });
}

fn bench_training_step(c: &mut Criterion) {
    let data = corpus();
    let model = desk_model(&data);
    let set = pretraining_set(&data, 1, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("e2e step on a gold-pair view", |b| b.iter(|| e2e_step(&model, &set[0], &mut rng).unwrap()));
}

fn bench_sampling(c: &mut Criterion) {
    let scores = SentenceScores::from_logits((0..40).collect(), (0..40).map(|i| (i as f64 - 20.0) / 5.0).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("gumbel sample over 40 sentences", |b| b.iter(|| gumbel_sample(&scores, 0.5, &mut rng)));
}

fn bench_tfidf(c: &mut Criterion) {
    let data = corpus();
    let paragraphs: Vec<_> = data.iter().flat_map(|e| e.passage.paragraphs().to_vec()).collect();
    c.bench_function("tf-idf index over 128 paragraphs", |b| {
        b.iter_batched(|| paragraphs.clone(), |p| TfidfIndex::build(p, 1), BatchSize::SmallInput)
    });
    let index = TfidfIndex::build(paragraphs, 1);
    c.bench_function("tf-idf best paragraph", |b| b.iter(|| index.best_paragraph(&data[3].query)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_inference, bench_training_step, bench_sampling, bench_tfidf
}
criterion_main!(benches);
