use irc_core::config::{EncoderShape, TrainingConfig};
use irc_core::corpus::{AnswerLabel, Example};
use irc_core::extraction::rationale_loss;
use irc_core::model::IrcModel;
use irc_core::seed;
use irc_core::synthetic::{generate, SyntheticSpec};
use irc_core::trainer::{
    e2e_step, jensen_estimate, pretrain_answerer, pretrain_extractor, pretraining_set, train_all, train_e2e,
};

fn corpus(n: usize) -> Vec<Example> {
    generate(&SyntheticSpec { examples: n, ..SyntheticSpec::default() }).unwrap()
}

fn tiny_config() -> (TrainingConfig, EncoderShape) {
    let shape = EncoderShape { dim: 16, layers: 1, heads: 2, ff_dim: 32, max_positions: 128 };
    let mut t = TrainingConfig {
        batch_size: 4,
        pretrain_epochs: 2,
        ranker_epochs: 1,
        e2e_epochs: 2,
        learning_rate: 1e-3,
        ..TrainingConfig::default()
    };
    t.limits.max_sequence_length = 128;
    (t, shape)
}

fn tiny(train: &[Example]) -> IrcModel {
    let (t, shape) = tiny_config();
    IrcModel::initialize(train, t, shape).unwrap()
}

#[test]
fn identical_seeds_give_bitwise_identical_models() {
    let train = corpus(8);
    let mut a = tiny(&train);
    let mut b = tiny(&train);
    let la = train_all(&mut a, &train).unwrap();
    let lb = train_all(&mut b, &train).unwrap();
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    assert_eq!(la, lb);
}

#[test]
fn different_seeds_give_different_models() {
    let train = corpus(8);
    let a = tiny(&train);
    let (mut t, shape) = tiny_config();
    t.seed = 1;
    let b = IrcModel::initialize(&train, t, shape).unwrap();
    assert_ne!(a.to_checkpoint().extractor, b.to_checkpoint().extractor);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let train = corpus(8);
    let set = pretraining_set(&train, 1, 0);
    let dir = tempfile::tempdir().unwrap();

    let mut full = tiny(&train);
    pretrain_extractor(&mut full, &set).unwrap();
    pretrain_answerer(&mut full, &set).unwrap();
    train_e2e(&mut full, &set).unwrap();

    // Stop after one epoch of each stage, save, reload, finish.
    let mut part = tiny(&train);
    part.training.pretrain_epochs = 1;
    part.training.e2e_epochs = 1;
    pretrain_extractor(&mut part, &set).unwrap();
    pretrain_answerer(&mut part, &set).unwrap();
    let path = dir.path().join("half.json");
    part.save(&path).unwrap();
    let mut resumed = IrcModel::load(&path).unwrap();
    resumed.training.pretrain_epochs = 2;
    pretrain_extractor(&mut resumed, &set).unwrap();
    pretrain_answerer(&mut resumed, &set).unwrap();
    resumed.training.e2e_epochs = 1;
    train_e2e(&mut resumed, &set).unwrap();
    let path = dir.path().join("e2e-half.json");
    resumed.save(&path).unwrap();
    let mut resumed = IrcModel::load(&path).unwrap();
    resumed.training.e2e_epochs = 2;
    train_e2e(&mut resumed, &set).unwrap();

    assert_eq!(resumed.progress, full.progress);
    assert_eq!(resumed.to_checkpoint(), full.to_checkpoint());
}

#[test]
fn completed_stage_is_not_repeated() {
    let train = corpus(4);
    let set = pretraining_set(&train, 1, 0);
    let mut m = tiny(&train);
    pretrain_extractor(&mut m, &set).unwrap();
    let before = m.to_checkpoint();
    let log = pretrain_extractor(&mut m, &set).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(m.to_checkpoint(), before);
}

#[test]
fn target_is_cna_exactly_when_the_sample_misses_gold() {
    let train = corpus(12);
    let set = pretraining_set(&train, 1, 0);
    let m = tiny(&train);
    let mut seen = [0usize; 2];
    for (k, ex) in set.iter().enumerate() {
        for draw in 0..5 {
            let mut rng = seed::rng(7, &ex.id, &[draw]);
            let (_, rec) = e2e_step(&m, ex, &mut rng).unwrap();
            assert!(!rec.sampled_rationale.is_empty(), "{k}: empty sample");
            let covers = rec.sampled_rationale.is_superset(&ex.gold_rationale);
            let expected = if covers { ex.gold_answer.label } else { AnswerLabel::Cna };
            assert_eq!(rec.effective_label, expected, "{}", ex.id);
            seen[usize::from(covers)] += 1;
        }
    }
    // An untrained extractor samples both kinds.
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn no_answer_penalty_is_skipped_when_its_weight_is_zero() {
    let train = corpus(4);
    let set = pretraining_set(&train, 1, 0);
    let mut m = tiny(&train);
    m.training.lambda_no_answer = 0.0;
    let (_, rec) = e2e_step(&m, &set[0], &mut seed::rng(0, "x", &[])).unwrap();
    assert_eq!(rec.no_answer_loss, None);
    assert!((rec.total_loss - rec.answer_loss - 0.1 * rec.rationale_loss).abs() < 1e-12);
}

#[test]
fn total_loss_combines_the_three_terms() {
    let train = corpus(6);
    let set = pretraining_set(&train, 1, 0);
    let m = tiny(&train);
    for ex in &set {
        let (_, rec) = e2e_step(&m, ex, &mut seed::rng(3, &ex.id, &[])).unwrap();
        let na = rec.no_answer_loss.expect("weight is positive");
        let expected = rec.answer_loss + 0.1 * rec.rationale_loss + na;
        assert!((rec.total_loss - expected).abs() < 1e-12);
    }
}

#[test]
fn one_extractor_step_lowers_the_rationale_loss() {
    let train = corpus(4);
    let ex = train[0].gold_pair_view().unwrap();
    let mut m = tiny(&train);
    m.training.batch_size = 1;
    m.training.pretrain_epochs = 1;
    m.training.learning_rate = 1e-3;
    let loss = |m: &IrcModel| {
        let sentences: Vec<_> = ex.passage.sentences().cloned().collect();
        let scores = m.extractor.score(&m.tokenizer, &m.training.limits, &ex.query, &sentences).unwrap();
        rationale_loss(&scores, &ex.gold_rationale)
    };
    let before = loss(&m);
    pretrain_extractor(&mut m, std::slice::from_ref(&ex)).unwrap();
    let after = loss(&m);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn frozen_answerer_is_left_untouched() {
    let train = corpus(6);
    let set = pretraining_set(&train, 1, 0);
    let mut m = tiny(&train);
    m.training.freeze_answerer = true;
    let before = m.to_checkpoint();
    train_e2e(&mut m, &set).unwrap();
    let after = m.to_checkpoint();
    assert_eq!(before.answerer.params, after.answerer.params);
    assert_ne!(before.extractor.params, after.extractor.params);
}

#[test]
fn jensen_bound_holds_on_a_frozen_model() {
    let train = corpus(8);
    let set = pretraining_set(&train, 1, 0);
    let mut m = tiny(&train);
    pretrain_extractor(&mut m, &set).unwrap();
    pretrain_answerer(&mut m, &set).unwrap();
    for ex in set.iter().take(4) {
        let est = jensen_estimate(&m, ex, 1000, &mut seed::rng(0, &ex.id, &[])).unwrap();
        assert!(est.violation() <= 2.0 * est.std_error, "{}: {est:?}", ex.id);
    }
}
