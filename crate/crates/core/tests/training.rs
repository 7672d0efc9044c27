//! Regime isolation, stop-gradient, weight sharing, early stopping and
//! determinism of the training loop.

#[path = "support/tiny.rs"]
mod tiny;

use hierslu::data::{contexts_of, Conversation};
use hierslu::eval::{evaluate, Branch};
use hierslu::features::DropFrameConfig;
use hierslu::losses::LossWeights;
use hierslu::model::{ContextBatch, HierModel};
use hierslu::nn::{Bucket, ParamId, ParamStore, Session};
use hierslu::optim::Adam;
use hierslu::training::{apply_step, compute_gradients, train, LossPlan, Regime};
use hierslu::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn batch_of(conv: &Conversation, n_max: usize) -> ContextBatch<'_> {
    let contexts = contexts_of(conv, n_max).unwrap();
    ContextBatch::new(&contexts, tiny::settings().num_labels).unwrap()
}

fn plan(speech_bce: bool, text_bce: bool, euc: f64, con: f64) -> LossPlan {
    LossPlan {
        speech_bce,
        text_bce,
        lambda_euc: euc,
        lambda_con: con,
        ..LossPlan::for_regime(Regime::HierSt, &LossWeights::default())
    }
}

fn grads_for(model: &HierModel, store: &ParamStore, conv: &Conversation, p: &LossPlan) -> Vec<(ParamId, hierslu::autodiff::Mat)> {
    let batch = batch_of(conv, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    compute_gradients(model, store, &batch, p, 0.0, &DropFrameConfig::disabled(), &mut rng)
        .unwrap()
        .grads
}

fn nonzero(g: &hierslu::autodiff::Mat) -> bool {
    g.iter().any(|&v| v != 0.0)
}

#[test]
fn cross_modal_losses_leave_text_encoder_untouched() {
    let corpus = tiny::corpus(1);
    let (model, store) = tiny::model(2);
    let grads = grads_for(&model, &store, &corpus.train[0], &plan(false, false, 1.0, 1.0));
    for (id, g) in &grads {
        if store.bucket(*id) == Bucket::Text {
            assert!(!nonzero(g), "{} received gradient", store.name(*id));
        }
    }
    assert!(grads.iter().any(|(id, g)| store.bucket(*id) == Bucket::Speech && nonzero(g)));
}

#[test]
fn both_branches_update_shared_conversation_encoder() {
    let corpus = tiny::corpus(1);
    let (model, store) = tiny::model(3);
    let conv = &corpus.train[0];
    let speech = grads_for(&model, &store, conv, &plan(true, false, 0.0, 0.0));
    let text = grads_for(&model, &store, conv, &plan(false, true, 0.0, 0.0));
    let shared = |gs: &[(ParamId, hierslu::autodiff::Mat)]| -> Vec<ParamId> {
        gs.iter()
            .filter(|(id, g)| matches!(store.bucket(*id), Bucket::Conversation | Bucket::Classifier) && nonzero(g))
            .map(|(id, _)| *id)
            .collect()
    };
    assert!(!shared(&speech).is_empty());
    assert_eq!(shared(&speech), shared(&text));
    assert!(speech.iter().all(|(id, _)| store.bucket(*id) != Bucket::Text));
    assert!(text.iter().all(|(id, _)| store.bucket(*id) != Bucket::Speech));
}

#[test]
fn text_step_moves_speech_context_embeddings() {
    let corpus = tiny::corpus(1);
    let (model, mut store) = tiny::model(4);
    let conv = &corpus.train[1];
    let batch = batch_of(conv, 4);
    let contexts = |store: &ParamStore| {
        let mut s = Session::eval(store);
        let out = model.speech_branch(&mut s, &batch.speech(), &batch.layout).unwrap();
        s.graph.value(out.contexts).clone()
    };
    let before = contexts(&store);
    let speech_sum = store.checksum(Bucket::Speech);
    let grads = grads_for(&model, &store, conv, &plan(false, true, 0.0, 0.0));
    let mut adam = Adam::new(&store, 1e-2);
    apply_step(&mut store, &mut adam, grads, |_| true, 5.0);
    assert_eq!(store.checksum(Bucket::Speech), speech_sum);
    let after = contexts(&store);
    assert!((&after - &before).iter().any(|d| d.abs() > 1e-9));
}

#[test]
fn regimes_only_move_their_own_encoder() {
    let corpus = tiny::corpus(5);
    for (regime, frozen) in [(Regime::HierS, Bucket::Text), (Regime::HierT, Bucket::Speech)] {
        let (model, store) = tiny::model(6);
        let before = store.checksum(frozen);
        let out = train(&model, store, &tiny::options(regime, 2, 1), &corpus.train, &corpus.dev).unwrap();
        assert_eq!(out.store.checksum(frozen), before, "{regime:?}");
    }
}

#[test]
fn freeze_flags_hold_encoders_fixed() {
    let corpus = tiny::corpus(5);
    let (model, store) = tiny::model(7);
    let speech = store.checksum(Bucket::Speech);
    let conv = store.checksum(Bucket::Conversation);
    let mut opts = tiny::options(Regime::HierSt, 2, 1);
    opts.training.freeze_speech = true;
    let out = train(&model, store, &opts, &corpus.train, &corpus.dev).unwrap();
    assert_eq!(out.store.checksum(Bucket::Speech), speech);
    assert_ne!(out.store.checksum(Bucket::Conversation), conv);
}

#[test]
fn training_loss_decreases_for_several_seeds() {
    let corpus = tiny::corpus(8);
    for seed in [1, 2, 3] {
        let (model, store) = tiny::model(seed);
        let out = train(&model, store, &tiny::options(Regime::HierSt, 8, seed), &corpus.train, &corpus.dev).unwrap();
        let first = out.history.first().unwrap().losses.total;
        let last = out.history.last().unwrap().losses.total;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}

#[test]
fn training_is_bit_reproducible() {
    let corpus = tiny::corpus(9);
    let run = || {
        let (model, store) = tiny::model(11);
        train(&model, store, &tiny::options(Regime::HierSt, 3, 4), &corpus.train, &corpus.dev).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.store, b.store);
    assert_eq!(a.adam, b.adam);
    for (x, y) in a.history.iter().zip(&b.history) {
        assert_eq!(x.losses, y.losses);
        assert_eq!(x.dev_macro_f1.to_bits(), y.dev_macro_f1.to_bits());
    }
}

#[test]
fn early_stopping_restores_best_epoch() {
    let corpus = tiny::corpus(10);
    let (model, store) = tiny::model(12);
    let mut opts = tiny::options(Regime::HierS, 40, 2);
    opts.training.patience = 2;
    let out = train(&model, store, &opts, &corpus.train, &corpus.dev).unwrap();
    let best = out.best_epoch;
    assert!(out.epochs_run() == best + 2 || out.epochs_run() == 40);
    let logged = out.history[best - 1].dev_macro_f1;
    assert_eq!(logged, out.best_dev_macro_f1);
    assert!(out.history.iter().all(|r| r.dev_macro_f1 <= logged));
    let again = evaluate(&model, &out.store, &corpus.dev, 4, Branch::Speech, 0.5).unwrap();
    assert!((again.macro_f1 - logged).abs() < 1e-9);
}

#[test]
fn threshold_above_one_predicts_nothing() {
    let corpus = tiny::corpus(10);
    let (model, store) = tiny::model(12);
    let r = evaluate(&model, &store, &corpus.test, 4, Branch::Speech, 1.5).unwrap();
    assert_eq!(r.macro_f1, 0.0);
    assert!(r.predicted.iter().all(|&p| p == 0));
}

#[test]
fn text_regimes_require_transcripts() {
    let mut corpus = tiny::corpus(3);
    corpus.train[0].utterances[1].transcript = None;
    for regime in [Regime::HierT, Regime::HierSt] {
        let (model, store) = tiny::model(1);
        match train(&model, store, &tiny::options(regime, 1, 1), &corpus.train, &corpus.dev) {
            Err(Error::Config(_)) => {}
            other => panic!("{regime:?}: expected config error, got {:?}", other.map(|o| o.history.len())),
        }
    }
    let (model, store) = tiny::model(1);
    assert!(train(&model, store, &tiny::options(Regime::HierS, 1, 1), &corpus.train, &corpus.dev).is_ok());
}
