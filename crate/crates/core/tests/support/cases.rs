//! Random comparison cases between the batched model and the reference
//! oracle. Each function returns the largest absolute difference seen.
#![allow(dead_code)]

use hierslu::autodiff::Mat;
use hierslu::conversation::{ContextLayout, ConversationVariant};
use hierslu::data::TokenSequence;
use hierslu::features::FeatureSequence;
use hierslu::model::{HierModel, ModelConfig, ModelDims};
use hierslu::nn::{ParamStore, Session};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::reference;

pub const VOCAB: usize = 11;

fn small_config(rng: &mut ChaCha8Rng, variant: ConversationVariant) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        speech_layers: rng.random_range(1..=2),
        speech_hidden: rng.random_range(2..=5),
        text_layers: rng.random_range(1..=2),
        text_heads: 2,
        text_max_len: 9,
        conversation: variant,
        conversation_layers: rng.random_range(1..=2),
        conversation_heads: 1,
        ffn_mult: 2,
        use_speaker: rng.random_bool(0.5),
    }
}

fn build(seed: u64, variant: ConversationVariant) -> (ChaCha8Rng, HierModel, ParamStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = small_config(&mut rng, variant);
    let dims = ModelDims {
        input_dim: 5,
        vocab_size: VOCAB,
        num_labels: 3,
        max_context: 6,
    };
    let (model, mut store) = HierModel::new(&config, dims, seed).expect("valid config");
    // perturb biases and norms so nothing sits at its initial constant
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    (rng, model, store)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn speech_case(seed: u64) -> f64 {
    let (mut rng, model, store) = build(seed, ConversationVariant::Transformer);
    let n = rng.random_range(1..=6);
    let seqs: Vec<FeatureSequence> = (0..n)
        .map(|_| {
            let t = rng.random_range(1..=9);
            FeatureSequence::new(Mat::from_shape_fn((t, 5), |_| rng.random_range(-2.0..2.0)), 20.0).unwrap()
        })
        .collect();
    let refs: Vec<&FeatureSequence> = seqs.iter().collect();
    let mut s = Session::eval(&store);
    let out = model.speech.encode(&mut s, &refs).unwrap();
    let batched = s.graph.value(out);
    seqs.iter()
        .enumerate()
        .map(|(i, x)| {
            let r = reference::speech_embedding(&store, &model.config, x.frames());
            max_diff(batched.row(i).as_slice().unwrap(), &r)
        })
        .fold(0.0, f64::max)
}

pub fn text_case(seed: u64) -> f64 {
    let (mut rng, model, store) = build(seed, ConversationVariant::Transformer);
    let n = rng.random_range(1..=6);
    let seqs: Vec<TokenSequence> = (0..n)
        .map(|_| {
            let len = rng.random_range(1..=8);
            TokenSequence::new((0..len).map(|_| rng.random_range(0..VOCAB)).collect()).unwrap()
        })
        .collect();
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let mut s = Session::eval(&store);
    let out = model.text.encode(&mut s, &refs).unwrap();
    let batched = s.graph.value(out);
    seqs.iter()
        .enumerate()
        .map(|(i, x)| {
            let r = reference::text_embedding(&store, &model.config, x.tokens());
            max_diff(batched.row(i).as_slice().unwrap(), &r)
        })
        .fold(0.0, f64::max)
}

pub fn conversation_case(seed: u64, variant: ConversationVariant) -> f64 {
    let (mut rng, model, store) = build(seed, variant);
    let m = rng.random_range(1..=9);
    let utts = Mat::from_shape_fn((m, 8), |_| rng.random_range(-1.5..1.5));
    let speakers: Vec<usize> = (0..m).map(|_| rng.random_range(0..2)).collect();
    let windows: Vec<Vec<usize>> = (0..rng.random_range(1..=5))
        .map(|_| (0..rng.random_range(1..=6)).map(|_| rng.random_range(0..m)).collect())
        .collect();
    let layout = ContextLayout {
        windows: windows.clone(),
        speakers: speakers.clone(),
    };
    let mut s = Session::eval(&store);
    let u = s.graph.constant(utts.clone());
    let out = model.conversation.encode(&mut s, u, &layout).unwrap();
    let batched = s.graph.value(out);
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let rows: Vec<Vec<f64>> = w.iter().map(|&r| utts.row(r).to_vec()).collect();
            let sp: Vec<usize> = w.iter().map(|&r| speakers[r]).collect();
            let r = reference::context_embedding(&store, &model.config, &rows, &sp);
            max_diff(batched.row(i).as_slice().unwrap(), &r)
        })
        .fold(0.0, f64::max)
}
