//! Small corpora and models that train in well under a second per epoch.
#![allow(dead_code)]

use hierslu::data::{generate_corpus, Corpus, GeneratorSettings};
use hierslu::features::{pipeline, DropFrameConfig};
use hierslu::losses::LossWeights;
use hierslu::model::{HierModel, ModelConfig, ModelDims};
use hierslu::nn::ParamStore;
use hierslu::training::{Regime, TrainOptions, TrainingConfig};

pub fn settings() -> GeneratorSettings {
    GeneratorSettings {
        train_conversations: 6,
        dev_conversations: 3,
        test_conversations: 3,
        min_utterances: 4,
        max_utterances: 7,
        num_labels: 8,
        num_topics: 2,
        vocab_size: 20,
        base_dim: 4,
        reveal_every: 3,
        ..GeneratorSettings::default()
    }
}

pub fn corpus(seed: u64) -> Corpus {
    generate_corpus(&settings(), seed)
        .unwrap()
        .map_speech(|s| pipeline(s, 2))
        .unwrap()
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        speech_layers: 1,
        speech_hidden: 8,
        text_layers: 1,
        text_heads: 2,
        text_max_len: 16,
        conversation_layers: 1,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

pub fn dims(n_max: usize) -> ModelDims {
    let s = settings();
    ModelDims {
        input_dim: s.base_dim * 6,
        vocab_size: s.vocab_size,
        num_labels: s.num_labels,
        max_context: n_max,
    }
}

pub fn model(seed: u64) -> (HierModel, ParamStore) {
    HierModel::new(&model_config(), dims(4), seed).unwrap()
}

pub fn options(regime: Regime, epochs: usize, seed: u64) -> TrainOptions {
    TrainOptions {
        training: TrainingConfig {
            regime,
            max_epochs: epochs,
            patience: epochs,
            n_max: 4,
            learning_rate: 3e-3,
            ..TrainingConfig::default()
        },
        losses: LossWeights::default(),
        dropframe: DropFrameConfig::new(8, true).unwrap(),
        seed,
    }
}
