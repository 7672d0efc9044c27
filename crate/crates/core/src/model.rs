//! The full hierarchical model: two utterance encoders feeding one shared
//! conversation encoder and one shared classifier.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::conversation::{ContextLayout, ConversationEncoder, ConversationVariant};
use crate::data::{Context, TokenSequence, Utterance};
use crate::encoders::{SpeechEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::losses::Classifier;
use crate::nn::{ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub speech_layers: usize,
    pub speech_hidden: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub text_max_len: usize,
    pub conversation: ConversationVariant,
    pub conversation_layers: usize,
    pub conversation_heads: usize,
    pub ffn_mult: usize,
    pub use_speaker: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            speech_layers: 2,
            speech_hidden: 32,
            text_layers: 2,
            text_heads: 2,
            text_max_len: 32,
            conversation: ConversationVariant::Transformer,
            conversation_layers: 2,
            conversation_heads: 1,
            ffn_mult: 4,
            use_speaker: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let nonzero = [
            ("d_model", self.d_model),
            ("speech_layers", self.speech_layers),
            ("speech_hidden", self.speech_hidden),
            ("text_heads", self.text_heads),
            ("text_max_len", self.text_max_len),
            ("conversation_heads", self.conversation_heads),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in nonzero {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        for (name, heads) in [("text_heads", self.text_heads), ("conversation_heads", self.conversation_heads)] {
            if self.d_model % heads != 0 {
                return Err(Error::Config(format!(
                    "model.d_model {} is not divisible by model.{name} {heads}",
                    self.d_model
                )));
            }
        }
        if self.conversation == ConversationVariant::Transformer && self.conversation_layers == 0 {
            return Err(Error::Config("model.conversation_layers must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sizes fixed by the data rather than by hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub max_context: usize,
}

#[derive(Debug, Clone)]
pub struct HierModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub speech: SpeechEncoder,
    pub text: TextEncoder,
    pub conversation: ConversationEncoder,
    pub classifier: Classifier,
}

/// Outputs of one modality branch for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput {
    /// Utterance embeddings, one row per utterance in the batch.
    pub utterances: Var,
    /// Context embeddings, one row per context window.
    pub contexts: Var,
    pub logits: Var,
}

impl HierModel {
    /// Build the model and a freshly initialised parameter store. Each
    /// component draws from its own seeded stream.
    pub fn new(config: &ModelConfig, dims: ModelDims, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if dims.max_context == 0 || dims.num_labels == 0 || dims.input_dim == 0 || dims.vocab_size == 0 {
            return Err(Error::Config(format!("invalid model dimensions {dims:?}")));
        }
        let stream = |k: u64| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k));
        let d = config.d_model;
        let mut store = ParamStore::new();
        let speech = SpeechEncoder::new(&mut store, dims.input_dim, config.speech_hidden, config.speech_layers, d, &mut stream(1));
        let text = TextEncoder::new(
            &mut store,
            dims.vocab_size,
            config.text_max_len,
            d,
            config.text_layers,
            config.text_heads,
            config.ffn_mult * d,
            &mut stream(2),
        );
        let conversation = ConversationEncoder::new(
            &mut store,
            config.conversation,
            d,
            dims.max_context,
            config.conversation_layers,
            config.conversation_heads,
            config.ffn_mult * d,
            config.use_speaker,
            &mut stream(3),
        );
        let classifier = Classifier::new(&mut store, d, dims.num_labels, &mut stream(4));
        Ok((
            Self {
                config: config.clone(),
                dims,
                speech,
                text,
                conversation,
                classifier,
            },
            store,
        ))
    }

    pub fn speech_branch(&self, s: &mut Session, speech: &[&FeatureSequence], layout: &ContextLayout) -> Result<BranchOutput> {
        let utterances = self.speech.encode(s, speech)?;
        self.head(s, utterances, layout)
    }

    pub fn text_branch(&self, s: &mut Session, tokens: &[&TokenSequence], layout: &ContextLayout) -> Result<BranchOutput> {
        let utterances = self.text.encode(s, tokens)?;
        self.head(s, utterances, layout)
    }

    fn head(&self, s: &mut Session, utterances: Var, layout: &ContextLayout) -> Result<BranchOutput> {
        let dropped = s.dropout(utterances);
        let contexts = self.conversation.encode(s, dropped, layout)?;
        let logits = self.classifier.classify(s, contexts);
        Ok(BranchOutput {
            utterances,
            contexts,
            logits,
        })
    }
}

/// A set of contexts with their utterances deduplicated, ready for one
/// forward pass per modality.
#[derive(Debug, Clone)]
pub struct ContextBatch<'a> {
    pub utterances: Vec<&'a Utterance>,
    pub layout: ContextLayout,
    pub targets: Mat,
}

impl<'a> ContextBatch<'a> {
    pub fn new(contexts: &[Context<'a>], num_labels: usize) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut utterances: Vec<&'a Utterance> = Vec::new();
        let mut seen: HashMap<*const Utterance, usize> = HashMap::new();
        let mut windows = Vec::with_capacity(contexts.len());
        let mut targets = Mat::zeros((contexts.len(), num_labels));
        for (b, ctx) in contexts.iter().enumerate() {
            let window = ctx
                .utterances
                .iter()
                .map(|u| {
                    *seen.entry(u as *const Utterance).or_insert_with(|| {
                        utterances.push(u);
                        utterances.len() - 1
                    })
                })
                .collect();
            windows.push(window);
            let labels = ctx.labels();
            if labels.len() != num_labels {
                return Err(Error::Data(format!(
                    "utterance {} has {} labels, model expects {num_labels}",
                    ctx.target().id,
                    labels.len()
                )));
            }
            for (j, &on) in labels.bits().iter().enumerate() {
                targets[[b, j]] = on as u8 as f64;
            }
        }
        let speakers = utterances.iter().map(|u| u.speaker.index()).collect();
        Ok(Self {
            utterances,
            layout: ContextLayout { windows, speakers },
            targets,
        })
    }

    pub fn speech(&self) -> Vec<&'a FeatureSequence> {
        self.utterances.iter().map(|u| &u.speech).collect()
    }

    pub fn transcripts(&self) -> Result<Vec<&'a TokenSequence>> {
        self.utterances
            .iter()
            .map(|u| {
                u.transcript
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("utterance {} has no transcript", u.id)))
            })
            .collect()
    }
}
