//! Modality-agnostic conversation encoder: one parameter set turns a
//! window of utterance embeddings (speech or text) into a single context
//! embedding.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{blocks_for, normal, BiLstm, Bucket, ParamId, ParamStore, Session, TransformerLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConversationVariant {
    Transformer,
    Recurrent,
}

#[derive(Debug, Clone)]
pub enum ConversationEncoder {
    /// Learned absolute positions + post-norm transformer; the output at
    /// the final position of each window is the context embedding.
    Transformer {
        max_len: usize,
        positions: ParamId,
        speaker: Option<ParamId>,
        layers: Vec<TransformerLayer>,
    },
    /// One bidirectional LSTM layer; forward and backward final states are
    /// summed.
    Recurrent {
        max_len: usize,
        speaker: Option<ParamId>,
        lstm: BiLstm,
    },
}

/// Which utterance rows form each context window, in conversation order.
/// The last index of each window is the target utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextLayout {
    pub windows: Vec<Vec<usize>>,
    /// Speaker role index of every utterance row.
    pub speakers: Vec<usize>,
}

impl ContextLayout {
    pub fn targets(&self) -> Vec<usize> {
        self.windows.iter().map(|w| *w.last().expect("non-empty window")).collect()
    }
}

impl ConversationEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        variant: ConversationVariant,
        d_model: usize,
        max_len: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        use_speaker: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let speaker = use_speaker.then(|| store.add("conversation.speaker_embedding", Bucket::Conversation, normal(2, d_model, std, rng)));
        match variant {
            ConversationVariant::Transformer => {
                let positions = store.add("conversation.position_embedding", Bucket::Conversation, normal(max_len, d_model, std, rng));
                let layers = (0..layers)
                    .map(|l| {
                        TransformerLayer::new(store, &format!("conversation.layer{l}"), Bucket::Conversation, d_model, heads, ffn_dim, rng)
                    })
                    .collect();
                ConversationEncoder::Transformer {
                    max_len,
                    positions,
                    speaker,
                    layers,
                }
            }
            ConversationVariant::Recurrent => ConversationEncoder::Recurrent {
                max_len,
                speaker,
                lstm: BiLstm::new(store, "conversation.lstm", Bucket::Conversation, d_model, d_model, 1, rng),
            },
        }
    }

    pub fn max_len(&self) -> usize {
        match self {
            ConversationEncoder::Transformer { max_len, .. } | ConversationEncoder::Recurrent { max_len, .. } => *max_len,
        }
    }

    fn speaker(&self) -> Option<ParamId> {
        match self {
            ConversationEncoder::Transformer { speaker, .. } | ConversationEncoder::Recurrent { speaker, .. } => *speaker,
        }
    }

    /// Encode every window of `layout` over the utterance rows of
    /// `utterances` (`M × d_model`), giving `B × d_model`.
    pub fn encode(&self, s: &mut Session, utterances: Var, layout: &ContextLayout) -> Result<Var> {
        let rows = s.graph.value(utterances).nrows();
        for (i, w) in layout.windows.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Data(format!("context {i} is empty")));
            }
            if w.len() > self.max_len() {
                return Err(Error::Data(format!(
                    "context {i} has {} utterances, encoder supports at most {}",
                    w.len(),
                    self.max_len()
                )));
            }
            if let Some(&bad) = w.iter().find(|&&r| r >= rows) {
                return Err(Error::Data(format!("context {i} references utterance row {bad} of {rows}")));
            }
        }
        let utterances = match self.speaker() {
            Some(table) => {
                let table = s.param(table);
                let roles = s.graph.gather(table, &layout.speakers);
                s.graph.add(utterances, roles)
            }
            None => utterances,
        };
        match self {
            ConversationEncoder::Transformer { positions, layers, .. } => {
                let flat: Vec<usize> = layout.windows.iter().flatten().copied().collect();
                let pos_idx: Vec<usize> = layout.windows.iter().flat_map(|w| 0..w.len()).collect();
                let x = s.graph.gather(utterances, &flat);
                let table = s.param(*positions);
                let pos = s.graph.gather(table, &pos_idx);
                let mut x = s.graph.add(x, pos);
                let lengths: Vec<usize> = layout.windows.iter().map(Vec::len).collect();
                let blocks = blocks_for(&lengths);
                for layer in layers {
                    x = layer.forward(s, x, &blocks);
                }
                let last: Vec<usize> = blocks.iter().map(|b| b.start + b.len - 1).collect();
                Ok(s.graph.gather(x, &last))
            }
            ConversationEncoder::Recurrent { lstm, .. } => {
                let t_max = layout.windows.iter().map(Vec::len).max().unwrap_or(0);
                let mut inputs = Vec::with_capacity(t_max);
                let mut masks = Vec::with_capacity(t_max);
                for t in 0..t_max {
                    let idx: Vec<usize> = layout.windows.iter().map(|w| w.get(t).copied().unwrap_or(0)).collect();
                    masks.push(layout.windows.iter().map(|w| t < w.len()).collect::<Vec<_>>());
                    inputs.push(s.graph.gather(utterances, &idx));
                }
                let (hf, hb) = lstm.final_states(s, &inputs, &masks);
                Ok(s.graph.add(hf, hb))
            }
        }
    }
}
