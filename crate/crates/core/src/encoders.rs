//! Utterance encoders: a bidirectional LSTM over acoustic frames (student)
//! and a small self-attention encoder over tokens (teacher). Both emit
//! `d_model`-dimensional embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Var};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{blocks_for, normal, BiLstm, Bucket, Linear, ParamId, ParamStore, Session, TransformerLayer};

/// Stacked bidirectional LSTM whose top-layer final states (forward after
/// the last frame, backward after the first) are concatenated and
/// projected to `d_model`.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub input_dim: usize,
    pub lstm: BiLstm,
    pub projection: Linear,
}

impl SpeechEncoder {
    pub fn new(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        layers: usize,
        d_model: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let lstm = BiLstm::new(store, "speech.lstm", Bucket::Speech, input_dim, hidden, layers, rng);
        let projection = Linear::new(store, "speech.proj", Bucket::Speech, 2 * hidden, d_model, rng);
        Self {
            input_dim,
            lstm,
            projection,
        }
    }

    /// Encode a batch of utterances (any lengths) into a `B × d_model`
    /// matrix. Shorter sequences are zero-padded and masked.
    pub fn encode(&self, s: &mut Session, batch: &[&FeatureSequence]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("speech batch is empty".into()));
        }
        if let Some(bad) = batch.iter().find(|x| x.dim() != self.input_dim) {
            return Err(Error::Config(format!(
                "speech encoder expects {}-dim frames, got {}",
                self.input_dim,
                bad.dim()
            )));
        }
        let t_max = batch.iter().map(|x| x.len()).max().expect("non-empty");
        let mut inputs = Vec::with_capacity(t_max);
        let mut masks = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut step = Mat::zeros((batch.len(), self.input_dim));
            let mut mask = vec![false; batch.len()];
            for (b, x) in batch.iter().enumerate() {
                if t < x.len() {
                    step.row_mut(b).assign(&x.frames().row(t));
                    mask[b] = true;
                }
            }
            inputs.push(s.graph.constant(step));
            masks.push(mask);
        }
        let (hf, hb) = self.lstm.final_states(s, &inputs, &masks);
        let both = s.graph.concat_cols(&[hf, hb]);
        Ok(self.projection.forward(s, both))
    }
}

/// Token encoder with a prepended classification token; the output at the
/// classification position is the utterance embedding.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub token_embedding: ParamId,
    pub cls_embedding: ParamId,
    pub position_embedding: ParamId,
    pub layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        max_len: usize,
        d_model: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = 1.0 / (d_model as f64).sqrt();
        let token_embedding = store.add("text.token_embedding", Bucket::Text, normal(vocab_size, d_model, std, rng));
        let cls_embedding = store.add("text.cls_embedding", Bucket::Text, normal(1, d_model, std, rng));
        let position_embedding = store.add("text.position_embedding", Bucket::Text, normal(max_len, d_model, std, rng));
        let layers = (0..layers)
            .map(|l| TransformerLayer::new(store, &format!("text.layer{l}"), Bucket::Text, d_model, heads, ffn_dim, rng))
            .collect();
        Self {
            vocab_size,
            max_len,
            token_embedding,
            cls_embedding,
            position_embedding,
            layers,
        }
    }

    pub fn encode(&self, s: &mut Session, batch: &[&TokenSequence]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Data("text batch is empty".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.len() + 1 > self.max_len {
                return Err(Error::Data(format!(
                    "transcript of {} tokens exceeds text encoder capacity {}",
                    seq.len(),
                    self.max_len - 1
                )));
            }
            // the classification token lives at row `vocab_size` of the
            // combined table
            ids.push(self.vocab_size);
            for &tok in seq.tokens() {
                if tok >= self.vocab_size {
                    return Err(Error::Data(format!(
                        "token id {tok} out of vocabulary (size {})",
                        self.vocab_size
                    )));
                }
                ids.push(tok);
            }
            positions.extend(0..seq.len() + 1);
            lengths.push(seq.len() + 1);
        }
        let tok_table = s.param(self.token_embedding);
        let cls = s.param(self.cls_embedding);
        let table = s.graph.concat_rows(&[tok_table, cls]);
        let tok = s.graph.gather(table, &ids);
        let pos_table = s.param(self.position_embedding);
        let pos = s.graph.gather(pos_table, &positions);
        let mut x = s.graph.add(tok, pos);
        x = s.dropout(x);
        let blocks = blocks_for(&lengths);
        for layer in &self.layers {
            x = layer.forward(s, x, &blocks);
        }
        let cls_rows: Vec<usize> = blocks.iter().map(|b| b.start).collect();
        Ok(s.graph.gather(x, &cls_rows))
    }
}
