//! Supervised and cross-modal objectives, plus the shared classifier head.
//!
//! The cross-modal losses take the text-side embeddings through a
//! stop-gradient, so they can only move the speech branch.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Bucket, Linear, ParamStore, Session};

/// Affine map from a context embedding to per-label logits, shared by both
/// modalities.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, d_model: usize, num_labels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, "classifier", Bucket::Classifier, d_model, num_labels, rng),
        }
    }

    pub fn classify(&self, s: &mut Session, contexts: Var) -> Var {
        self.linear.forward(s, contexts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_euc: f64,
    pub lambda_con: f64,
    pub tau: f64,
    /// Apply the cross-modal losses to every utterance in the batch rather
    /// than only the target utterances.
    pub all_utterances: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_euc: 1.0,
            lambda_con: 1.0,
            tau: 0.07,
            all_utterances: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.lambda_euc >= 0.0) || !(self.lambda_con >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy over batch and labels, from logits.
pub fn bce_multilabel(g: &mut Graph, logits: Var, targets: &Mat) -> Result<Var> {
    if g.value(logits).dim() != targets.dim() {
        return Err(Error::Data(format!(
            "logits {:?} and targets {:?} differ in shape",
            g.value(logits).dim(),
            targets.dim()
        )));
    }
    if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Data("targets must be binary".into()));
    }
    Ok(g.bce_with_logits(logits, targets.clone()))
}

fn check_pair(g: &Graph, speech: Var, text: Var) -> Result<()> {
    let (a, b) = (g.value(speech).dim(), g.value(text).dim());
    if a != b || a.0 == 0 {
        return Err(Error::Data(format!("cross-modal batches must match and be non-empty: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean L2 distance between paired speech and text embeddings; text side
/// detached.
pub fn euclidean_loss(g: &mut Graph, speech: Var, text: Var) -> Result<Var> {
    check_pair(g, speech, text)?;
    let text = g.detach(text);
    Ok(g.euclidean(speech, text))
}

/// Symmetric cosine contrastive loss with temperature `tau`; text side
/// detached.
pub fn contrastive_loss(g: &mut Graph, speech: Var, text: Var, tau: f64) -> Result<Var> {
    let text = g.detach(text);
    contrastive_loss_attached(g, speech, text, tau)
}

/// Contrastive loss with gradients flowing into both inputs.
pub fn contrastive_loss_attached(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_pair(g, a, b)?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be > 0, got {tau}")));
    }
    g.contrastive(a, b, tau).map_err(|index| Error::Numerical {
        index,
        message: "zero-norm embedding in contrastive loss".into(),
    })
}
