//! Conversation and label data model.

mod generator;
mod io;

pub use generator::{bayes_topic_accuracy, generate_corpus, GeneratorSettings, TokenLayout};
pub use io::{read_conversations, read_manifest, write_conversations, write_manifest, Manifest};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Caller,
}

impl Speaker {
    pub fn index(self) -> usize {
        match self {
            Speaker::Agent => 0,
            Speaker::Caller => 1,
        }
    }
}

/// Token ids of one transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("token sequence must be non-empty".into()));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Multi-hot dialog act vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_active(num_labels: usize, active: &[usize]) -> Result<Self> {
        let mut bits = vec![false; num_labels];
        for &a in active {
            *bits
                .get_mut(a)
                .ok_or_else(|| Error::Data(format!("label {a} out of range for {num_labels} labels")))? = true;
        }
        Ok(Self(bits))
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn active(&self) -> Vec<usize> {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: Speaker,
    pub speech: FeatureSequence,
    pub transcript: Option<TokenSequence>,
    pub labels: LabelVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn new(id: String, utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Data(format!("conversation {id} has no utterances")));
        }
        Ok(Self { id, utterances })
    }
}

/// A window of consecutive utterances ending at the target utterance.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    /// Index of the first utterance of the window within its conversation.
    pub start: usize,
    pub utterances: &'a [Utterance],
}

impl<'a> Context<'a> {
    pub fn target(&self) -> &'a Utterance {
        self.utterances.last().expect("contexts are non-empty")
    }

    pub fn labels(&self) -> &'a LabelVector {
        &self.target().labels
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Index of the target within its conversation.
    pub fn target_index(&self) -> usize {
        self.start + self.utterances.len() - 1
    }
}

/// One context per utterance, each holding at most `n_max` utterances and
/// ending at its target.
pub fn contexts_of(conv: &Conversation, n_max: usize) -> Result<Vec<Context<'_>>> {
    if n_max == 0 {
        return Err(Error::Config("context length must be >= 1".into()));
    }
    Ok((0..conv.utterances.len())
        .map(|i| {
            let start = (i + 1).saturating_sub(n_max);
            Context {
                start,
                utterances: &conv.utterances[start..=i],
            }
        })
        .collect())
}

/// Conversation-level train/dev/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Conversation>,
    pub dev: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Conversation] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Apply `f` to every utterance's speech features.
    pub fn map_speech<F>(&self, mut f: F) -> Result<Corpus>
    where
        F: FnMut(&FeatureSequence) -> Result<FeatureSequence>,
    {
        let mut map_split = |convs: &[Conversation]| -> Result<Vec<Conversation>> {
            convs
                .iter()
                .map(|c| {
                    let utterances = c
                        .utterances
                        .iter()
                        .map(|u| {
                            Ok(Utterance {
                                speech: f(&u.speech)?,
                                ..u.clone()
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Conversation {
                        id: c.id.clone(),
                        utterances,
                    })
                })
                .collect()
        };
        Ok(Corpus {
            train: map_split(&self.train)?,
            dev: map_split(&self.dev)?,
            test: map_split(&self.test)?,
        })
    }
}
