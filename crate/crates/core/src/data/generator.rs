//! Synthetic history-dependent dialog corpora.
//!
//! Each conversation has a latent topic. Utterances at fixed "reveal"
//! positions (every `reveal_every` turns, starting at turn 0) carry a topic
//! token and the matching topic label. Every other utterance is, with
//! probability `p_hist`, *referential*: it carries a topic-free reference
//! token but its labels include the conversation's topic. A referential
//! utterance alone says nothing about which topic applies; the window has
//! to reach back to a reveal.
//!
//! The remaining labels are local acts, each announced by its own marker
//! token inside the utterance. Speech frames are drawn per token from a
//! Gaussian cluster around a per-token mean, with a random duration.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Conversation, Corpus, LabelVector, Speaker, TokenSequence, Utterance};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSettings {
    pub train_conversations: usize,
    pub dev_conversations: usize,
    pub test_conversations: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub num_labels: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
    pub base_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Frames per token are uniform in `[min_token_frames, max_token_frames]`.
    pub min_token_frames: usize,
    pub max_token_frames: usize,
    pub frame_period_ms: f64,
    pub noise_std: f64,
    pub second_act_prob: f64,
    pub p_hist: f64,
    pub reveal_every: usize,
    pub with_transcripts: bool,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            train_conversations: 200,
            dev_conversations: 30,
            test_conversations: 40,
            min_utterances: 8,
            max_utterances: 16,
            num_labels: 16,
            num_topics: 4,
            vocab_size: 64,
            base_dim: 8,
            min_tokens: 3,
            max_tokens: 6,
            min_token_frames: 2,
            max_token_frames: 6,
            frame_period_ms: 10.0,
            noise_std: 0.3,
            second_act_prob: 0.3,
            p_hist: 0.8,
            reveal_every: 6,
            with_transcripts: true,
        }
    }
}

/// How the vocabulary is carved up between markers, topics and fillers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub num_acts: usize,
    pub num_topics: usize,
    pub vocab_size: usize,
}

impl TokenLayout {
    pub fn act_marker(&self, act: usize) -> usize {
        act
    }

    pub fn topic_token(&self, topic: usize) -> usize {
        self.num_acts + topic
    }

    pub fn reference_token(&self) -> usize {
        self.num_acts + self.num_topics
    }

    pub fn fillers(&self) -> std::ops::Range<usize> {
        self.reference_token() + 1..self.vocab_size
    }

    /// Label index of a topic.
    pub fn topic_label(&self, topic: usize) -> usize {
        self.num_acts + topic
    }
}

impl GeneratorSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        if self.train_conversations == 0 {
            return bad("train_conversations must be >= 1".into());
        }
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return bad(format!(
                "utterance range [{}, {}] is invalid",
                self.min_utterances, self.max_utterances
            ));
        }
        if self.num_topics == 0 || self.num_labels <= self.num_topics {
            return bad(format!(
                "need at least one local act: num_labels={} num_topics={}",
                self.num_labels, self.num_topics
            ));
        }
        let layout = self.layout();
        if layout.fillers().is_empty() {
            return bad(format!(
                "vocab_size {} leaves no filler tokens (need > {})",
                self.vocab_size,
                layout.reference_token() + 1
            ));
        }
        if self.base_dim == 0 {
            return bad("base_dim must be >= 1".into());
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens || self.max_tokens < 3 {
            return bad(format!(
                "token range [{}, {}] is invalid (max must be >= 3)",
                self.min_tokens, self.max_tokens
            ));
        }
        if self.min_token_frames == 0 || self.min_token_frames > self.max_token_frames {
            return bad(format!(
                "token frame range [{}, {}] is invalid",
                self.min_token_frames, self.max_token_frames
            ));
        }
        if !(self.frame_period_ms > 0.0) || !(self.noise_std >= 0.0) {
            return bad("frame_period_ms must be > 0 and noise_std >= 0".into());
        }
        for (name, p) in [("p_hist", self.p_hist), ("second_act_prob", self.second_act_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.reveal_every == 0 {
            return bad("reveal_every must be >= 1".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout {
            num_acts: self.num_labels.saturating_sub(self.num_topics),
            num_topics: self.num_topics,
            vocab_size: self.vocab_size,
        }
    }

    pub fn is_reveal(&self, position: usize) -> bool {
        position % self.reveal_every == 0
    }

    pub fn mean_utterance_frames(&self) -> f64 {
        let tokens = (self.min_tokens + self.max_tokens) as f64 / 2.0;
        let frames = (self.min_token_frames + self.max_token_frames) as f64 / 2.0;
        tokens * frames
    }
}

/// Bayes-optimal accuracy for the topic of a referential target when the
/// classifier sees only the last `window` utterances. Averaged over the
/// generator's conversation lengths and positions; 1.0 when no referential
/// utterances exist.
pub fn bayes_topic_accuracy(settings: &GeneratorSettings, window: usize) -> f64 {
    let chance = 1.0 / settings.num_topics as f64;
    let (mut weight, mut correct) = (0.0, 0.0);
    for n in settings.min_utterances..=settings.max_utterances {
        for i in 0..n {
            if settings.is_reveal(i) {
                continue;
            }
            let w = settings.p_hist;
            let sees_reveal = window > 0 && i % settings.reveal_every < window;
            weight += w;
            correct += w * if sees_reveal { 1.0 } else { chance };
        }
    }
    if weight == 0.0 {
        1.0
    } else {
        correct / weight
    }
}

/// Generate a train/dev/test corpus deterministically from `seed`.
pub fn generate_corpus(settings: &GeneratorSettings, seed: u64) -> Result<Corpus> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = settings.layout();
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let token_means = Array2::from_shape_fn((settings.vocab_size, settings.base_dim), |_| unit.sample(&mut rng));

    let gen = Generator {
        settings,
        layout,
        token_means,
        noise: Normal::new(0.0, settings.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal"),
    };
    let train = gen.split("train", settings.train_conversations, &mut rng)?;
    let dev = gen.split("dev", settings.dev_conversations, &mut rng)?;
    let test = gen.split("test", settings.test_conversations, &mut rng)?;
    Ok(Corpus { train, dev, test })
}

struct Generator<'a> {
    settings: &'a GeneratorSettings,
    layout: TokenLayout,
    token_means: Array2<f64>,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn split(&self, name: &str, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Conversation>> {
        // topics cycle through shuffled blocks so that small splits still
        // cover every topic
        let k = self.settings.num_topics;
        let mut topics = Vec::with_capacity(count);
        while topics.len() < count {
            let mut block: Vec<usize> = (0..k).collect();
            block.shuffle(rng);
            topics.extend(block);
        }
        topics
            .into_iter()
            .take(count)
            .enumerate()
            .map(|(c, topic)| self.conversation(format!("{name}-{c:04}"), topic, rng))
            .collect()
    }

    fn conversation(&self, id: String, topic: usize, rng: &mut ChaCha8Rng) -> Result<Conversation> {
        let s = self.settings;
        let n = rng.random_range(s.min_utterances..=s.max_utterances);
        let utterances = (0..n)
            .map(|i| {
                let speaker = if i % 2 == 0 { Speaker::Agent } else { Speaker::Caller };
                let kind = if s.is_reveal(i) {
                    TopicRole::Reveal
                } else if rng.random_bool(s.p_hist) {
                    TopicRole::Reference
                } else {
                    TopicRole::None
                };
                self.utterance(format!("{id}-{i:02}"), speaker, topic, kind, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Conversation::new(id, utterances)
    }

    fn utterance(
        &self,
        id: String,
        speaker: Speaker,
        topic: usize,
        role: TopicRole,
        rng: &mut ChaCha8Rng,
    ) -> Result<Utterance> {
        let s = self.settings;
        let l = self.layout;
        let mut acts = vec![rng.random_range(0..l.num_acts)];
        if l.num_acts > 1 && rng.random_bool(s.second_act_prob) {
            let mut second = rng.random_range(0..l.num_acts - 1);
            if second >= acts[0] {
                second += 1;
            }
            acts.push(second);
        }
        let mut tokens: Vec<usize> = acts.iter().map(|&a| l.act_marker(a)).collect();
        let mut labels = acts.clone();
        match role {
            TopicRole::Reveal => {
                tokens.push(l.topic_token(topic));
                labels.push(l.topic_label(topic));
            }
            TopicRole::Reference => {
                tokens.push(l.reference_token());
                labels.push(l.topic_label(topic));
            }
            TopicRole::None => {}
        }
        let total = rng.random_range(s.min_tokens..=s.max_tokens).max(tokens.len());
        while tokens.len() < total {
            tokens.push(rng.random_range(l.fillers()));
        }
        tokens.shuffle(rng);

        let mut rows: Vec<f64> = Vec::new();
        for &tok in &tokens {
            let dur = rng.random_range(s.min_token_frames..=s.max_token_frames);
            for _ in 0..dur {
                rows.extend(
                    self.token_means
                        .row(tok)
                        .iter()
                        .map(|&m| m + if s.noise_std > 0.0 { self.noise.sample(rng) } else { 0.0 }),
                );
            }
        }
        let t = rows.len() / s.base_dim;
        let frames = Array2::from_shape_vec((t, s.base_dim), rows).expect("consistent frame buffer");
        Ok(Utterance {
            id,
            speaker,
            speech: FeatureSequence::new(frames, s.frame_period_ms)?,
            transcript: if s.with_transcripts {
                Some(TokenSequence::new(tokens)?)
            } else {
                None
            },
            labels: LabelVector::from_active(s.num_labels, &labels)?,
        })
    }
}

#[derive(Clone, Copy)]
enum TopicRole {
    Reveal,
    Reference,
    None,
}
