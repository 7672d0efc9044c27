//! Line-delimited JSON corpus files: one conversation per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Conversation, GeneratorSettings, LabelVector, Speaker, TokenSequence, Utterance};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConversationRecord {
    id: String,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    speaker: Speaker,
    frames: Vec<Vec<f64>>,
    frame_period_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<usize>>,
    labels: Vec<u8>,
}

/// Sidecar describing how a corpus was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub settings: GeneratorSettings,
    pub splits: Vec<(String, usize)>,
}

fn to_record(c: &Conversation) -> ConversationRecord {
    ConversationRecord {
        id: c.id.clone(),
        utterances: c
            .utterances
            .iter()
            .map(|u| UtteranceRecord {
                id: u.id.clone(),
                speaker: u.speaker,
                frames: u.speech.frames().rows().into_iter().map(|r| r.to_vec()).collect(),
                frame_period_ms: u.speech.frame_period_ms(),
                tokens: u.transcript.as_ref().map(|t| t.tokens().to_vec()),
                labels: u.labels.bits().iter().map(|&b| b as u8).collect(),
            })
            .collect(),
    }
}

fn from_record(r: ConversationRecord) -> Result<Conversation> {
    let utterances = r
        .utterances
        .into_iter()
        .map(|u| {
            let d = u.frames.first().map_or(0, Vec::len);
            if u.frames.iter().any(|f| f.len() != d) {
                return Err(Error::Data(format!("utterance {}: ragged frame matrix", u.id)));
            }
            let t = u.frames.len();
            let frames = Array2::from_shape_vec((t, d), u.frames.into_iter().flatten().collect())
                .map_err(|e| Error::Data(format!("utterance {}: {e}", u.id)))?;
            let bits = u
                .labels
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Data(format!("utterance {}: label value {other} is not binary", u.id))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Utterance {
                speech: FeatureSequence::new(frames, u.frame_period_ms)
                    .map_err(|e| Error::Data(format!("utterance {}: {e}", u.id)))?,
                transcript: u.tokens.map(TokenSequence::new).transpose()?,
                labels: LabelVector::from_bits(bits),
                speaker: u.speaker,
                id: u.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Conversation::new(r.id, utterances)
}

pub fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in convs {
        serde_json::to_writer(&mut w, &to_record(c))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ConversationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(from_record(rec)?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
