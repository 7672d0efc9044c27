//! Experiment configuration: one TOML file, optionally patched with dotted
//! `key=value` overrides, is the only input to every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GeneratorSettings, Split};
use crate::error::{Error, Result};
use crate::features::DropFrameConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::training::{TrainOptions, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub delta_window: usize,
    pub dropframe_len: usize,
    pub dropframe_enabled: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            delta_window: 2,
            dropframe_len: 256,
            dropframe_enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub split: Split,
    /// Checkpoint to evaluate; defaults to the one `train` writes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            split: Split::Test,
            checkpoint: None,
        }
    }
}

/// A named ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationRow {
    #[serde(rename = "utterance-only")]
    UtteranceOnly,
    #[serde(rename = "hier-s")]
    HierS,
    #[serde(rename = "hier-st")]
    HierSt,
    #[serde(rename = "hier-st+euc")]
    HierStEuc,
    #[serde(rename = "hier-st+con")]
    HierStCon,
    #[serde(rename = "hier-st+euc+con")]
    HierStEucCon,
    #[serde(rename = "hier-st+con+lstm")]
    HierStConLstm,
}

impl AblationRow {
    pub const ALL: [AblationRow; 7] = [
        AblationRow::UtteranceOnly,
        AblationRow::HierS,
        AblationRow::HierSt,
        AblationRow::HierStEuc,
        AblationRow::HierStCon,
        AblationRow::HierStEucCon,
        AblationRow::HierStConLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationRow::UtteranceOnly => "utterance-only",
            AblationRow::HierS => "hier-s",
            AblationRow::HierSt => "hier-st",
            AblationRow::HierStEuc => "hier-st+euc",
            AblationRow::HierStCon => "hier-st+con",
            AblationRow::HierStEucCon => "hier-st+euc+con",
            AblationRow::HierStConLstm => "hier-st+con+lstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// DropFrame lengths to time; 0 stands for "disabled".
    pub dropframe_sweep: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            rows: AblationRow::ALL.to_vec(),
            dropframe_sweep: vec![16, 64, 256, 0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub d_model: usize,
    pub hidden: usize,
    pub batch: usize,
    pub max_frames: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            d_model: 8,
            hidden: 4,
            batch: 3,
            max_frames: 6,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory written by `gen-data`. When absent the corpus is generated
    /// in memory from `[data]` and `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus_dir: Option<PathBuf>,
    pub data: GeneratorSettings,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus_dir: None,
            data: GeneratorSettings::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            training: TrainingConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

/// Parse a single override value: any TOML scalar or array, falling back to
/// a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `section.key=value` to a parsed document.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` is malformed")));
    }
    let (last, parents) = keys.split_last().expect("non-empty key path");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{path}`: `{k}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply overrides, reject unknown keys and validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.losses.validate()?;
        self.training.validate()?;
        if self.features.delta_window == 0 {
            return Err(Error::Config("features.delta_window must be >= 1".into()));
        }
        if self.features.dropframe_len == 0 {
            return Err(Error::Config("features.dropframe_len must be >= 1".into()));
        }
        if !self.eval.threshold.is_finite() {
            return Err(Error::Config("eval.threshold must be finite".into()));
        }
        if self.training.regime.uses_text() && !self.data.with_transcripts && self.corpus_dir.is_none() {
            return Err(Error::Config(format!(
                "regime {:?} needs transcripts but data.with_transcripts is false",
                self.training.regime
            )));
        }
        if self.ablate.seeds.is_empty() || self.ablate.rows.is_empty() {
            return Err(Error::Config("ablate.seeds and ablate.rows must be non-empty".into()));
        }
        let g = &self.gradcheck;
        if g.d_model == 0 || g.hidden == 0 || g.batch == 0 || g.max_frames < 2 {
            return Err(Error::Config("gradcheck sizes must be positive (max_frames >= 2)".into()));
        }
        if !(g.step > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config("gradcheck.step and gradcheck.tolerance must be > 0".into()));
        }
        Ok(())
    }

    pub fn dropframe(&self) -> Result<DropFrameConfig> {
        DropFrameConfig::new(self.features.dropframe_len, self.features.dropframe_enabled)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        Ok(TrainOptions {
            training: self.training.clone(),
            losses: self.losses,
            dropframe: self.dropframe()?,
            seed: self.seed,
        })
    }
}
