//! The five user-facing commands, each driven by one resolved
//! [`ExperimentConfig`] and writing fixed file names under `output_dir`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ablate::{self, AblationReport};
use crate::config::ExperimentConfig;
use crate::data::{generate_corpus, read_conversations, read_manifest, write_conversations, write_manifest, Corpus, Manifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::pipeline;
use crate::gradcheck::{self, GradcheckReport};
use crate::model::{HierModel, ModelDims};
use crate::nn::ParamStore;
use crate::training::{train_with_callback, EpochRecord};

pub const CORPUS_DIR: &str = "corpus";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "train_summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const EVAL_JSON_FILE: &str = "eval_report.json";
pub const EVAL_TABLE_FILE: &str = "eval_report.txt";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const ABLATION_JSON_FILE: &str = "ablation.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_TABLE_FILE: &str = "ablation.txt";

const FORMAT_VERSION: u32 = 1;

fn split_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.jsonl"))
}

fn prepare_output(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generate the corpus and write it under `output_dir/corpus`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = prepare_output(cfg)?;
    let corpus = generate_corpus(&cfg.data, cfg.seed)?;
    let dir = out.join(CORPUS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut splits = Vec::new();
    for (name, convs) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        write_conversations(&split_file(&dir, name), convs)?;
        splits.push((name.to_string(), convs.len()));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        settings: cfg.data.clone(),
        splits,
    };
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(dir)
}

/// Raw corpus: read from `corpus_dir` when set, otherwise generated.
pub fn load_raw_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    match &cfg.corpus_dir {
        Some(dir) => {
            let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
            if manifest.format_version != FORMAT_VERSION {
                return Err(Error::Data(format!("unsupported corpus format {}", manifest.format_version)));
            }
            Ok(Corpus {
                train: read_conversations(&split_file(dir, "train"))?,
                dev: read_conversations(&split_file(dir, "dev"))?,
                test: read_conversations(&split_file(dir, "test"))?,
            })
        }
        None => generate_corpus(&cfg.data, cfg.seed),
    }
}

/// Corpus with the feature pipeline applied to every utterance.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    load_raw_corpus(cfg)?.map_speech(|s| pipeline(s, cfg.features.delta_window))
}

/// Model sizes for a prepared corpus: feature and label widths come from
/// the data, the vocabulary from the config.
pub fn model_dims(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<ModelDims> {
    let first = corpus
        .train
        .first()
        .and_then(|c| c.utterances.first())
        .ok_or_else(|| Error::Data("training split is empty".into()))?;
    Ok(ModelDims {
        input_dim: first.speech.dim(),
        vocab_size: cfg.data.vocab_size,
        num_labels: first.labels.len(),
        max_context: cfg.training.n_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
    pub epochs_run: usize,
    pub optimizer_steps: u64,
    pub parameters: usize,
}

/// Train per the config and write the checkpoint, per-epoch metrics and a
/// summary. `on_epoch` sees every record as it is logged.
pub fn run_train(cfg: &ExperimentConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let out = prepare_output(cfg)?;
    let corpus = load_corpus(cfg)?;
    let (model, store) = HierModel::new(&cfg.model, model_dims(cfg, &corpus)?, cfg.seed)?;
    let metrics_path = out.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut write_err = None;
    let outcome = train_with_callback(&model, store, &cfg.train_options()?, &corpus.train, &corpus.dev, |r| {
        let line = serde_json::to_string(r).expect("epoch record serializes");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
        on_epoch(r);
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    outcome.store.save(&out.join(CHECKPOINT_FILE))?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_dev_macro_f1: outcome.best_dev_macro_f1,
        epochs_run: outcome.epochs_run(),
        optimizer_steps: outcome.adam.step,
        parameters: outcome.store.num_scalars(None),
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Evaluate a checkpoint on the configured split with the regime's
/// test-time branch.
pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let out = prepare_output(cfg)?;
    let corpus = load_corpus(cfg)?;
    let (model, mut store) = HierModel::new(&cfg.model, model_dims(cfg, &corpus)?, cfg.seed)?;
    let ckpt = cfg.eval.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    store.assign_from(&ParamStore::load(&ckpt)?)?;
    let report = evaluate(
        &model,
        &store,
        corpus.split(cfg.eval.split),
        cfg.training.n_max,
        cfg.training.regime.test_branch(),
        cfg.eval.threshold,
    )?;
    write_json(&out.join(EVAL_JSON_FILE), &report)?;
    write_text(&out.join(EVAL_TABLE_FILE), &report.to_table())?;
    Ok(report)
}

pub fn run_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let out = prepare_output(cfg)?;
    let report = gradcheck::run(&cfg.gradcheck, cfg.seed)?;
    write_json(&out.join(GRADCHECK_FILE), &report)?;
    Ok(report)
}

pub fn run_ablate(cfg: &ExperimentConfig) -> Result<AblationReport> {
    let out = prepare_output(cfg)?;
    let corpus = load_corpus(cfg)?;
    let report = ablate::run(cfg, &corpus)?;
    write_json(&out.join(ABLATION_JSON_FILE), &report)?;
    write_text(&out.join(ABLATION_CSV_FILE), &report.to_csv())?;
    write_text(&out.join(ABLATION_TABLE_FILE), &report.to_table())?;
    Ok(report)
}
