//! Multi-seed ablation over model variants, plus the DropFrame sweep.

use serde::{Deserialize, Serialize};

use crate::config::{AblationRow, ExperimentConfig};
use crate::conversation::ConversationVariant;
use crate::data::Corpus;
use crate::error::Result;
use crate::eval::evaluate;
use crate::model::HierModel;
use crate::training::{benchmark_dropframe, train, DropFrameRow, Regime};

/// The experiment configuration for one ablation row.
pub fn row_config(base: &ExperimentConfig, row: AblationRow) -> ExperimentConfig {
    let mut cfg = base.clone();
    let (euc, con) = (base.losses.lambda_euc, base.losses.lambda_con);
    let (regime, lambdas) = match row {
        AblationRow::UtteranceOnly | AblationRow::HierS => (Regime::HierS, (0.0, 0.0)),
        AblationRow::HierSt => (Regime::HierSt, (0.0, 0.0)),
        AblationRow::HierStEuc => (Regime::HierSt, (euc, 0.0)),
        AblationRow::HierStCon | AblationRow::HierStConLstm => (Regime::HierSt, (0.0, con)),
        AblationRow::HierStEucCon => (Regime::HierSt, (euc, con)),
    };
    cfg.training.regime = regime;
    cfg.losses.lambda_euc = lambdas.0;
    cfg.losses.lambda_con = lambdas.1;
    if row == AblationRow::UtteranceOnly {
        // the classifier sees the target utterance alone
        cfg.training.n_max = 1;
    }
    if row == AblationRow::HierStConLstm {
        cfg.model.conversation = ConversationVariant::Recurrent;
    }
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    pub test_macro_f1: Vec<f64>,
    pub best_dev_macro_f1: Vec<f64>,
    pub epochs: Vec<usize>,
    pub mean: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<RowResult>,
    pub dropframe: Vec<DropFrameRow>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train and test one row for every seed. The corpus is shared; the seed
/// drives initialisation, shuffling, dropout and DropFrame.
pub fn run_row(base: &ExperimentConfig, row: AblationRow, corpus: &Corpus) -> Result<RowResult> {
    let cfg = row_config(base, row);
    cfg.validate()?;
    let mut result = RowResult {
        row,
        seeds: base.ablate.seeds.clone(),
        test_macro_f1: Vec::new(),
        best_dev_macro_f1: Vec::new(),
        epochs: Vec::new(),
        mean: 0.0,
        std: 0.0,
    };
    for &seed in &base.ablate.seeds {
        let (model, store) = HierModel::new(&cfg.model, crate::experiment::model_dims(&cfg, corpus)?, seed)?;
        let opts = crate::training::TrainOptions {
            seed,
            ..cfg.train_options()?
        };
        let out = train(&model, store, &opts, &corpus.train, &corpus.dev)?;
        let report = evaluate(
            &model,
            &out.store,
            &corpus.test,
            cfg.training.n_max,
            cfg.training.regime.test_branch(),
            cfg.eval.threshold,
        )?;
        result.test_macro_f1.push(report.macro_f1);
        result.best_dev_macro_f1.push(out.best_dev_macro_f1);
        result.epochs.push(out.epochs_run());
    }
    (result.mean, result.std) = mean_std(&result.test_macro_f1);
    Ok(result)
}

pub fn run(base: &ExperimentConfig, corpus: &Corpus) -> Result<AblationReport> {
    let rows = base
        .ablate
        .rows
        .iter()
        .map(|&row| run_row(base, row, corpus))
        .collect::<Result<Vec<_>>>()?;
    let lengths: Vec<Option<usize>> = base
        .ablate
        .dropframe_sweep
        .iter()
        .map(|&l| if l == 0 { None } else { Some(l) })
        .collect();
    let dropframe = if lengths.is_empty() {
        Vec::new()
    } else {
        benchmark_dropframe(
            &base.model,
            crate::experiment::model_dims(base, corpus)?,
            &base.train_options()?,
            &corpus.train,
            &corpus.dev,
            &lengths,
        )?
    };
    Ok(AblationReport { rows, dropframe })
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,seeds,mean_test_macro_f1,std_test_macro_f1,per_seed\n");
        for r in &self.rows {
            let per: Vec<String> = r.test_macro_f1.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{}\n",
                r.row.name(),
                r.seeds.len(),
                r.mean,
                r.std,
                per.join(";")
            ));
        }
        out
    }

    /// Aligned table of rows and the DropFrame sweep.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<18}  {:>8}  {:>8}\n", "row", "mean F1", "std");
        for r in &self.rows {
            out.push_str(&format!("{:<18}  {:>8.4}  {:>8.4}\n", r.row.name(), r.mean, r.std));
        }
        if !self.dropframe.is_empty() {
            out.push_str(&format!("\n{:<10}  {:>10}  {:>8}\n", "dropframe", "epoch s", "dev F1"));
            for d in &self.dropframe {
                let l = d.max_len.map_or("off".to_string(), |l| l.to_string());
                out.push_str(&format!("{:<10}  {:>10.4}  {:>8.4}\n", l, d.mean_epoch_secs, d.dev_macro_f1));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_map_to_expected_settings() {
        let base = ExperimentConfig::default();
        let u = row_config(&base, AblationRow::UtteranceOnly);
        assert_eq!((u.training.regime, u.training.n_max), (Regime::HierS, 1));
        let st = row_config(&base, AblationRow::HierSt);
        assert_eq!((st.losses.lambda_euc, st.losses.lambda_con), (0.0, 0.0));
        let lstm = row_config(&base, AblationRow::HierStConLstm);
        assert_eq!(lstm.model.conversation, ConversationVariant::Recurrent);
        assert_eq!((lstm.losses.lambda_euc, lstm.losses.lambda_con), (0.0, 1.0));
        let both = row_config(&base, AblationRow::HierStEucCon);
        assert_eq!((both.losses.lambda_euc, both.losses.lambda_con), (1.0, 1.0));
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
    }
}
