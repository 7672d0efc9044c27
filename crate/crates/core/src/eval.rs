//! Multilabel metrics and checkpoint evaluation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::data::{contexts_of, Conversation};
use crate::error::{Error, Result};
use crate::model::{ContextBatch, HierModel};
use crate::nn::{ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Speech,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub predicted: Vec<usize>,
    pub threshold: f64,
    /// Classes with no positive target; scored 0.
    pub zero_support_classes: Vec<usize>,
    pub num_examples: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision/recall/F1 and their unweighted mean over every
/// class. F1 is 0 whenever precision + recall is 0, including classes with
/// neither targets nor predictions.
pub fn macro_f1(predictions: &Array2<bool>, targets: &Array2<bool>, threshold: f64) -> Result<EvalReport> {
    if predictions.dim() != targets.dim() {
        return Err(Error::Data(format!(
            "predictions {:?} and targets {:?} differ in shape",
            predictions.dim(),
            targets.dim()
        )));
    }
    let (n, l) = targets.dim();
    let mut report = EvalReport {
        macro_f1: 0.0,
        precision: Vec::with_capacity(l),
        recall: Vec::with_capacity(l),
        f1: Vec::with_capacity(l),
        support: Vec::with_capacity(l),
        predicted: Vec::with_capacity(l),
        threshold,
        zero_support_classes: Vec::new(),
        num_examples: n,
    };
    for c in 0..l {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &t) in predictions.column(c).iter().zip(targets.column(c).iter()) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        if tp + fn_ == 0 {
            report.zero_support_classes.push(c);
        }
        report.precision.push(p);
        report.recall.push(r);
        report.f1.push(f);
        report.support.push(tp + fn_);
        report.predicted.push(tp + fp);
    }
    report.macro_f1 = if l == 0 { 0.0 } else { report.f1.iter().sum::<f64>() / l as f64 };
    Ok(report)
}

impl EvalReport {
    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:>9}  {:>9}  {:>9}  {:>7}  {:>9}\n",
            "class", "precision", "recall", "f1", "support", "predicted"
        );
        for c in 0..self.f1.len() {
            let flag = if self.zero_support_classes.contains(&c) { "  (no support)" } else { "" };
            out.push_str(&format!(
                "{:>5}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}  {:>9}{flag}\n",
                c, self.precision[c], self.recall[c], self.f1[c], self.support[c], self.predicted[c]
            ));
        }
        out.push_str(&format!(
            "macro-F1 {:.4} over {} examples at threshold {}\n",
            self.macro_f1, self.num_examples, self.threshold
        ));
        out
    }
}

/// Sigmoid scores and binary targets for every context of `convs`, with
/// dropout and DropFrame off. Conversations are processed `chunk` at a time.
pub fn score_contexts(
    model: &HierModel,
    store: &ParamStore,
    convs: &[Conversation],
    n_max: usize,
    branch: Branch,
    chunk: usize,
) -> Result<(Mat, Mat)> {
    let l = model.dims.num_labels;
    let mut scores: Vec<f64> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    for group in convs.chunks(chunk.max(1)) {
        let mut contexts = Vec::new();
        for c in group {
            contexts.extend(contexts_of(c, n_max)?);
        }
        let batch = ContextBatch::new(&contexts, l)?;
        let mut s = Session::eval(store);
        let out = match branch {
            Branch::Speech => model.speech_branch(&mut s, &batch.speech(), &batch.layout)?,
            Branch::Text => model.text_branch(&mut s, &batch.transcripts()?, &batch.layout)?,
        };
        scores.extend(s.graph.value(out.logits).iter().map(|&z| 1.0 / (1.0 + (-z).exp())));
        targets.extend(batch.targets.iter());
    }
    let n = targets.len() / l.max(1);
    Ok((
        Mat::from_shape_vec((n, l), scores).expect("consistent score buffer"),
        Mat::from_shape_vec((n, l), targets).expect("consistent target buffer"),
    ))
}

/// Evaluate `store` on `convs`: positive iff sigmoid(logit) ≥ `threshold`.
pub fn evaluate(
    model: &HierModel,
    store: &ParamStore,
    convs: &[Conversation],
    n_max: usize,
    branch: Branch,
    threshold: f64,
) -> Result<EvalReport> {
    if convs.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let (scores, targets) = score_contexts(model, store, convs, n_max, branch, 8)?;
    let preds = scores.mapv(|p| p >= threshold);
    macro_f1(&preds, &targets.mapv(|t| t == 1.0), threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_score_one() {
        let t = array![[true, false], [false, true], [true, true]];
        let r = macro_f1(&t, &t, 0.5).unwrap();
        assert_eq!(r.macro_f1, 1.0);
    }

    #[test]
    fn complement_scores_zero() {
        let t = array![[true, false], [false, true]];
        let p = t.mapv(|b| !b);
        assert_eq!(macro_f1(&p, &t, 0.5).unwrap().macro_f1, 0.0);
    }

    #[test]
    fn hand_counted_confusion() {
        // class 0: TP=1 FP=1 FN=0; class 1: TP=1 FP=0 FN=1
        let t = array![[true, true], [false, true]];
        let p = array![[true, true], [true, false]];
        let r = macro_f1(&p, &t, 0.5).unwrap();
        assert!((r.f1[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.f1[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_scores_zero_and_is_flagged() {
        let t = array![[true, false], [true, false]];
        let r = macro_f1(&t, &t, 0.5).unwrap();
        assert_eq!(r.f1, vec![1.0, 0.0]);
        assert_eq!(r.zero_support_classes, vec![1]);
        assert_eq!(r.macro_f1, 0.5);
        assert!(r.to_table().contains("(no support)"));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Array2::from_elem((2, 3), true);
        let b = Array2::from_elem((2, 2), true);
        assert!(macro_f1(&a, &b, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn invariant_under_row_and_class_permutation(
            bits in proptest::collection::vec(any::<(bool, bool)>(), 24),
            rot in 0usize..6,
            cls_rot in 0usize..4,
        ) {
            let p = Array2::from_shape_fn((6, 4), |(i, j)| bits[i * 4 + j].0);
            let t = Array2::from_shape_fn((6, 4), |(i, j)| bits[i * 4 + j].1);
            let base = macro_f1(&p, &t, 0.5).unwrap().macro_f1;
            let perm = |m: &Array2<bool>| Array2::from_shape_fn((6, 4), |(i, j)| m[[(i + rot) % 6, (j + cls_rot) % 4]]);
            let moved = macro_f1(&perm(&p), &perm(&t), 0.5).unwrap().macro_f1;
            prop_assert!((base - moved).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }
}
