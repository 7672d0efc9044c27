//! Training regimes, mini-batch Adam, early stopping and the DropFrame
//! timing benchmark.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::data::{contexts_of, Conversation};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Branch};
use crate::features::{drop_frames, DropFrameConfig, FeatureSequence};
use crate::losses::{bce_multilabel, contrastive_loss, euclidean_loss, LossWeights};
use crate::model::{ContextBatch, HierModel, ModelConfig, ModelDims};
use crate::nn::{Bucket, ParamId, ParamStore, Session};
use crate::optim::{clip_global_norm, Adam};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Speech and text co-training, plus optional cross-modal losses.
    #[serde(rename = "hier-st")]
    HierSt,
    /// Speech only.
    #[serde(rename = "hier-s")]
    HierS,
    /// Text only.
    #[serde(rename = "hier-t")]
    HierT,
}

impl Regime {
    pub fn uses_speech(self) -> bool {
        matches!(self, Regime::HierSt | Regime::HierS)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Regime::HierSt | Regime::HierT)
    }

    /// Branch kept at test time.
    pub fn test_branch(self) -> Branch {
        if self == Regime::HierT {
            Branch::Text
        } else {
            Branch::Speech
        }
    }

    pub fn optimizes(self, bucket: Bucket) -> bool {
        match bucket {
            Bucket::Speech => self.uses_speech(),
            Bucket::Text => self.uses_text(),
            Bucket::Conversation | Bucket::Classifier => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub regime: Regime,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Conversations per mini-batch; every context of each is included.
    pub batch_conversations: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub n_max: usize,
    pub grad_clip: f64,
    pub freeze_speech: bool,
    pub freeze_text: bool,
    /// Also log train-split macro-F1 (eval mode) every epoch.
    pub eval_train: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            regime: Regime::HierSt,
            learning_rate: 1e-3,
            dropout: 0.1,
            batch_conversations: 2,
            max_epochs: 50,
            patience: 10,
            n_max: 10,
            grad_clip: 5.0,
            freeze_speech: false,
            freeze_text: false,
            eval_train: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.batch_conversations == 0 || self.max_epochs == 0 || self.n_max == 0 {
            return bad("batch_conversations, max_epochs and n_max must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        Ok(())
    }

    pub fn trainable(&self, bucket: Bucket) -> bool {
        self.regime.optimizes(bucket)
            && !(bucket == Bucket::Speech && self.freeze_speech)
            && !(bucket == Bucket::Text && self.freeze_text)
    }
}

/// Everything a run needs besides the model and data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub training: TrainingConfig,
    pub losses: LossWeights,
    pub dropframe: DropFrameConfig,
    pub seed: u64,
}

/// Which loss terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPlan {
    pub speech_bce: bool,
    pub text_bce: bool,
    pub lambda_euc: f64,
    pub lambda_con: f64,
    pub tau: f64,
    pub all_utterances: bool,
}

impl LossPlan {
    pub fn for_regime(regime: Regime, weights: &LossWeights) -> Self {
        let cross = regime == Regime::HierSt;
        Self {
            speech_bce: regime.uses_speech(),
            text_bce: regime.uses_text(),
            lambda_euc: if cross { weights.lambda_euc } else { 0.0 },
            lambda_con: if cross { weights.lambda_con } else { 0.0 },
            tau: weights.tau,
            all_utterances: weights.all_utterances,
        }
    }

    fn needs_speech(&self) -> bool {
        self.speech_bce || self.cross_modal()
    }

    fn needs_text(&self) -> bool {
        self.text_bce || self.cross_modal()
    }

    fn cross_modal(&self) -> bool {
        self.lambda_euc > 0.0 || self.lambda_con > 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bce_speech: f64,
    pub bce_text: f64,
    pub euclidean: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossTerms {
    fn accumulate(&mut self, other: &LossTerms, w: f64) {
        self.bce_speech += w * other.bce_speech;
        self.bce_text += w * other.bce_text;
        self.euclidean += w * other.euclidean;
        self.contrastive += w * other.contrastive;
        self.total += w * other.total;
    }
}

/// Loss values and gradients of every parameter the objective touched.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub terms: LossTerms,
    pub grads: Vec<(ParamId, Mat)>,
}

/// Build the training objective for one batch on a fresh session. Returns
/// the session, the total loss node and the per-term values. `dropout` and
/// `dropframe` are the training-time settings (0 / disabled for
/// deterministic checks).
pub fn forward_objective<'s>(
    model: &HierModel,
    store: &'s ParamStore,
    batch: &ContextBatch,
    plan: &LossPlan,
    dropout: f64,
    dropframe: &DropFrameConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Session<'s>, Var, LossTerms)> {
    let mut s = Session::train(store, dropout, rng.random());
    let mut terms = LossTerms::default();
    let mut parts: Vec<Var> = Vec::new();

    let speech = if plan.needs_speech() {
        let dropped: Vec<FeatureSequence> = batch.speech().into_iter().map(|x| drop_frames(x, dropframe, rng)).collect();
        let refs: Vec<&FeatureSequence> = dropped.iter().collect();
        Some(model.speech_branch(&mut s, &refs, &batch.layout)?)
    } else {
        None
    };
    let text = if plan.needs_text() {
        Some(model.text_branch(&mut s, &batch.transcripts()?, &batch.layout)?)
    } else {
        None
    };

    if let (true, Some(out)) = (plan.speech_bce, speech) {
        let l = bce_multilabel(&mut s.graph, out.logits, &batch.targets)?;
        terms.bce_speech = s.graph.scalar(l);
        parts.push(l);
    }
    if let (true, Some(out)) = (plan.text_bce, text) {
        let l = bce_multilabel(&mut s.graph, out.logits, &batch.targets)?;
        terms.bce_text = s.graph.scalar(l);
        parts.push(l);
    }
    if let (Some(sp), Some(tx)) = (speech, text) {
        if plan.cross_modal() {
            let (us, ut) = if plan.all_utterances {
                (sp.utterances, tx.utterances)
            } else {
                let targets = batch.layout.targets();
                (s.graph.gather(sp.utterances, &targets), s.graph.gather(tx.utterances, &targets))
            };
            if plan.lambda_euc > 0.0 {
                let l = euclidean_loss(&mut s.graph, us, ut)?;
                terms.euclidean = s.graph.scalar(l);
                parts.push(s.graph.scale(l, plan.lambda_euc));
            }
            if plan.lambda_con > 0.0 {
                let l = contrastive_loss(&mut s.graph, us, ut, plan.tau)?;
                terms.contrastive = s.graph.scalar(l);
                parts.push(s.graph.scale(l, plan.lambda_con));
            }
        }
    }
    let Some((&first, rest)) = parts.split_first() else {
        return Err(Error::Config("loss plan selects no loss terms".into()));
    };
    let total = rest.iter().fold(first, |acc, &p| s.graph.add(acc, p));
    terms.total = s.graph.scalar(total);
    if !terms.total.is_finite() {
        return Err(Error::Numerical {
            index: 0,
            message: format!("non-finite training loss {}", terms.total),
        });
    }
    Ok((s, total, terms))
}

/// Forward + backward for one batch.
pub fn compute_gradients(
    model: &HierModel,
    store: &ParamStore,
    batch: &ContextBatch,
    plan: &LossPlan,
    dropout: f64,
    dropframe: &DropFrameConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepResult> {
    let (s, total, terms) = forward_objective(model, store, batch, plan, dropout, dropframe, rng)?;
    let grads = s.param_grads(total);
    Ok(StepResult { terms, grads })
}

/// Keep only gradients of trainable buckets, clip, and apply Adam.
pub fn apply_step(store: &mut ParamStore, adam: &mut Adam, mut grads: Vec<(ParamId, Mat)>, trainable: impl Fn(Bucket) -> bool, clip: f64) {
    grads.retain(|(id, _)| trainable(store.bucket(*id)));
    clip_global_norm(&mut grads, clip);
    adam.update(store, &grads);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once `patience` epochs pass without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossTerms,
    pub dev_macro_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_macro_f1: Option<f64>,
    /// Wall-clock seconds spent on the epoch's optimisation steps.
    pub wall_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters restored to the best dev epoch.
    pub store: ParamStore,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_macro_f1: f64,
}

impl TrainOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

fn check_transcripts(regime: Regime, convs: &[Conversation]) -> Result<()> {
    if !regime.uses_text() {
        return Ok(());
    }
    for c in convs {
        if let Some(u) = c.utterances.iter().find(|u| u.transcript.is_none()) {
            return Err(Error::Config(format!(
                "regime {regime:?} needs transcripts but utterance {} has none",
                u.id
            )));
        }
    }
    Ok(())
}

/// Train `store` in place on `train`, early-stopping on `dev` macro-F1 of
/// the regime's test-time branch.
pub fn train(
    model: &HierModel,
    store: ParamStore,
    opts: &TrainOptions,
    train: &[Conversation],
    dev: &[Conversation],
) -> Result<TrainOutcome> {
    train_with_callback(model, store, opts, train, dev, |_| {})
}

pub fn train_with_callback(
    model: &HierModel,
    mut store: ParamStore,
    opts: &TrainOptions,
    train: &[Conversation],
    dev: &[Conversation],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let cfg = &opts.training;
    cfg.validate()?;
    opts.losses.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("train and dev splits must be non-empty".into()));
    }
    if cfg.n_max > model.conversation.max_len() {
        return Err(Error::Config(format!(
            "n_max {} exceeds conversation encoder capacity {}",
            cfg.n_max,
            model.conversation.max_len()
        )));
    }
    check_transcripts(cfg.regime, train)?;
    check_transcripts(cfg.regime, dev)?;

    let plan = LossPlan::for_regime(cfg.regime, &opts.losses);
    let branch = cfg.regime.test_branch();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_0F_7EA1);
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = store.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let started = Instant::now();
        let mut sums = LossTerms::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_conversations) {
            let mut contexts = Vec::new();
            for &ci in chunk {
                contexts.extend(contexts_of(&train[ci], cfg.n_max)?);
            }
            let batch = ContextBatch::new(&contexts, model.dims.num_labels)?;
            let step = compute_gradients(model, &store, &batch, &plan, cfg.dropout, &opts.dropframe, &mut rng)?;
            apply_step(&mut store, &mut adam, step.grads, |b| cfg.trainable(b), cfg.grad_clip);
            sums.accumulate(&step.terms, 1.0);
            batches += 1;
        }
        let wall_secs = started.elapsed().as_secs_f64();
        let mut losses = LossTerms::default();
        losses.accumulate(&sums, 1.0 / batches as f64);

        let dev_f1 = evaluate(model, &store, dev, cfg.n_max, branch, 0.5)?.macro_f1;
        let train_f1 = if cfg.eval_train {
            Some(evaluate(model, &store, train, cfg.n_max, branch, 0.5)?.macro_f1)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            losses,
            dev_macro_f1: dev_f1,
            train_macro_f1: train_f1,
            wall_secs,
        };
        on_epoch(&record);
        history.push(record);
        match stopper.observe(epoch, dev_f1) {
            StopDecision::Improved => best = store.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    Ok(TrainOutcome {
        store: best,
        adam,
        history,
        best_epoch: stopper.best_epoch,
        best_dev_macro_f1: stopper.best_metric,
    })
}

/// One row of the DropFrame sweep. `max_len == None` means disabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropFrameRow {
    pub max_len: Option<usize>,
    pub mean_epoch_secs: f64,
    pub dev_macro_f1: f64,
    pub epochs: usize,
}

/// Train one fresh model per DropFrame length (same seed) and report the
/// mean optimisation time per epoch alongside the best dev macro-F1.
pub fn benchmark_dropframe(
    model_config: &ModelConfig,
    dims: ModelDims,
    opts: &TrainOptions,
    train_convs: &[Conversation],
    dev: &[Conversation],
    lengths: &[Option<usize>],
) -> Result<Vec<DropFrameRow>> {
    lengths
        .iter()
        .map(|&len| {
            let (model, store) = HierModel::new(model_config, dims, opts.seed)?;
            let dropframe = match len {
                Some(l) => DropFrameConfig::new(l, true)?,
                None => DropFrameConfig::disabled(),
            };
            let run_opts = TrainOptions {
                dropframe,
                ..opts.clone()
            };
            let out = train(&model, store, &run_opts, train_convs, dev)?;
            let secs: f64 = out.history.iter().map(|r| r.wall_secs).sum();
            Ok(DropFrameRow {
                max_len: len,
                mean_epoch_secs: secs / out.history.len() as f64,
                dev_macro_f1: out.best_dev_macro_f1,
                epochs: out.history.len(),
            })
        })
        .collect()
}
