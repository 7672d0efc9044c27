//! Central finite-difference verification of analytic gradients, per
//! parameter tensor, on a tiny model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::config::GradcheckConfig;
use crate::conversation::ConversationVariant;
use crate::data::{contexts_of, Conversation, LabelVector, Speaker, TokenSequence, Utterance};
use crate::error::Result;
use crate::features::{DropFrameConfig, FeatureSequence};
use crate::losses::{bce_multilabel, contrastive_loss, contrastive_loss_attached, euclidean_loss, LossWeights};
use crate::model::{ContextBatch, HierModel, ModelConfig, ModelDims};
use crate::nn::{Bucket, ParamStore};
use crate::training::{forward_objective, LossPlan, Regime};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub case: String,
    pub tensor: String,
    pub size: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn norm(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Gradients smaller than this are compared on an absolute scale: central
/// differences carry roughly `1e-16 / step` of round-off per entry, which
/// would dominate a relative error for tensors whose true gradient is 0
/// (attention key biases, for instance).
pub const NORM_FLOOR: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let diff = norm(&(analytic - numeric));
    diff / norm(analytic).max(norm(numeric)).max(NORM_FLOOR)
}

/// Central differences of a scalar function of one matrix.
pub fn numeric_gradient(x: &mut Mat, step: f64, mut f: impl FnMut(&Mat) -> f64) -> Mat {
    let mut out = Mat::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = x[[r, c]];
        x[[r, c]] = orig + step;
        let plus = f(x);
        x[[r, c]] = orig - step;
        let minus = f(x);
        x[[r, c]] = orig;
        out[[r, c]] = (plus - minus) / (2.0 * step);
    }
    out
}

/// Check every input of a graph-level function.
pub fn check_graph_fn(case: &str, inputs: &[Mat], step: f64, f: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<TensorCheck> {
    let eval = |xs: &[Mat]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let grads = g.backward(out);
    let mut xs = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(inputs[i].dim()));
            let mut xi = xs[i].clone();
            let numeric = numeric_gradient(&mut xi, step, |x| {
                xs[i] = x.clone();
                let (g, _, out) = eval(&xs);
                g.scalar(out)
            });
            xs[i] = inputs[i].clone();
            TensorCheck {
                case: case.to_string(),
                tensor: format!("input{i}"),
                size: inputs[i].len(),
                analytic_norm: norm(&analytic),
                numeric_norm: norm(&numeric),
                rel_error: relative_error(&analytic, &numeric),
            }
        })
        .collect()
}

/// Loss-level checks on random inputs.
pub fn check_losses(cfg: &GradcheckConfig, seed: u64) -> Vec<TensorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_mat = |r: usize, c: usize| Mat::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5));
    let (b, d) = (cfg.batch, cfg.d_model);
    let logits = rand_mat(b, 5);
    let targets = Mat::from_shape_fn((b, 5), |(i, j)| ((i * 3 + j) % 2) as f64);
    let a = rand_mat(b, d);
    let t = rand_mat(b, d);
    let tau = LossWeights::default().tau;
    let mut out = Vec::new();
    out.extend(check_graph_fn("loss:bce", &[logits], cfg.step, |g, v| {
        bce_multilabel(g, v[0], &targets).expect("shapes match")
    }));
    // text side is detached inside these two, so only the speech input is
    // differentiated
    out.extend(check_graph_fn("loss:euclidean", &[a.clone()], cfg.step, |g, v| {
        let t = g.constant(t.clone());
        euclidean_loss(g, v[0], t).expect("shapes match")
    }));
    out.extend(check_graph_fn("loss:contrastive", &[a.clone()], cfg.step, |g, v| {
        let t = g.constant(t.clone());
        contrastive_loss(g, v[0], t, tau).expect("non-zero rows")
    }));
    out.extend(check_graph_fn("loss:contrastive-attached", &[a, t], cfg.step, |g, v| {
        contrastive_loss_attached(g, v[0], v[1], tau).expect("non-zero rows")
    }));
    out
}

const INPUT_DIM: usize = 6;
const VOCAB: usize = 12;
const LABELS: usize = 5;

/// A single conversation of `cfg.batch` utterances; every prefix is one
/// context, so the batch holds `cfg.batch` contexts.
pub fn tiny_conversation(cfg: &GradcheckConfig, seed: u64) -> Conversation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utterances = (0..cfg.batch)
        .map(|i| {
            let t = rng.random_range(2..=cfg.max_frames);
            let frames = Mat::from_shape_fn((t, INPUT_DIM), |_| rng.random_range(-1.0..1.0));
            let n_tok = rng.random_range(1..=4);
            let tokens = (0..n_tok).map(|_| rng.random_range(0..VOCAB)).collect();
            let mut bits: Vec<bool> = (0..LABELS).map(|_| rng.random_bool(0.4)).collect();
            bits[i % LABELS] = true;
            Utterance {
                id: format!("g{i}"),
                speaker: if i % 2 == 0 { Speaker::Agent } else { Speaker::Caller },
                speech: FeatureSequence::new(frames, 20.0).expect("finite frames"),
                transcript: Some(TokenSequence::new(tokens).expect("non-empty")),
                labels: LabelVector::from_bits(bits),
            }
        })
        .collect();
    Conversation::new("gradcheck".into(), utterances).expect("non-empty conversation")
}

pub fn tiny_model(
    cfg: &GradcheckConfig,
    variant: ConversationVariant,
    use_speaker: bool,
    seed: u64,
) -> Result<(HierModel, ParamStore)> {
    let config = ModelConfig {
        d_model: cfg.d_model,
        speech_layers: 2,
        speech_hidden: cfg.hidden,
        text_layers: 2,
        text_heads: 2,
        text_max_len: 8,
        conversation: variant,
        conversation_layers: 2,
        conversation_heads: 1,
        ffn_mult: 4,
        use_speaker,
    };
    let dims = ModelDims {
        input_dim: INPUT_DIM,
        vocab_size: VOCAB,
        num_labels: LABELS,
        max_context: cfg.batch,
    };
    HierModel::new(&config, dims, seed)
}

/// Compare analytic and numeric gradients of the objective selected by
/// `plan` for every parameter tensor in the model.
pub fn check_model(
    case: &str,
    model: &HierModel,
    store: &ParamStore,
    conv: &Conversation,
    plan: &LossPlan,
    step: f64,
) -> Result<Vec<TensorCheck>> {
    let contexts = contexts_of(conv, model.dims.max_context)?;
    let batch = ContextBatch::new(&contexts, model.dims.num_labels)?;
    let off = DropFrameConfig::disabled();
    // The cross-modal terms see text embeddings through a stop-gradient, so
    // their derivative with respect to text parameters is 0 by definition.
    // Finite differences cannot express that; for text tensors they are
    // taken of the objective without those terms.
    let text_plan = LossPlan {
        lambda_euc: 0.0,
        lambda_con: 0.0,
        ..*plan
    };
    let loss_at = |st: &ParamStore, plan: &LossPlan| -> Result<f64> {
        if !plan.speech_bce && !plan.text_bce && plan.lambda_euc == 0.0 && plan.lambda_con == 0.0 {
            return Ok(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, terms) = forward_objective(model, st, &batch, plan, 0.0, &off, &mut rng)?;
        Ok(terms.total)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (s, total, _) = forward_objective(model, store, &batch, plan, 0.0, &off, &mut rng)?;
    let analytic = s.param_grads(total);
    drop(s);

    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let a = analytic
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| Mat::zeros(store.get(id).dim()));
        let fd_plan = if store.bucket(id) == Bucket::Text { &text_plan } else { plan };
        let mut numeric = Mat::zeros(a.dim());
        let cols = a.ncols();
        for idx in 0..a.len() {
            let (r, c) = (idx / cols, idx % cols);
            let orig = store.get(id)[[r, c]];
            work.get_mut(id)[[r, c]] = orig + step;
            let plus = loss_at(&work, fd_plan)?;
            work.get_mut(id)[[r, c]] = orig - step;
            let minus = loss_at(&work, fd_plan)?;
            work.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = (plus - minus) / (2.0 * step);
        }
        out.push(TensorCheck {
            case: case.to_string(),
            tensor: store.name(id).to_string(),
            size: a.len(),
            analytic_norm: norm(&a),
            numeric_norm: norm(&numeric),
            rel_error: relative_error(&a, &numeric),
        });
    }
    Ok(out)
}

/// Every loss on its own and the full composed objective, for both
/// conversation encoder variants.
pub fn run(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let mut checks = check_losses(cfg, seed);
    let conv = tiny_conversation(cfg, seed);
    let weights = LossWeights::default();
    let full = LossPlan::for_regime(Regime::HierSt, &weights);
    let only = |speech_bce, text_bce, euc, con| LossPlan {
        speech_bce,
        text_bce,
        lambda_euc: euc,
        lambda_con: con,
        ..full
    };
    let cases = [
        ("transformer:bce-speech", ConversationVariant::Transformer, false, only(true, false, 0.0, 0.0)),
        ("transformer:bce-text", ConversationVariant::Transformer, false, only(false, true, 0.0, 0.0)),
        ("transformer:euclidean", ConversationVariant::Transformer, false, only(false, false, 1.0, 0.0)),
        ("transformer:contrastive", ConversationVariant::Transformer, false, only(false, false, 0.0, 1.0)),
        ("transformer:composite", ConversationVariant::Transformer, false, full),
        ("transformer+speaker:composite", ConversationVariant::Transformer, true, full),
        ("recurrent:composite", ConversationVariant::Recurrent, false, full),
    ];
    for (case, variant, speaker, plan) in cases {
        let (model, store) = tiny_model(cfg, variant, speaker, seed)?;
        checks.extend(check_model(case, &model, &store, &conv, &plan, cfg.step)?);
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < cfg.tolerance,
        checks,
        max_rel_error,
        tolerance: cfg.tolerance,
    })
}
