//! Straight-line reference implementations: one example at a time, plain
//! loops over `Vec<f64>`, parameters looked up by name. Used as an
//! independent oracle for the batched, graph-based forward passes.
#![allow(dead_code)]

use hierslu::autodiff::Mat;
use hierslu::conversation::ConversationVariant;
use hierslu::model::ModelConfig;
use hierslu::nn::ParamStore;

pub type Vector = Vec<f64>;

fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Mat {
    let id = store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    store.get(id)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W + b` for a row vector `x`.
fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vector {
    let w = param(store, &format!("{name}.weight"));
    let b = param(store, &format!("{name}.bias"));
    (0..w.ncols())
        .map(|j| {
            let mut acc = b[[0, j]];
            for (i, xi) in x.iter().enumerate() {
                acc += xi * w[[i, j]];
            }
            acc
        })
        .collect()
}

/// One LSTM direction over `xs`. Returns per-step outputs in time order
/// and the state after the last processed step.
fn lstm_direction(store: &ParamStore, name: &str, xs: &[Vector], reverse: bool) -> (Vec<Vector>, Vector) {
    let w_ih = param(store, &format!("{name}.w_ih"));
    let w_hh = param(store, &format!("{name}.w_hh"));
    let bias = param(store, &format!("{name}.bias"));
    let hidden = w_hh.nrows();
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    let mut outs = vec![Vec::new(); xs.len()];
    let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for t in order {
        let mut z = vec![0.0; 4 * hidden];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = bias[[0, j]];
            for (i, xi) in xs[t].iter().enumerate() {
                acc += xi * w_ih[[i, j]];
            }
            for (i, hi) in h.iter().enumerate() {
                acc += hi * w_hh[[i, j]];
            }
            *zj = acc;
        }
        for j in 0..hidden {
            let ig = sigmoid(z[j]);
            let fg = sigmoid(z[hidden + j]);
            let gg = z[2 * hidden + j].tanh();
            let og = sigmoid(z[3 * hidden + j]);
            c[j] = fg * c[j] + ig * gg;
            h[j] = og * c[j].tanh();
        }
        outs[t] = h.clone();
    }
    (outs, h)
}

/// Top-layer final forward and backward states of a stacked BiLSTM.
fn bilstm_final(store: &ParamStore, prefix: &str, layers: usize, xs: &[Vector]) -> (Vector, Vector) {
    let mut xs = xs.to_vec();
    let mut last = (Vec::new(), Vec::new());
    for l in 0..layers {
        let (of, hf) = lstm_direction(store, &format!("{prefix}.l{l}.fwd"), &xs, false);
        let (ob, hb) = lstm_direction(store, &format!("{prefix}.l{l}.bwd"), &xs, true);
        xs = of.iter().zip(&ob).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
        last = (hf, hb);
    }
    last
}

pub fn speech_embedding(store: &ParamStore, config: &ModelConfig, frames: &Mat) -> Vector {
    let xs: Vec<Vector> = frames.rows().into_iter().map(|r| r.to_vec()).collect();
    let (hf, hb) = bilstm_final(store, "speech.lstm", config.speech_layers, &xs);
    let both: Vector = hf.into_iter().chain(hb).collect();
    linear(store, "speech.proj", &both)
}

fn layer_norm(store: &ParamStore, name: &str, x: &[f64]) -> Vector {
    let gamma = param(store, &format!("{name}.gamma"));
    let beta = param(store, &format!("{name}.beta"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gamma[[0, j]] + beta[[0, j]])
        .collect()
}

/// Post-norm encoder layer over one sequence.
fn transformer_layer(store: &ParamStore, prefix: &str, heads: usize, xs: &[Vector]) -> Vec<Vector> {
    let d = xs[0].len();
    let hd = d / heads;
    let q: Vec<Vector> = xs.iter().map(|x| linear(store, &format!("{prefix}.attn.query"), x)).collect();
    let k: Vec<Vector> = xs.iter().map(|x| linear(store, &format!("{prefix}.attn.key"), x)).collect();
    let v: Vec<Vector> = xs.iter().map(|x| linear(store, &format!("{prefix}.attn.value"), x)).collect();
    let n = xs.len();
    let mut attn = vec![vec![0.0; d]; n];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                attn[i][c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    xs.iter()
        .zip(&attn)
        .map(|(x, a)| {
            let o = linear(store, &format!("{prefix}.attn.out"), a);
            let r: Vector = x.iter().zip(&o).map(|(p, q)| p + q).collect();
            let y = layer_norm(store, &format!("{prefix}.norm1"), &r);
            let f: Vector = linear(store, &format!("{prefix}.ff1"), &y).into_iter().map(|v| v.max(0.0)).collect();
            let f = linear(store, &format!("{prefix}.ff2"), &f);
            let r2: Vector = y.iter().zip(&f).map(|(p, q)| p + q).collect();
            layer_norm(store, &format!("{prefix}.norm2"), &r2)
        })
        .collect()
}

pub fn text_embedding(store: &ParamStore, config: &ModelConfig, tokens: &[usize]) -> Vector {
    let tok = param(store, "text.token_embedding");
    let cls = param(store, "text.cls_embedding");
    let pos = param(store, "text.position_embedding");
    let mut xs: Vec<Vector> = vec![cls.row(0).iter().zip(pos.row(0).iter()).map(|(a, b)| a + b).collect()];
    for (p, &t) in tokens.iter().enumerate() {
        xs.push(tok.row(t).iter().zip(pos.row(p + 1).iter()).map(|(a, b)| a + b).collect());
    }
    for l in 0..config.text_layers {
        xs = transformer_layer(store, &format!("text.layer{l}"), config.text_heads, &xs);
    }
    xs.swap_remove(0)
}

/// Context embedding of one window of utterance embeddings (oldest first).
pub fn context_embedding(store: &ParamStore, config: &ModelConfig, window: &[Vector], speakers: &[usize]) -> Vector {
    let mut xs: Vec<Vector> = window.to_vec();
    if config.use_speaker {
        let table = param(store, "conversation.speaker_embedding");
        for (x, &s) in xs.iter_mut().zip(speakers) {
            for (j, v) in x.iter_mut().enumerate() {
                *v += table[[s, j]];
            }
        }
    }
    match config.conversation {
        ConversationVariant::Transformer => {
            let pos = param(store, "conversation.position_embedding");
            for (p, x) in xs.iter_mut().enumerate() {
                for (j, v) in x.iter_mut().enumerate() {
                    *v += pos[[p, j]];
                }
            }
            for l in 0..config.conversation_layers {
                xs = transformer_layer(store, &format!("conversation.layer{l}"), config.conversation_heads, &xs);
            }
            xs.pop().expect("non-empty window")
        }
        ConversationVariant::Recurrent => {
            let (hf, hb) = bilstm_final(store, "conversation.lstm", 1, &xs);
            hf.iter().zip(&hb).map(|(a, b)| a + b).collect()
        }
    }
}

pub fn logits(store: &ParamStore, context: &[f64]) -> Vector {
    linear(store, "classifier", context)
}

pub fn bce(logits: &[Vector], targets: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for (z, y) in logits.iter().zip(targets) {
        for (&zi, &yi) in z.iter().zip(y) {
            let p = sigmoid(zi);
            total -= if yi { p.ln() } else { (1.0 - p).ln() };
            count += 1.0;
        }
    }
    total / count
}

pub fn euclidean(a: &[Vector], b: &[Vector]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    total / a.len() as f64
}

pub fn contrastive(a: &[Vector], b: &[Vector], tau: f64) -> f64 {
    let unit = |v: &Vector| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vector>()
    };
    let ua: Vec<Vector> = a.iter().map(unit).collect();
    let ub: Vec<Vector> = b.iter().map(unit).collect();
    let n = a.len();
    let sim = |i: usize, j: usize| ua[i].iter().zip(&ub[j]).map(|(p, q)| p * q).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| sim(i, j).exp()).sum();
        let col: f64 = (0..n).map(|j| sim(j, i).exp()).sum();
        total += -(sim(i, i).exp() / row).ln() - (sim(i, i).exp() / col).ln();
    }
    total / (2.0 * n as f64)
}
