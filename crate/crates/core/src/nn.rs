//! Parameter storage, forward-pass sessions and the shared layer
//! building blocks (linear, LSTM, post-norm transformer layer).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Block, Graph, Mat, Var};
use crate::error::{Error, Result};

/// Disjoint parameter groups: speech branch (θ^s), text branch (θ^t),
/// shared conversation encoder (φ), shared classifier head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Speech,
    Text,
    Conversation,
    Classifier,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Speech, Bucket::Text, Bucket::Conversation, Bucket::Classifier];

    fn code(self) -> u8 {
        match self {
            Bucket::Speech => 0,
            Bucket::Text => 1,
            Bucket::Conversation => 2,
            Bucket::Classifier => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Bucket::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, bucketed parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    buckets: Vec<Bucket>,
    values: Vec<Mat>,
    by_name: HashMap<String, usize>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"HSLUCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bucket: Bucket, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.buckets.push(bucket);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn bucket(&self, id: ParamId) -> Bucket {
        self.buckets[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn in_bucket(&self, bucket: Bucket) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.bucket(id) == bucket)
    }

    pub fn num_scalars(&self, bucket: Option<Bucket>) -> usize {
        self.ids()
            .filter(|&id| bucket.is_none_or(|b| self.bucket(id) == b))
            .map(|id| self.get(id).len())
            .sum()
    }

    /// FNV-1a over the bit patterns of every value in `bucket`.
    pub fn checksum(&self, bucket: Bucket) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.in_bucket(bucket) {
            for v in self.get(id).iter() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Binary checkpoint: magic `HSLUCKPT`, `u32` version, `u32` tensor
    /// count, then per tensor `u32` name length, UTF-8 name, `u8` bucket,
    /// `u32` rows, `u32` cols and `rows*cols` little-endian `f64` values in
    /// row-major order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for id in self.ids() {
            let name = self.name(id).as_bytes();
            let m = self.get(id);
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(self.bucket(id).code());
            buf.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let bucket = Bucket::from_code(cur.take(1)?[0])
                .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown bucket")))?;
            let rows = cur.u32()? as usize;
            let cols = cur.u32()? as usize;
            let vals = cur
                .take(rows * cols * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Array2::from_shape_vec((rows, cols), vals).expect("shape matches count");
            if store.find(&name).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            store.add(name, bucket, m);
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    /// Copy values from `other`, which must hold exactly the same tensor
    /// names, buckets and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for id in self.ids() {
            let name = self.name(id).to_string();
            let src = other
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor {name}")))?;
            if other.get(src).dim() != self.get(id).dim() || other.bucket(src) != self.bucket(id) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?} vs model {:?}",
                    other.get(src).dim(),
                    self.get(id).dim()
                )));
            }
        }
        for id in self.ids() {
            let src = other.find(&self.names[id.0]).expect("checked above");
            self.values[id.0] = other.get(src).clone();
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Per-forward-pass state: the graph, lazily bound parameter leaves and the
/// dropout configuration.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    dropout: f64,
    rng: ChaCha8Rng,
}

impl<'s> Session<'s> {
    /// Inference session: no dropout.
    pub fn eval(store: &'s ParamStore) -> Self {
        Self::new(store, 0.0, 0)
    }

    pub fn train(store: &'s ParamStore, dropout: f64, seed: u64) -> Self {
        Self::new(store, dropout, seed)
    }

    fn new(store: &'s ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.dropout > 0.0
    }

    /// Leaf for parameter `id`; every use within a session shares one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|id| self.bound[id.0].is_some()).collect()
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        if self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let dim = self.graph.value(x).dim();
        let rng = &mut self.rng;
        let mask = Array2::from_shape_fn(dim, |_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 });
        self.graph.mul_const(x, mask)
    }

    /// Backpropagate from `loss` and return gradients of every bound
    /// parameter that the loss depends on, in parameter order.
    pub fn param_grads(&self, loss: Var) -> Vec<(ParamId, Mat)> {
        let mut grads = self.graph.backward(loss);
        self.store
            .ids()
            .filter_map(|id| {
                let v = self.bound[id.0]?;
                grads.take(v).map(|g| (id, g))
            })
            .collect()
    }
}

pub(crate) fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: store.add(format!("{name}.weight"), bucket, uniform(input, output, bound, rng)),
            bias: store.add(format!("{name}.bias"), bucket, Mat::zeros((1, output))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.graph.matmul(x, w);
        s.graph.add_row(y, b)
    }
}

/// One direction of one LSTM layer. Gate order: input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmDirection {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut bias = Mat::zeros((1, 4 * hidden));
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        Self {
            w_ih: store.add(format!("{name}.w_ih"), bucket, uniform(input, 4 * hidden, bound, rng)),
            w_hh: store.add(format!("{name}.w_hh"), bucket, uniform(hidden, 4 * hidden, bound, rng)),
            bias: store.add(format!("{name}.bias"), bucket, bias),
            hidden,
        }
    }

    /// Run over `inputs` (one `B × in` matrix per time step) in the given
    /// direction. Rows whose mask is false keep their previous state, so
    /// padded steps leave both directions untouched. Returns the per-step
    /// hidden states in time order and the final hidden state.
    fn run(&self, s: &mut Session, inputs: &[Var], masks: &[Vec<bool>], reverse: bool) -> (Vec<Var>, Var) {
        let batch = s.graph.value(inputs[0]).nrows();
        let h_dim = self.hidden;
        let w_ih = s.param(self.w_ih);
        let w_hh = s.param(self.w_hh);
        let bias = s.param(self.bias);
        let mut h = s.graph.constant(Mat::zeros((batch, h_dim)));
        let mut c = s.graph.constant(Mat::zeros((batch, h_dim)));
        let steps = inputs.len();
        let mut outs = vec![h; steps];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let xw = s.graph.matmul(inputs[t], w_ih);
            let hw = s.graph.matmul(h, w_hh);
            let z = s.graph.add(xw, hw);
            let z = s.graph.add_row(z, bias);
            let hc = s.graph.lstm_cell(z, c);
            let h_new = s.graph.slice_cols(hc, 0, h_dim);
            let c_new = s.graph.slice_cols(hc, h_dim, 2 * h_dim);
            h = s.graph.masked_update(h_new, h, &masks[t]);
            c = s.graph.masked_update(c_new, c, &masks[t]);
            outs[t] = h;
        }
        (outs, h)
    }
}

/// Stacked bidirectional LSTM.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub layers: Vec<(LstmDirection, LstmDirection)>,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bucket: Bucket,
        input: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { 2 * hidden };
                (
                    LstmDirection::new(store, &format!("{name}.l{l}.fwd"), bucket, in_dim, hidden, rng),
                    LstmDirection::new(store, &format!("{name}.l{l}.bwd"), bucket, in_dim, hidden, rng),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].0.hidden
    }

    /// Final forward state (after each row's last valid step) and final
    /// backward state (after reaching step 0) of the top layer.
    pub fn final_states(&self, s: &mut Session, inputs: &[Var], masks: &[Vec<bool>]) -> (Var, Var) {
        let mut xs = inputs.to_vec();
        let mut last = None;
        for (li, (fwd, bwd)) in self.layers.iter().enumerate() {
            let (of, hf) = fwd.run(s, &xs, masks, false);
            let (ob, hb) = bwd.run(s, &xs, masks, true);
            last = Some((hf, hb));
            if li + 1 < self.layers.len() {
                xs = of.iter().zip(&ob).map(|(&a, &b)| s.graph.concat_cols(&[a, b])).collect();
            }
        }
        last.expect("at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, bucket: Bucket, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), bucket, Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), bucket, Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.graph.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Post-norm transformer encoder layer: multi-head self-attention and a
/// ReLU feed-forward block, each followed by residual + layer norm.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
    pub heads: usize,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        bucket: Bucket,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.attn.query"), bucket, d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.attn.key"), bucket, d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.attn.value"), bucket, d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.attn.out"), bucket, d_model, d_model, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), bucket, d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), bucket, d_model, ffn_dim, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), bucket, ffn_dim, d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), bucket, d_model),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, blocks: &[Block]) -> Var {
        let d_model = s.graph.value(x).ncols();
        let head_dim = d_model / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(s, x);
        let k = self.key.forward(s, x);
        let v = self.value.forward(s, x);
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * head_dim, (h + 1) * head_dim);
                let qh = s.graph.slice_cols(q, a, b);
                let kh = s.graph.slice_cols(k, a, b);
                let vh = s.graph.slice_cols(v, a, b);
                s.graph.attention(qh, kh, vh, blocks, scale)
            })
            .collect();
        let attn = if heads.len() == 1 { heads[0] } else { s.graph.concat_cols(&heads) };
        let attn = self.out.forward(s, attn);
        let attn = s.dropout(attn);
        let x = s.graph.add(x, attn);
        let x = self.norm1.forward(s, x);

        let f = self.ff1.forward(s, x);
        let f = s.graph.relu(f);
        let f = self.ff2.forward(s, f);
        let f = s.dropout(f);
        let x2 = s.graph.add(x, f);
        self.norm2.forward(s, x2)
    }
}

/// Packed-row layout for a list of sequence lengths.
pub fn blocks_for(lengths: &[usize]) -> Vec<Block> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let b = Block { start, len };
            start += len;
            b
        })
        .collect()
}
