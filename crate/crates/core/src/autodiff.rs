//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a differentiable leaf.
//! Constants and detached values never receive gradients, so a loss that
//! only touches detached inputs leaves those inputs' producers with exact
//! zero gradient.
//!
//! Everything is a rank-2 matrix; vectors are `1 × n` rows and scalars are
//! `1 × 1`. A few composite operations (LSTM cell, layer norm, blocked
//! attention, the three training losses) are fused nodes with hand-written
//! backward passes.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows forming one independent sequence in a packed
/// matrix. Attention never crosses block boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Mat),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    MaskedUpdate {
        new: Var,
        old: Var,
        mask: Vec<bool>,
    },
    LstmCell {
        gates: Var,
        c_prev: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        blocks: Vec<Block>,
        scale: f64,
        probs: Vec<Mat>,
    },
    Sum(Var),
    BceLogits {
        logits: Var,
        targets: Mat,
    },
    Euclidean {
        a: Var,
        b: Var,
    },
    Contrastive {
        a: Var,
        b: Var,
        tau: f64,
        // row-normalised inputs and the two softmax matrices
        na: Mat,
        nb: Mat,
        norms_a: Vec<f64>,
        norms_b: Vec<f64>,
        row_soft: Mat,
        col_soft: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss through any differentiable path.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the tape (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, n) = self.value(a).dim();
        assert_eq!(self.value(row).dim(), (1, n), "add_row: bias shape mismatch");
        let value = self.value(a) + self.value(row);
        let ng = self.ng(&[a, row]);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: Var, m: Mat) -> Var {
        assert_eq!(self.value(a).dim(), m.dim(), "mul_const: shape mismatch");
        let value = self.value(a) * &m;
        let ng = self.ng(&[a]);
        self.push(value, Op::MulConst(a, m), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(&[a]);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col mismatch");
        let ng = self.ng(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row gather: output row `i` is row `idx[i]` of `a`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let ng = self.ng(&[a]);
        self.push(value, Op::Gather(a, idx.to_vec()), ng)
    }

    /// Row-wise `mask ? new : old`.
    pub fn masked_update(&mut self, new: Var, old: Var, mask: &[bool]) -> Var {
        let (rows, _) = self.value(new).dim();
        assert_eq!(self.value(old).dim(), self.value(new).dim());
        assert_eq!(mask.len(), rows);
        let mut value = self.value(old).clone();
        for (r, &keep_new) in mask.iter().enumerate() {
            if keep_new {
                value.row_mut(r).assign(&self.value(new).row(r));
            }
        }
        let ng = self.ng(&[new, old]);
        self.push(
            value,
            Op::MaskedUpdate {
                new,
                old,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    /// Standard LSTM cell on pre-activations `gates` (`B × 4H`, gate order
    /// input, forget, cell, output). Returns `[h | c]` as `B × 2H`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let z = self.value(gates);
        let cp = self.value(c_prev);
        let (b, h4) = z.dim();
        let h = h4 / 4;
        assert_eq!(cp.dim(), (b, h), "lstm_cell: state shape mismatch");
        let mut out = Mat::zeros((b, 2 * h));
        for r in 0..b {
            for j in 0..h {
                let i = sigmoid(z[[r, j]]);
                let f = sigmoid(z[[r, h + j]]);
                let g = z[[r, 2 * h + j]].tanh();
                let o = sigmoid(z[[r, 3 * h + j]]);
                let c = f * cp[[r, j]] + i * g;
                out[[r, j]] = o * c.tanh();
                out[[r, h + j]] = c;
            }
        }
        let ng = self.ng(&[gates, c_prev]);
        self.push(out, Op::LstmCell { gates, c_prev }, ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, n) = xv.dim();
        let mut normed = Mat::zeros((rows, n));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(normed.row_mut(r))
                .and(row)
                .for_each(|o, &v| *o = (v - mean) * is);
        }
        let value = &normed * self.value(gamma) + self.value(beta);
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            ng,
        )
    }

    /// Scaled dot-product attention evaluated independently inside each
    /// block of rows: `softmax(Q Kᵀ · scale) V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, blocks: &[Block], scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros((qv.nrows(), vv.ncols()));
        let mut probs = Vec::with_capacity(blocks.len());
        for blk in blocks {
            let rows = blk.start..blk.start + blk.len;
            let qb = qv.slice(s![rows.clone(), ..]);
            let kb = kv.slice(s![rows.clone(), ..]);
            let vb = vv.slice(s![rows.clone(), ..]);
            let mut p = qb.dot(&kb.t()) * scale;
            for mut row in p.rows_mut() {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|x| (x - m).exp());
                let z = row.sum();
                row.mapv_inplace(|x| x / z);
            }
            out.slice_mut(s![rows, ..]).assign(&p.dot(&vb));
            probs.push(p);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                blocks: blocks.to_vec(),
                scale,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Mean binary cross-entropy over every entry, from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), targets.dim(), "bce: shape mismatch");
        let n = z.len() as f64;
        let total: f64 = Zip::from(z)
            .and(&targets)
            .fold(0.0, |acc, &zi, &yi| acc + softplus(zi) - zi * yi);
        let ng = self.ng(&[logits]);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::BceLogits { logits, targets },
            ng,
        )
    }

    /// Mean over rows of `‖a_i − b_i‖₂`.
    pub fn euclidean(&mut self, a: Var, b: Var) -> Var {
        let diff = self.value(a) - self.value(b);
        let rows = diff.nrows() as f64;
        let total: f64 = diff
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum();
        let ng = self.ng(&[a, b]);
        self.push(Mat::from_elem((1, 1), total / rows), Op::Euclidean { a, b }, ng)
    }

    /// Symmetric temperature-scaled cosine contrastive loss between paired
    /// rows of `a` and `b`. Returns `Err(row)` for the first zero-norm row
    /// (rows of `a` first, then `b`).
    pub fn contrastive(&mut self, a: Var, b: Var, tau: f64) -> Result<Var, usize> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "contrastive: shape mismatch");
        let n = av.nrows();
        let norms = |m: &Mat| -> Vec<f64> { m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect() };
        let norms_a = norms(av);
        let norms_b = norms(bv);
        if let Some(i) = norms_a.iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(i);
        }
        if let Some(i) = norms_b.iter().position(|&x| x == 0.0 || !x.is_finite()) {
            return Err(i);
        }
        let mut na = av.clone();
        for (mut r, &nrm) in na.rows_mut().into_iter().zip(&norms_a) {
            r /= nrm;
        }
        let mut nb = bv.clone();
        for (mut r, &nrm) in nb.rows_mut().into_iter().zip(&norms_b) {
            r /= nrm;
        }
        let sim = na.dot(&nb.t()) / tau;
        let mut row_soft = Mat::zeros((n, n));
        let mut col_soft = Mat::zeros((n, n));
        let mut total = 0.0;
        for i in 0..n {
            let row_lse = log_sum_exp(sim.row(i).iter().copied());
            let col_lse = log_sum_exp(sim.column(i).iter().copied());
            total += (sim[[i, i]] - row_lse) + (sim[[i, i]] - col_lse);
            for j in 0..n {
                row_soft[[i, j]] = (sim[[i, j]] - row_lse).exp();
                col_soft[[j, i]] = (sim[[j, i]] - col_lse).exp();
            }
        }
        let loss = -total / (2.0 * n as f64);
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Mat::from_elem((1, 1), loss),
            Op::Contrastive {
                a,
                b,
                tau,
                na,
                nb,
                norms_a,
                norms_b,
                row_soft,
                col_soft,
            },
            ng,
        ))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accum(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accum(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g * self.value(*b));
                self.accum(grads, *b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.nodes[row.0].needs_grad {
                    self.accum(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.accum(grads, *a, g * *c),
            Op::MulConst(a, m) => self.accum(grads, *a, g * m),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= y * (1.0 - y));
                self.accum(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let mut d = g.clone();
                Zip::from(&mut d).and(y).for_each(|d, &y| *d *= 1.0 - y * y);
                self.accum(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                Zip::from(&mut d).and(x).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                self.accum(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.nodes[p.0].needs_grad {
                        self.accum(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.nodes[p.0].needs_grad {
                        self.accum(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::Gather(a, idx) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                for (r, &src) in idx.iter().enumerate() {
                    let mut target = d.row_mut(src);
                    target += &g.row(r);
                }
                self.accum(grads, *a, d);
            }
            Op::MaskedUpdate { new, old, mask } => {
                let mut dn = g.clone();
                let mut dold = g.clone();
                for (r, &keep_new) in mask.iter().enumerate() {
                    if keep_new {
                        dold.row_mut(r).fill(0.0);
                    } else {
                        dn.row_mut(r).fill(0.0);
                    }
                }
                self.accum(grads, *new, dn);
                self.accum(grads, *old, dold);
            }
            Op::LstmCell { gates, c_prev } => {
                let z = self.value(*gates);
                let cp = self.value(*c_prev);
                let (b, h2) = node.value.dim();
                let h = h2 / 2;
                let mut dz = Mat::zeros((b, 4 * h));
                let mut dcp = Mat::zeros((b, h));
                for r in 0..b {
                    for j in 0..h {
                        let i = sigmoid(z[[r, j]]);
                        let f = sigmoid(z[[r, h + j]]);
                        let gg = z[[r, 2 * h + j]].tanh();
                        let o = sigmoid(z[[r, 3 * h + j]]);
                        let c = node.value[[r, h + j]];
                        let tc = c.tanh();
                        let dh = g[[r, j]];
                        let dc = g[[r, h + j]] + dh * o * (1.0 - tc * tc);
                        dz[[r, j]] = dc * gg * i * (1.0 - i);
                        dz[[r, h + j]] = dc * cp[[r, j]] * f * (1.0 - f);
                        dz[[r, 2 * h + j]] = dc * i * (1.0 - gg * gg);
                        dz[[r, 3 * h + j]] = dh * tc * o * (1.0 - o);
                        dcp[[r, j]] = dc * f;
                    }
                }
                self.accum(grads, *gates, dz);
                self.accum(grads, *c_prev, dcp);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                if self.nodes[beta.0].needs_grad {
                    self.accum(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[gamma.0].needs_grad {
                    self.accum(grads, *gamma, (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.nodes[x.0].needs_grad {
                    let dxhat = g * self.value(*gamma);
                    let n = normed.ncols() as f64;
                    let mut dx = Mat::zeros(normed.dim());
                    for r in 0..normed.nrows() {
                        let dr = dxhat.row(r);
                        let xr = normed.row(r);
                        let m1 = dr.sum() / n;
                        let m2 = dr.dot(&xr) / n;
                        Zip::from(dx.row_mut(r))
                            .and(dr)
                            .and(xr)
                            .for_each(|o, &d, &xh| *o = inv_std[r] * (d - m1 - xh * m2));
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                blocks,
                scale,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = Mat::zeros(qv.dim());
                let mut dk = Mat::zeros(kv.dim());
                let mut dv = Mat::zeros(vv.dim());
                for (blk, p) in blocks.iter().zip(probs) {
                    let rows = blk.start..blk.start + blk.len;
                    let gb = g.slice(s![rows.clone(), ..]);
                    let qb = qv.slice(s![rows.clone(), ..]);
                    let kb = kv.slice(s![rows.clone(), ..]);
                    let vb = vv.slice(s![rows.clone(), ..]);
                    dv.slice_mut(s![rows.clone(), ..]).assign(&p.t().dot(&gb));
                    let dp = gb.dot(&vb.t());
                    let mut ds = p * &dp;
                    for (mut dsr, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                        let inner: f64 = dsr.sum();
                        Zip::from(&mut dsr).and(pr).for_each(|d, &pv| *d -= pv * inner);
                    }
                    ds *= *scale;
                    dq.slice_mut(s![rows.clone(), ..]).assign(&ds.dot(&kb));
                    dk.slice_mut(s![rows, ..]).assign(&ds.t().dot(&qb));
                }
                self.accum(grads, *q, dq);
                self.accum(grads, *k, dk);
                self.accum(grads, *v, dv);
            }
            Op::Sum(a) => {
                let c = g[[0, 0]];
                self.accum(grads, *a, Mat::from_elem(self.value(*a).dim(), c));
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits);
                let c = g[[0, 0]] / z.len() as f64;
                let mut d = Mat::zeros(z.dim());
                Zip::from(&mut d)
                    .and(z)
                    .and(targets)
                    .for_each(|d, &zi, &yi| *d = c * (sigmoid(zi) - yi));
                self.accum(grads, *logits, d);
            }
            Op::Euclidean { a, b } => {
                let mut diff = self.value(*a) - self.value(*b);
                let c = g[[0, 0]] / diff.nrows() as f64;
                for mut r in diff.rows_mut() {
                    let nrm = r.dot(&r).sqrt();
                    if nrm > 0.0 {
                        r *= c / nrm;
                    } else {
                        r.fill(0.0);
                    }
                }
                self.accum(grads, *b, -&diff);
                self.accum(grads, *a, diff);
            }
            Op::Contrastive {
                a,
                b,
                tau,
                na,
                nb,
                norms_a,
                norms_b,
                row_soft,
                col_soft,
            } => {
                let n = na.nrows();
                let mut ds = row_soft + col_soft;
                for i in 0..n {
                    ds[[i, i]] -= 2.0;
                }
                ds *= g[[0, 0]] / (2.0 * n as f64 * tau);
                let unnormalize = |dn: Mat, unit: &Mat, norms: &[f64]| -> Mat {
                    let mut out = dn;
                    for ((mut o, u), &nrm) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
                        let proj = o.dot(&u);
                        Zip::from(&mut o).and(u).for_each(|o, &ui| *o = (*o - ui * proj) / nrm);
                    }
                    out
                };
                if self.nodes[a.0].needs_grad {
                    self.accum(grads, *a, unnormalize(ds.dot(nb), na, norms_a));
                }
                if self.nodes[b.0].needs_grad {
                    self.accum(grads, *b, unnormalize(ds.t().dot(na), nb, norms_b));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn detached_inputs_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 2.0]]);
        let b = g.param(array![[0.5, -1.0]]);
        let bd = g.detach(b);
        let d = g.euclidean(a, bd);
        let grads = g.backward(d);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn matmul_gradient_shapes() {
        let mut g = Graph::new();
        let a = g.param(Mat::ones((2, 3)));
        let b = g.param(Mat::ones((3, 4)));
        let c = g.matmul(a, b);
        let s = g.sum(c);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &Mat::from_elem((2, 3), 4.0));
        assert_eq!(grads.get(b).unwrap(), &Mat::from_elem((3, 4), 2.0));
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0], [2.0]]);
        let r = g.gather(a, &[1, 1, 0]);
        let s = g.sum(r);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap(), &array![[1.0], [2.0]]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rejected_in_contrastive() {
        let mut g = Graph::new();
        let a = g.param(array![[1.0, 0.0], [0.0, 0.0]]);
        let b = g.param(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(g.contrastive(a, b, 0.1).unwrap_err(), 1);
    }
}
