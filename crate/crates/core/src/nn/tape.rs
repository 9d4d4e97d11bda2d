//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamStore`] rather than copied; each parameter gets
//! at most one node per tape. [`Tape::backward`] walks the nodes in reverse
//! and returns a [`Gradients`] holding one gradient per reachable node and
//! per parameter.
//!
//! Most operations work on rank-1 vectors or rank-2 matrices. A vector is
//! treated as a single row wherever an operation talks about rows.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::linalg::{gemm, View, ViewMut};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Parameter ids of one GRU layer. Gate matrices are `hidden x (input + hidden)`
/// and act on the concatenation `[x; h]` (`[x; r * h]` for the candidate).
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: ParamId,
    pub w_reset: ParamId,
    pub w_candidate: ParamId,
    pub b_update: ParamId,
    pub b_reset: ParamId,
    pub b_candidate: ParamId,
}

struct GruCache {
    x: Var,
    weights: [Var; 3],
    biases: [Var; 3],
    input_dim: usize,
    hidden_dim: usize,
    batch: usize,
    steps: usize,
    mask: Vec<bool>,
    // Step-major caches, row `t * batch + b`.
    x_steps: Vec<f64>,
    update: Vec<f64>,
    reset: Vec<f64>,
    candidate: Vec<f64>,
    h_prev: Vec<f64>,
    reset_h: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    /// `a * w^T`
    Linear { a: Var, w: Var },
    MatMul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Dropout { x: Var, mask: Vec<f64> },
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Rows { x: Var, idx: Vec<usize> },
    BroadcastRows { x: Var },
    AttentionPool {
        scores: Var,
        h: Var,
        mask: Vec<bool>,
        batch: usize,
        alpha: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmaxPick { x: Var, idx: usize },
    Sum(Var),
    Pick { x: Var, idx: usize },
    AvgPoolPairs(Var),
    Interleave(Var, Var),
    Gru(Box<GruCache>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// Records one forward pass.
pub struct Tape<'p> {
    id: u64,
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v);
        let node = &self.nodes[v.idx];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn check(&self, v: Var) {
        assert!(
            v.tape == self.id && v.idx < self.nodes.len(),
            "variable does not belong to this tape"
        );
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        };
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `a * w^T` where `a` is `m x k` and `w` is `n x k`.
    pub fn linear(&mut self, a: Var, w: Var) -> Result<Var> {
        let (av, wv) = (self.value(a), self.value(w));
        let (m, k, n) = (av.rows(), av.cols(), wv.rows());
        if wv.cols() != k {
            return Err(Error::Shape(format!(
                "linear: input width {k} vs weight {:?}",
                wv.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::new(av.data(), m, k),
            View::new(wv.data(), n, k).t(),
            0.0,
            ViewMut::new(&mut out, m, n),
        );
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear { a, w }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = super::linalg::matmul(av.data(), m, k, bv.data(), n);
        let shape = if av.rank() == 1 { vec![n] } else { vec![m, n] };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }))
    }

    /// Adds `bias` (length = columns of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.len() != av.cols() {
            return Err(Error::Shape(format!(
                "bias length {} vs width {}",
                bv.len(),
                av.cols()
            )));
        }
        let mut out = av.clone();
        let b = bv.data();
        for r in 0..out.rows() {
            for (x, bi) in out.row_mut(r).iter_mut().zip(b) {
                *x += bi;
            }
        }
        Ok(self.push(out, Op::AddBias { a, bias }))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Shape(format!(
                "elementwise: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping bites.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p}");
        if p == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask })
    }

    /// Concatenates along columns. All inputs need the same number of rows;
    /// the result is a vector when every input is a vector.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let all_vectors = parts.iter().all(|&p| self.value(p).rank() == 1);
        let shape = if all_vectors {
            vec![total]
        } else {
            vec![rows, total]
        };
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks inputs with equal column counts on top of each other.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::Shape("stack_rows: widths differ".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols;
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::StackRows(parts.to_vec()),
        ))
    }

    /// Gathers rows by index into a matrix (repeats allowed).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, cols) = (xv.rows(), xv.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::Shape(format!("row index out of range (rows = {n})")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        Ok(self.push(
            Tensor::matrix(idx.len(), cols, data)?,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Row `i` as a vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if i >= xv.rows() {
            return Err(Error::Shape(format!("row {i} out of range")));
        }
        let out = Tensor::vector(xv.row(i).to_vec());
        Ok(self.push(out, Op::Rows { x, idx: vec![i] }))
    }

    /// Repeats a vector as `n` identical rows.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != 1 {
            return Err(Error::Shape("broadcast_rows expects a vector".into()));
        }
        let cols = xv.cols();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        Ok(self.push(Tensor::matrix(n, cols, data)?, Op::BroadcastRows { x }))
    }

    /// Masked attention pooling over `batch` sequences laid out row-wise in
    /// `h` (row `b * steps + t`). `scores` holds one logit per row. Returns a
    /// `batch x d` matrix whose row `b` is `sum_t alpha_{b,t} h_{b,t}` with
    /// `alpha_b = softmax` over the unmasked logits of sequence `b`.
    pub fn attention_pool(
        &mut self,
        scores: Var,
        h: Var,
        mask: &[bool],
        batch: usize,
    ) -> Result<Var> {
        let (sv, hv) = (self.value(scores), self.value(h));
        let n = hv.rows();
        if sv.len() != n || mask.len() != n || batch == 0 || n % batch != 0 {
            return Err(Error::Shape(format!(
                "attention_pool: {} scores, {} rows, {} mask, batch {batch}",
                sv.len(),
                n,
                mask.len()
            )));
        }
        let steps = n / batch;
        let d = hv.cols();
        let s = sv.data();
        let mut alpha = vec![0.0; n];
        let mut out = vec![0.0; batch * d];
        for b in 0..batch {
            let range = b * steps..(b + 1) * steps;
            let max = range
                .clone()
                .filter(|&i| mask[i])
                .map(|i| s[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Shape(format!(
                    "attention_pool: sequence {b} is fully masked"
                )));
            }
            let mut total = 0.0;
            for i in range.clone() {
                if mask[i] {
                    alpha[i] = (s[i] - max).exp();
                    total += alpha[i];
                }
            }
            let o = &mut out[b * d..(b + 1) * d];
            for i in range {
                if mask[i] {
                    alpha[i] /= total;
                    for (oj, hj) in o.iter_mut().zip(hv.row(i)) {
                        *oj += alpha[i] * hj;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::matrix(batch, d, out)?,
            Op::AttentionPool {
                scores,
                h,
                mask: mask.to_vec(),
                batch,
                alpha,
            },
        ))
    }

    /// Max-shifted softmax over all entries.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = Tensor::new(self.value(x).shape().to_vec(), softmax(self.value(x).data()))
            .expect("same shape");
        self.push(out, Op::Softmax(x))
    }

    /// `log softmax(x)[idx]` as a scalar, computed stably.
    pub fn log_softmax_pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x).data();
        if idx >= xv.len() {
            return Err(Error::Shape(format!("class {idx} out of range")));
        }
        let max = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + xv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        Ok(self.push(Tensor::scalar(xv[idx] - lse), Op::LogSoftmaxPick { x, idx }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Scalar element `idx` of the flattened tensor.
    pub fn pick(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xv = self.value(x);
        if idx >= xv.len() {
            return Err(Error::Shape(format!("pick {idx} out of range")));
        }
        let v = xv.data()[idx];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, idx }))
    }

    /// Average pooling with kernel and stride 2 over the last dimension.
    pub fn avg_pool_pairs(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = avg_pool_pairs(xv)?;
        Ok(self.push(out, Op::AvgPoolPairs(x)))
    }

    /// Pairs two equally long vectors coordinate by coordinate:
    /// `[u_0, v_0, u_1, v_1, ...]`.
    pub fn interleave(&mut self, u: Var, v: Var) -> Result<Var> {
        let (uv, vv) = (self.value(u), self.value(v));
        if uv.len() != vv.len() || uv.rank() != 1 || vv.rank() != 1 {
            return Err(Error::Shape("interleave expects equal vectors".into()));
        }
        let mut data = Vec::with_capacity(2 * uv.len());
        for (a, b) in uv.data().iter().zip(vv.data()) {
            data.push(*a);
            data.push(*b);
        }
        Ok(self.push(Tensor::vector(data), Op::Interleave(u, v)))
    }

    /// Runs a GRU over `batch` sequences stored row-wise in `x`
    /// (row `b * steps + t`, width `input_dim`) from a zero initial state.
    /// A masked position keeps the previous hidden state. Returns the hidden
    /// state after every position in the same row layout.
    pub fn gru(&mut self, x: Var, mask: &[bool], batch: usize, p: &GruParams) -> Result<Var> {
        let (inp, hid) = (p.input_dim, p.hidden_dim);
        let stride = inp + hid;
        let weights = [
            self.param(p.w_update),
            self.param(p.w_reset),
            self.param(p.w_candidate),
        ];
        let biases = [
            self.param(p.b_update),
            self.param(p.b_reset),
            self.param(p.b_candidate),
        ];
        for w in weights {
            if self.value(w).shape() != [hid, stride] {
                return Err(Error::Shape("gru: gate matrix shape".into()));
            }
        }
        for b in biases {
            if self.value(b).len() != hid {
                return Err(Error::Shape("gru: bias length".into()));
            }
        }
        let xv = self.value(x);
        let n = xv.rows();
        if xv.cols() != inp || mask.len() != n || batch == 0 || n % batch != 0 {
            return Err(Error::Shape(format!(
                "gru: input {:?}, mask {}, batch {batch}, input_dim {inp}",
                xv.shape(),
                mask.len()
            )));
        }
        let steps = n / batch;

        // Step-major copy of the inputs.
        let mut x_steps = vec![0.0; n * inp];
        for b in 0..batch {
            for t in 0..steps {
                let dst = (t * batch + b) * inp;
                x_steps[dst..dst + inp].copy_from_slice(xv.row(b * steps + t));
            }
        }
        // Input projections plus bias for all positions at once.
        let mut proj = [vec![0.0; n * hid], vec![0.0; n * hid], vec![0.0; n * hid]];
        for g in 0..3 {
            let w = self.value(weights[g]).data();
            gemm(
                1.0,
                View::new(&x_steps, n, inp),
                View::new(w, hid, stride).cols_range(0, inp).t(),
                0.0,
                ViewMut::new(&mut proj[g], n, hid),
            );
            let bias = self.value(biases[g]).data();
            for row in proj[g].chunks_mut(hid) {
                for (v, bj) in row.iter_mut().zip(bias) {
                    *v += bj;
                }
            }
        }

        let w_z = self.value(weights[0]).data();
        let w_r = self.value(weights[1]).data();
        let w_n = self.value(weights[2]).data();
        let mut update = vec![0.0; n * hid];
        let mut reset = vec![0.0; n * hid];
        let mut candidate = vec![0.0; n * hid];
        let mut h_prev = vec![0.0; n * hid];
        let mut reset_h = vec![0.0; n * hid];
        let mut out = vec![0.0; n * hid];
        let mut h = vec![0.0; batch * hid];
        let mut hz = vec![0.0; batch * hid];
        let mut hr = vec![0.0; batch * hid];
        let mut hn = vec![0.0; batch * hid];

        for t in 0..steps {
            let base = t * batch * hid;
            let span = base..base + batch * hid;
            gemm(
                1.0,
                View::new(&h, batch, hid),
                View::new(w_z, hid, stride).cols_range(inp, hid).t(),
                0.0,
                ViewMut::new(&mut hz, batch, hid),
            );
            gemm(
                1.0,
                View::new(&h, batch, hid),
                View::new(w_r, hid, stride).cols_range(inp, hid).t(),
                0.0,
                ViewMut::new(&mut hr, batch, hid),
            );
            h_prev[span.clone()].copy_from_slice(&h);
            for i in 0..batch * hid {
                let z = sigmoid(proj[0][base + i] + hz[i]);
                let r = sigmoid(proj[1][base + i] + hr[i]);
                update[base + i] = z;
                reset[base + i] = r;
                reset_h[base + i] = r * h[i];
            }
            gemm(
                1.0,
                View::new(&reset_h[span.clone()], batch, hid),
                View::new(w_n, hid, stride).cols_range(inp, hid).t(),
                0.0,
                ViewMut::new(&mut hn, batch, hid),
            );
            for b in 0..batch {
                let row = (b * steps + t) * hid;
                let live = mask[b * steps + t];
                for j in 0..hid {
                    let i = b * hid + j;
                    let c = (proj[2][base + i] + hn[i]).tanh();
                    candidate[base + i] = c;
                    if live {
                        let z = update[base + i];
                        h[i] = (1.0 - z) * c + z * h[i];
                    }
                    out[row + j] = h[i];
                }
            }
        }

        let mut mask_steps = vec![false; n];
        for b in 0..batch {
            for t in 0..steps {
                mask_steps[t * batch + b] = mask[b * steps + t];
            }
        }
        let cache = GruCache {
            x,
            weights,
            biases,
            input_dim: inp,
            hidden_dim: hid,
            batch,
            steps,
            mask: mask_steps,
            x_steps,
            update,
            reset,
            candidate,
            h_prev,
            reset_h,
        };
        Ok(self.push(Tensor::matrix(n, hid, out)?, Op::Gru(Box::new(cache))))
    }

    /// Reverse pass from `loss`, seeded with ones (so a non-scalar output
    /// differentiates its sum).
    pub fn backward(&self, loss: Var) -> Gradients {
        self.check(loss);
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(Tensor::filled(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<Option<Tensor>> = (0..self.store.len()).map(|_| None).collect();
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                params[pid] = grads[v.idx].take();
            }
        }
        let shapes = (0..self.nodes.len())
            .map(|i| {
                self.value(Var {
                    tape: self.id,
                    idx: i,
                })
                .shape()
                .to_vec()
            })
            .collect();
        Gradients {
            tape: self.id,
            nodes: grads,
            shapes,
            params,
            param_of_node: self
                .param_nodes
                .iter()
                .enumerate()
                .filter_map(|(pid, v)| v.map(|v| (v.idx, pid)))
                .collect(),
        }
    }

    /// Reverse pass from a scalar `loss` seeded with `seed`, adding every
    /// parameter gradient into `accum` (indexed like the store) instead of
    /// allocating fresh buffers.
    pub fn backward_into(&self, loss: Var, seed: f64, accum: &mut [Tensor]) {
        self.check(loss);
        assert_eq!(accum.len(), self.store.len(), "accumulator/store mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                grads[v.idx] = Some(std::mem::replace(&mut accum[pid], Tensor::scalar(0.0)));
            }
        }
        grads[loss.idx] = Some(Tensor::filled(self.value(loss).shape(), seed));
        for idx in (0..=loss.idx).rev() {
            if matches!(self.nodes[idx].op, Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(v) = node {
                accum[pid] = grads[v.idx].take().expect("accumulator moved in above");
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> &'g mut Tensor {
        let shape = self.value(v).shape().to_vec();
        grads[v.idx].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.value(Var { tape: self.id, idx });
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Linear { a, w } => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let (m, k, n) = (av.rows(), av.cols(), wv.rows());
                let da = self.grad_slot(grads, *a);
                gemm(
                    1.0,
                    View::new(g.data(), m, n),
                    View::new(wv.data(), n, k),
                    1.0,
                    ViewMut::new(da.data_mut(), m, k),
                );
                let dw = self.grad_slot(grads, *w);
                gemm(
                    1.0,
                    View::new(g.data(), m, n).t(),
                    View::new(av.data(), m, k),
                    1.0,
                    ViewMut::new(dw.data_mut(), n, k),
                );
            }
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let da = self.grad_slot(grads, *a);
                gemm(
                    1.0,
                    View::new(g.data(), m, n),
                    View::new(bv.data(), k, n).t(),
                    1.0,
                    ViewMut::new(da.data_mut(), m, k),
                );
                let db = self.grad_slot(grads, *b);
                gemm(
                    1.0,
                    View::new(av.data(), m, k).t(),
                    View::new(g.data(), m, n),
                    1.0,
                    ViewMut::new(db.data_mut(), k, n),
                );
            }
            Op::AddBias { a, bias } => {
                self.grad_slot(grads, *a).add_scaled(g, 1.0);
                let db = self.grad_slot(grads, *bias);
                let cols = g.cols();
                for r in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(&g.data()[r * cols..]) {
                        *d += x;
                    }
                }
            }
            Op::Add(a, b) => {
                self.grad_slot(grads, *a).add_scaled(g, 1.0);
                self.grad_slot(grads, *b).add_scaled(g, 1.0);
            }
            Op::Sub(a, b) => {
                self.grad_slot(grads, *a).add_scaled(g, 1.0);
                self.grad_slot(grads, *b).add_scaled(g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = self.grad_slot(grads, *a);
                for ((d, gi), bi) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += gi * bi;
                }
                let db = self.grad_slot(grads, *b);
                for ((d, gi), ai) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += gi * ai;
                }
            }
            Op::Scale(a, c) => self.grad_slot(grads, *a).add_scaled(g, *c),
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, y, |_, y| y * (1.0 - y)),
            Op::Tanh(a) => self.unary_grad(grads, *a, g, y, |_, y| 1.0 - y * y),
            Op::Relu(a) => self.unary_grad(grads, *a, g, y, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Ln(a) => self.unary_grad(grads, *a, g, y, |x, _| 1.0 / x),
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, *x, g, y, move |v, _| {
                    if v >= lo && v <= hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::Dropout { x, mask } => {
                let dx = self.grad_slot(grads, *x);
                for ((d, gi), m) in dx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let dp = self.grad_slot(grads, p);
                    for r in 0..rows {
                        let src = &g.data()[r * total + offset..r * total + offset + c];
                        for (d, s) in dp.row_mut(r).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    offset += c;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let dp = self.grad_slot(grads, p);
                    for (d, s) in dp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                        *d += s;
                    }
                    offset += n;
                }
            }
            Op::Rows { x, idx } => {
                let cols = g.cols();
                let dx = self.grad_slot(grads, *x);
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g.data()[k * cols..(k + 1) * cols];
                    for (d, s) in dx.row_mut(i).iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            Op::BroadcastRows { x } => {
                let dx = self.grad_slot(grads, *x);
                let cols = g.cols();
                for r in 0..g.rows() {
                    for (d, s) in dx.data_mut().iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *d += s;
                    }
                }
            }
            Op::AttentionPool {
                scores,
                h,
                mask,
                batch,
                alpha,
            } => {
                let hv = self.value(*h);
                let n = hv.rows();
                let steps = n / batch;
                let d = hv.cols();
                let mut ds = vec![0.0; n];
                {
                    let dh = self.grad_slot(grads, *h);
                    for b in 0..*batch {
                        let gb = &g.data()[b * d..(b + 1) * d];
                        let range = b * steps..(b + 1) * steps;
                        let mut dalpha = vec![0.0; steps];
                        let mut c = 0.0;
                        for (k, i) in range.clone().enumerate() {
                            if mask[i] {
                                dalpha[k] = dot(gb, hv.row(i));
                                c += alpha[i] * dalpha[k];
                                for (dj, gj) in dh.row_mut(i).iter_mut().zip(gb) {
                                    *dj += alpha[i] * gj;
                                }
                            }
                        }
                        for (k, i) in range.enumerate() {
                            if mask[i] {
                                ds[i] = alpha[i] * (dalpha[k] - c);
                            }
                        }
                    }
                }
                let dsc = self.grad_slot(grads, *scores);
                for (d, s) in dsc.data_mut().iter_mut().zip(&ds) {
                    *d += s;
                }
            }
            Op::Softmax(x) => {
                let yv = y.data();
                let c: f64 = g.data().iter().zip(yv).map(|(a, b)| a * b).sum();
                let dx = self.grad_slot(grads, *x);
                for ((d, gi), yi) in dx.data_mut().iter_mut().zip(g.data()).zip(yv) {
                    *d += yi * (gi - c);
                }
            }
            Op::LogSoftmaxPick { x, idx } => {
                let p = softmax(self.value(*x).data());
                let gs = g.item();
                let dx = self.grad_slot(grads, *x);
                for (i, (d, pi)) in dx.data_mut().iter_mut().zip(&p).enumerate() {
                    let onehot = if i == *idx { 1.0 } else { 0.0 };
                    *d += gs * (onehot - pi);
                }
            }
            Op::Sum(x) => {
                let gs = g.item();
                for d in self.grad_slot(grads, *x).data_mut() {
                    *d += gs;
                }
            }
            Op::Pick { x, idx } => {
                self.grad_slot(grads, *x).data_mut()[*idx] += g.item();
            }
            Op::AvgPoolPairs(x) => {
                let dx = self.grad_slot(grads, *x);
                for (j, gj) in g.data().iter().enumerate() {
                    dx.data_mut()[2 * j] += 0.5 * gj;
                    dx.data_mut()[2 * j + 1] += 0.5 * gj;
                }
            }
            Op::Interleave(u, v) => {
                let du = self.grad_slot(grads, *u);
                for (j, d) in du.data_mut().iter_mut().enumerate() {
                    *d += g.data()[2 * j];
                }
                let dv = self.grad_slot(grads, *v);
                for (j, d) in dv.data_mut().iter_mut().enumerate() {
                    *d += g.data()[2 * j + 1];
                }
            }
            Op::Gru(cache) => self.gru_backward(cache, g, grads),
        }
    }

    fn unary_grad(
        &self,
        grads: &mut [Option<Tensor>],
        x: Var,
        g: &Tensor,
        y: &Tensor,
        local: impl Fn(f64, f64) -> f64,
    ) {
        let xv = self.value(x);
        let dx = self.grad_slot(grads, x);
        for (((d, gi), xi), yi) in dx
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(xv.data())
            .zip(y.data())
        {
            *d += gi * local(*xi, *yi);
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (inp, hid, batch, steps) = (c.input_dim, c.hidden_dim, c.batch, c.steps);
        let stride = inp + hid;
        let n = batch * steps;
        let w: Vec<&[f64]> = c.weights.iter().map(|&v| self.value(v).data()).collect();

        // Pre-activation gradients per gate, step-major.
        let mut da = [vec![0.0; n * hid], vec![0.0; n * hid], vec![0.0; n * hid]];
        let mut dh = vec![0.0; batch * hid];
        let mut dh_next = vec![0.0; batch * hid];
        let mut d_rh = vec![0.0; batch * hid];

        for t in (0..steps).rev() {
            let base = t * batch * hid;
            for b in 0..batch {
                let out_row = (b * steps + t) * hid;
                let live = c.mask[t * batch + b];
                for j in 0..hid {
                    let i = b * hid + j;
                    let gs = g.data()[out_row + j] + dh[i];
                    if !live {
                        dh_next[i] = gs;
                        continue;
                    }
                    let k = base + i;
                    let (z, cand, hp) = (c.update[k], c.candidate[k], c.h_prev[k]);
                    da[0][k] = gs * (hp - cand) * z * (1.0 - z);
                    da[2][k] = gs * (1.0 - z) * (1.0 - cand * cand);
                    dh_next[i] = gs * z;
                }
            }
            gemm(
                1.0,
                View::new(&da[2][base..base + batch * hid], batch, hid),
                View::new(w[2], hid, stride).cols_range(inp, hid),
                0.0,
                ViewMut::new(&mut d_rh, batch, hid),
            );
            for b in 0..batch {
                if !c.mask[t * batch + b] {
                    continue;
                }
                for j in 0..hid {
                    let i = b * hid + j;
                    let k = base + i;
                    let r = c.reset[k];
                    da[1][k] = d_rh[i] * c.h_prev[k] * r * (1.0 - r);
                    dh_next[i] += d_rh[i] * r;
                }
            }
            for gate in 0..2 {
                gemm(
                    1.0,
                    View::new(&da[gate][base..base + batch * hid], batch, hid),
                    View::new(w[gate], hid, stride).cols_range(inp, hid),
                    1.0,
                    ViewMut::new(&mut dh_next, batch, hid),
                );
            }
            std::mem::swap(&mut dh, &mut dh_next);
        }

        // Input gradient, step-major then scattered back to sequence rows.
        let mut dx_steps = vec![0.0; n * inp];
        for gate in 0..3 {
            gemm(
                1.0,
                View::new(&da[gate], n, hid),
                View::new(w[gate], hid, stride).cols_range(0, inp),
                1.0,
                ViewMut::new(&mut dx_steps, n, inp),
            );
        }
        {
            let dx = self.grad_slot(grads, c.x);
            for b in 0..batch {
                for t in 0..steps {
                    let src = &dx_steps[(t * batch + b) * inp..(t * batch + b + 1) * inp];
                    for (d, s) in dx.row_mut(b * steps + t).iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        for gate in 0..3 {
            let recurrent_input = if gate == 2 { &c.reset_h } else { &c.h_prev };
            let dw = self.grad_slot(grads, c.weights[gate]);
            gemm(
                1.0,
                View::new(&da[gate], n, hid).t(),
                View::new(&c.x_steps, n, inp),
                1.0,
                ViewMut::new(dw.data_mut(), hid, stride).cols_range(0, inp),
            );
            gemm(
                1.0,
                View::new(&da[gate], n, hid).t(),
                View::new(recurrent_input, n, hid),
                1.0,
                ViewMut::new(dw.data_mut(), hid, stride).cols_range(inp, hid),
            );
            let db = self.grad_slot(grads, c.biases[gate]);
            for row in da[gate].chunks(hid) {
                for (d, s) in db.data_mut().iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<Tensor>>,
    param_of_node: std::collections::HashMap<usize, usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when `v` does not
    /// influence the loss. Fails for variables from another tape.
    pub fn wrt(&self, v: Var) -> Result<Tensor> {
        if v.tape != self.tape || v.idx >= self.nodes.len() {
            return Err(Error::Shape(
                "gradient requested for a variable not on this tape".into(),
            ));
        }
        let stored = match self.param_of_node.get(&v.idx) {
            Some(&pid) => self.params[pid].as_ref(),
            None => self.nodes[v.idx].as_ref(),
        };
        Ok(stored
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx])))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients indexed by [`ParamId::index`].
    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// `out[.., j] = (x[.., 2j] + x[.., 2j + 1]) / 2` over the last dimension.
pub fn avg_pool_pairs(x: &Tensor) -> Result<Tensor> {
    let cols = x.cols();
    if cols % 2 != 0 {
        return Err(Error::Shape(format!("avg_pool_pairs: odd width {cols}")));
    }
    let data = x
        .data()
        .chunks(2)
        .map(|p| (p[0] + p[1]) / 2.0)
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = cols / 2;
    Tensor::new(shape, data)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
