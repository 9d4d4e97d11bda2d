//! Layers built on the tape: fully connected maps, MLPs, the GRU encoder,
//! attention pooling and single-glimpse bilinear attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{GruParams, Tape, Var};
use crate::error::{Error, Result};

/// Forward-pass mode. Dropout draws from `rng` only in training mode.
pub struct Mode {
    pub training: bool,
    pub rng: Option<ChaCha8Rng>,
}

impl Mode {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, p: f64) -> Var {
        match (&mut self.rng, self.training) {
            (Some(rng), true) if p > 0.0 => tape.dropout(x, p, rng),
            _ => x,
        }
    }
}

/// `y = x W^T + b` with `W` shaped `out x in`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), out_dim, in_dim, rng);
        let bias = bias.then(|| store.add_zeros(format!("{name}.bias"), out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.linear(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two-layer perceptron: `FC(hidden) - ReLU - Dropout(p) - FC(out)`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (input, hidden, output) = dims;
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), input, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, output, true, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mode: &mut Mode) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = mode.dropout(tape, h, self.dropout);
        self.fc2.forward(tape, h)
    }
}

/// Single-layer unidirectional GRU with zero initial state.
#[derive(Clone, Copy, Debug)]
pub struct Gru {
    pub params: GruParams,
}

impl Gru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let cols = input_dim + hidden_dim;
        let params = GruParams {
            input_dim,
            hidden_dim,
            w_update: store.add_uniform(format!("{name}.w_update"), hidden_dim, cols, rng),
            w_reset: store.add_uniform(format!("{name}.w_reset"), hidden_dim, cols, rng),
            w_candidate: store.add_uniform(format!("{name}.w_candidate"), hidden_dim, cols, rng),
            b_update: store.add_zeros(format!("{name}.b_update"), hidden_dim),
            b_reset: store.add_zeros(format!("{name}.b_reset"), hidden_dim),
            b_candidate: store.add_zeros(format!("{name}.b_candidate"), hidden_dim),
        };
        Self { params }
    }

    /// Encodes `batch` sequences laid out row-wise in `x`
    /// (`batch * steps` rows of width `input_dim`).
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, mask: &[bool], batch: usize) -> Result<Var> {
        tape.gru(x, mask, batch, &self.params)
    }
}

/// Learned attention pooling: a scorer MLP maps every position to a logit,
/// a masked softmax turns logits into weights, and the output is the
/// weighted sum of positions.
#[derive(Clone, Copy, Debug)]
pub struct AttentionPool {
    pub scorer: Mlp,
}

impl AttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        Self {
            scorer: Mlp::new(store, name, (dim, hidden, 1), dropout, rng),
        }
    }

    /// Pools `batch` sequences stored row-wise in `h`; returns `batch x d`.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        mask: &[bool],
        batch: usize,
        mode: &mut Mode,
    ) -> Result<Var> {
        let scores = self.scorer.forward(tape, h, mode)?;
        tape.attention_pool(scores, h, mask, batch)
    }

    /// Pools a single `T x d` sequence into a vector.
    pub fn forward(&self, tape: &mut Tape<'_>, h: Var, mask: &[bool], mode: &mut Mode) -> Result<Var> {
        let pooled = self.forward_batch(tape, h, mask, 1, mode)?;
        tape.row(pooled, 0)
    }
}

/// Single-glimpse bilinear attention between two sets of rows.
///
/// With `Q' = Q U^T + b_u` and `D' = D V^T + b_v`, the logit of pair
/// `(x, r)` is `sum_k p_k Q'_{x,k} D'_{r,k}`. A softmax over all pairs
/// gives weights `A`, and the output is `P (sum_{x,r} A_{x,r} Q'_x * D'_r) + b_p`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearAttention {
    pub query: Linear,
    pub key: Linear,
    pub reduce: ParamId,
    pub project: Linear,
}

impl BilinearAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let query = Linear::new(store, &format!("{name}.query"), dim, dim, true, rng);
        let key = Linear::new(store, &format!("{name}.key"), dim, dim, true, rng);
        let bound = 1.0 / (dim as f64).sqrt();
        let reduce_values = (0..dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let reduce = store.add(
            format!("{name}.reduce"),
            super::tensor::Tensor::vector(reduce_values),
        );
        let project = Linear::new(store, &format!("{name}.project"), dim, dim, true, rng);
        Self {
            query,
            key,
            reduce,
            project,
        }
    }

    /// `q` is `X x d`, `d` is `R x d`; returns a length-`d` vector.
    pub fn forward(&self, tape: &mut Tape<'_>, q: Var, d: Var) -> Result<Var> {
        let (x_rows, r_rows) = (tape.value(q).rows(), tape.value(d).rows());
        if tape.value(q).cols() != self.query.in_dim || tape.value(d).cols() != self.key.in_dim {
            return Err(Error::Shape("bilinear attention input width".into()));
        }
        let qp = self.query.forward(tape, q)?;
        let dp = self.key.forward(tape, d)?;
        // Expand to all X * R pairs, row x * R + r.
        let q_idx: Vec<usize> = (0..x_rows).flat_map(|x| std::iter::repeat(x).take(r_rows)).collect();
        let d_idx: Vec<usize> = (0..x_rows).flat_map(|_| 0..r_rows).collect();
        let qe = tape.rows(qp, &q_idx)?;
        let de = tape.rows(dp, &d_idx)?;
        let joint = tape.mul(qe, de)?;
        let p = tape.param(self.reduce);
        let logits = tape.linear(joint, p)?;
        let mask = vec![true; x_rows * r_rows];
        let pooled = tape.attention_pool(logits, joint, &mask, 1)?;
        let pooled = tape.row(pooled, 0)?;
        self.project.forward(tape, pooled)
    }
}
