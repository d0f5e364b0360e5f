//! Parameterised building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Var};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Linear map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: store.add_uniform(format!("{name}.w"), in_dim, out_dim, rng),
            bias: store.add_zeros(format!("{name}.b"), 1, out_dim),
            in_dim,
            out_dim,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundLinear {
        BoundLinear {
            weight: g.param(store, self.weight),
            bias: g.param(store, self.bias),
        }
    }

    pub fn num_values(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(x, self.weight, self.bias)
    }
}

/// Gated recurrent cell with a single update gate:
///
/// ```text
/// z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
/// c_t = tanh(x_t Wc + h_{t-1} Uc + bc)
/// h_t = h_{t-1} + z_t * (c_t - h_{t-1})
/// ```
///
/// Gate and candidate weights are packed side by side: the first `hidden`
/// columns belong to `z`, the rest to `c`.
#[derive(Clone, Debug)]
pub struct GatedCell {
    pub w_in: ParamId,
    pub w_rec: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundCell {
    pub w_in: Var,
    pub w_rec: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl GatedCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        GatedCell {
            w_in: store.add_uniform(format!("{name}.w_in"), in_dim, 2 * hidden, rng),
            w_rec: store.add_uniform(format!("{name}.w_rec"), hidden, 2 * hidden, rng),
            bias: store.add_zeros(format!("{name}.b"), 1, 2 * hidden),
            in_dim,
            hidden,
        }
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> BoundCell {
        BoundCell {
            w_in: g.param(store, self.w_in),
            w_rec: g.param(store, self.w_rec),
            bias: g.param(store, self.bias),
            hidden: self.hidden,
        }
    }

    pub fn num_values(&self) -> usize {
        (self.in_dim + self.hidden + 1) * 2 * self.hidden
    }
}

impl BoundCell {
    /// One step given the already projected input row `x_t Wx + b` (`1 x 2H`).
    fn step_projected(&self, g: &mut Graph, x_proj: Var, h_prev: Var) -> Result<Var> {
        let rec = g.matmul(h_prev, self.w_rec)?;
        let pre = g.add(x_proj, rec)?;
        let z_pre = g.col_slice(pre, 0, self.hidden)?;
        let z = g.sigmoid(z_pre)?;
        let c_pre = g.col_slice(pre, self.hidden, self.hidden)?;
        let c = g.tanh(c_pre)?;
        let diff = g.sub(c, h_prev)?;
        let upd = g.mul(z, diff)?;
        g.add(h_prev, upd)
    }

    /// One cell application on a `1 x in` input row.
    pub fn step(&self, g: &mut Graph, x: Var, h_prev: Var) -> Result<Var> {
        let x_proj = g.affine(x, self.w_in, self.bias)?;
        self.step_projected(g, x_proj, h_prev)
    }

    pub fn zero_state(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(1, self.hidden))
    }
}

/// Runs the cell over `seq (T x in)` in the given direction and returns the
/// hidden states in time order (`T x hidden`).
pub fn recurrent_layer(g: &mut Graph, seq: Var, cell: &BoundCell, direction: Direction) -> Result<Var> {
    let frames = g.value(seq).rows();
    if frames == 0 {
        return Err(Error::Invalid("recurrent layer over an empty sequence".into()));
    }
    let projected = g.affine(seq, cell.w_in, cell.bias)?;
    let mut h = cell.zero_state(g);
    let mut states = vec![h; frames];
    let order: Box<dyn Iterator<Item = usize>> = match direction {
        Direction::Forward => Box::new(0..frames),
        Direction::Backward => Box::new((0..frames).rev()),
    };
    for t in order {
        let x_t = g.row(projected, t)?;
        h = cell.step_projected(g, x_t, h)?;
        states[t] = h;
    }
    g.stack_rows(&states)
}

/// Forward and backward passes concatenated per frame (`T x 2H`).
pub fn bidirectional(g: &mut Graph, seq: Var, forward: &BoundCell, backward: &BoundCell) -> Result<Var> {
    let f = recurrent_layer(g, seq, forward, Direction::Forward)?;
    let b = recurrent_layer(g, seq, backward, Direction::Backward)?;
    g.concat_cols(f, b)
}
