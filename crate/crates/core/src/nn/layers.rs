use super::params::{Bound, Init, ParamId, Params};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Affine map over the last axis. The weight is stored `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        let mut l = Self::without_bias(p, init, name, d_in, d_out);
        l.bias = Some(p.push(format!("{name}.bias"), Tensor::zeros([d_out])));
        l
    }

    pub fn without_bias(
        p: &mut Params,
        init: &mut Init,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = p.push(format!("{name}.weight"), init.uniform(&[d_out, d_in], d_in));
        Self {
            weight,
            bias: None,
            d_in,
            d_out,
        }
    }

    /// `x: [.., n, d_in] -> [.., n, d_out]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 1] != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                left: shape,
                right: vec![self.d_out, self.d_in],
            });
        }
        let wt = g.transpose(b.var(self.weight))?;
        let y = g.matmul(x, wt)?;
        match self.bias {
            None => Ok(y),
            Some(bias) => add_row_bias(g, y, b.var(bias)),
        }
    }
}

/// Adds `bias: [d]` to every row of `x: [.., d]`.
pub fn add_row_bias(g: &mut Graph, x: Var, bias: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let d = *shape.last().unwrap_or(&0);
    let rows = g.value(x).len() / d.max(1);
    let tiled = g.tile(bias, rows)?;
    let tiled = g.reshape(tiled, shape)?;
    g.add(x, tiled)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(p: &mut Params, name: &str, dim: usize) -> Self {
        Self {
            gain: p.push(format!("{name}.gain"), Tensor::ones([dim])),
            bias: p.push(format!("{name}.bias"), Tensor::zeros([dim])),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, b.var(self.gain), b.var(self.bias), self.eps)
    }
}

/// Two-layer MLP with a gelu in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub const RATIO: usize = 4;

    pub fn new(p: &mut Params, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            up: Linear::new(p, init, &format!("{name}.up"), dim, Self::RATIO * dim),
            down: Linear::new(p, init, &format!("{name}.down"), Self::RATIO * dim, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.up.forward(g, b, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, b, h)
    }
}

/// Sinusoidal position table `[len, dim]`: even columns sine, odd columns cosine.
pub fn sinusoidal(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn([len, dim], |i| {
        let (pos, col) = ((i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((col - col % 2) as f64) / dim as f64);
        if col % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Adds the position table to tokens `[.., len, dim]`.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(TensorError::InvalidAxis {
            op: "add_positions",
            axis: 1,
            rank: r,
        });
    }
    let (len, dim) = (shape[r - 2], shape[r - 1]);
    let table = g.constant(sinusoidal(len, dim));
    let reps = g.value(x).len() / (len * dim);
    let t = g.tile(table, reps)?;
    let t = g.reshape(t, shape)?;
    g.add(x, t)
}
