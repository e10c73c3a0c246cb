use super::layers::{FeedForward, LayerNorm, Linear};
use super::params::{Bound, Init, Params};
use crate::tensor::{Graph, Result, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> std::result::Result<Self, String> {
        if dim == 0 || heads == 0 || dim % heads != 0 {
            return Err(format!(
                "model dim {dim} is not divisible into {heads} heads"
            ));
        }
        Ok(Self { dim, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Scaled dot-product attention with `heads` heads and an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Attention output together with each head's weight matrix `[.., Lq, Lk]`.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.dim;
        Self {
            cfg,
            q: Linear::new(p, init, &format!("{name}.q"), d, d),
            k: Linear::new(p, init, &format!("{name}.k"), d, d),
            v: Linear::new(p, init, &format!("{name}.v"), d, d),
            out: Linear::new(p, init, &format!("{name}.out"), d, d),
        }
    }

    /// `queries: [.., Lq, D]`, `keys: [.., Lk, D]` -> `[.., Lq, D]`.
    pub fn forward(&self, g: &mut Graph, b: &Bound, queries: Var, keys: Var) -> Result<Var> {
        Ok(self.attend(g, b, queries, keys)?.out)
    }

    pub fn attend(&self, g: &mut Graph, b: &Bound, queries: Var, keys: Var) -> Result<Attended> {
        let (qs, ks) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
        let r = qs.len();
        if r < 2
            || ks.len() != r
            || qs[r - 1] != self.cfg.dim
            || ks[r - 1] != self.cfg.dim
            || qs[..r - 2] != ks[..r - 2]
        {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                left: qs,
                right: ks,
            });
        }
        let q = self.q.forward(g, b, queries)?;
        let k = self.k.forward(g, b, keys)?;
        let v = self.v.forward(g, b, keys)?;
        let hd = self.cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let span = (h * hd, (h + 1) * hd);
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, r - 1, span.0, span.1)?,
                    g.slice(k, r - 1, span.0, span.1)?,
                    g.slice(v, r - 1, span.0, span.1)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul(scores, scale)?;
            let w = g.softmax(scores, r - 1)?;
            heads.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, r - 1)?
        };
        let out = self.out.forward(g, b, joined)?;
        Ok(Attended { out, weights })
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, cfg: AttentionConfig) -> Self {
        Self {
            norm1: LayerNorm::new(p, &format!("{name}.norm1"), cfg.dim),
            attn: MultiHeadAttention::new(p, init, &format!("{name}.attn"), cfg),
            norm2: LayerNorm::new(p, &format!("{name}.norm2"), cfg.dim),
            ff: FeedForward::new(p, init, &format!("{name}.ff"), cfg.dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let h = self.attn.forward(g, b, h, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = self.ff.forward(g, b, h)?;
        g.add(x, h)
    }
}

/// Pre-norm block: self-attention over queries, cross-attention into memory, MLP.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, cfg: AttentionConfig) -> Self {
        Self {
            norm1: LayerNorm::new(p, &format!("{name}.norm1"), cfg.dim),
            self_attn: MultiHeadAttention::new(p, init, &format!("{name}.self_attn"), cfg),
            norm2: LayerNorm::new(p, &format!("{name}.norm2"), cfg.dim),
            cross_attn: MultiHeadAttention::new(p, init, &format!("{name}.cross_attn"), cfg),
            norm3: LayerNorm::new(p, &format!("{name}.norm3"), cfg.dim),
            ff: FeedForward::new(p, init, &format!("{name}.ff"), cfg.dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var, memory: Var) -> Result<Var> {
        let h = self.norm1.forward(g, b, x)?;
        let h = self.self_attn.forward(g, b, h, h)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, b, x)?;
        let h = self.cross_attn.forward(g, b, h, memory)?;
        let x = g.add(x, h)?;
        let h = self.norm3.forward(g, b, x)?;
        let h = self.ff.forward(g, b, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, Tensor};

    fn tokens(shape: &[usize], seed: u64) -> Tensor {
        Init::new(seed).uniform(shape, 1)
    }

    fn cfg() -> AttentionConfig {
        AttentionConfig::new(8, 2).unwrap()
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(AttentionConfig::new(10, 3).is_err());
    }

    #[test]
    fn single_key_gives_same_row_for_every_query() {
        let mut p = Params::new();
        let mha = MultiHeadAttention::new(&mut p, &mut Init::new(1), "a", cfg());
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let q = g.constant(tokens(&[4, 8], 2));
        let kv = g.constant(tokens(&[1, 8], 3));
        let a = mha.attend(&mut g, &b, q, kv).unwrap();
        for w in &a.weights {
            assert!(g.value(*w).data().iter().all(|&x| x == 1.0));
        }
        let out = g.value(a.out);
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut p = Params::new();
        let mha = MultiHeadAttention::new(&mut p, &mut Init::new(1), "a", cfg());
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let q = g.constant(tokens(&[2, 3, 8], 4));
        let kv = g.constant(tokens(&[2, 5, 8], 5));
        let a = mha.attend(&mut g, &b, q, kv).unwrap();
        for w in &a.weights {
            let t = g.value(*w);
            assert_eq!(t.shape(), &[2, 3, 5]);
            for row in t.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let mut p = Params::new();
        let mha = MultiHeadAttention::new(&mut p, &mut Init::new(7), "a", cfg());
        let kv = tokens(&[4, 8], 6);
        let perm = [2, 0, 3, 1];
        let permuted = Tensor::from_fn([4, 8], |i| kv.row(perm[i / 8])[i % 8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let q = g.constant(tokens(&[3, 8], 8));
        let k1 = g.constant(kv);
        let k2 = g.constant(permuted);
        let y1 = mha.forward(&mut g, &b, q, k1).unwrap();
        let y2 = mha.forward(&mut g, &b, q, k2).unwrap();
        assert!(g.value(y1).max_abs_diff(g.value(y2)) < 1e-12);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut p = Params::new();
        let mha = MultiHeadAttention::new(&mut p, &mut Init::new(7), "a", cfg());
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let q = g.constant(tokens(&[3, 8], 8));
        let k = g.constant(tokens(&[3, 6], 8));
        assert!(mha.forward(&mut g, &b, q, k).is_err());
    }

    #[test]
    fn zero_weight_blocks_are_identity() {
        let mut p = Params::new();
        let mut init = Init::new(3);
        let enc = EncoderBlock::new(&mut p, &mut init, "enc", cfg());
        let dec = DecoderBlock::new(&mut p, &mut init, "dec", cfg());
        p.fill(0.0);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(tokens(&[5, 8], 1));
        let m = g.constant(tokens(&[2, 8], 2));
        let y = enc.forward(&mut g, &b, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = dec.forward(&mut g, &b, x, m).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.shape(y), &[5, 8]);
    }

    #[test]
    fn duplicated_memory_is_invisible_to_decoder() {
        let mut p = Params::new();
        let dec = DecoderBlock::new(&mut p, &mut Init::new(5), "dec", cfg());
        let mem = tokens(&[3, 8], 9);
        let doubled = Tensor::from_fn([6, 8], |i| mem.row((i / 8) % 3)[i % 8]);
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let x = g.constant(tokens(&[4, 8], 10));
        let m1 = g.constant(mem);
        let m2 = g.constant(doubled);
        let y1 = dec.forward(&mut g, &b, x, m1).unwrap();
        let y2 = dec.forward(&mut g, &b, x, m2).unwrap();
        assert_eq!(g.shape(y1), &[4, 8]);
        assert!(g.value(y1).max_abs_diff(g.value(y2)) < 1e-9);
    }

    #[test]
    fn attention_mean_gradient() {
        let mut p = Params::new();
        let mha = MultiHeadAttention::new(&mut p, &mut Init::new(5), "a", cfg());
        let r = finite_diff_check(
            |g, v| {
                let b = p.bind(g, false);
                let y = mha.forward(g, &b, v[0], v[1])?;
                let y = g.tanh(y)?;
                g.mean(y)
            },
            &[tokens(&[3, 8], 1), tokens(&[4, 8], 2)],
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn stacked_encoder_gradient_wrt_params() {
        let mut p = Params::new();
        let mut init = Init::new(12);
        let blocks = [
            EncoderBlock::new(&mut p, &mut init, "e0", cfg()),
            EncoderBlock::new(&mut p, &mut init, "e1", cfg()),
        ];
        let mut inputs = p.tensors().to_vec();
        inputs.push(tokens(&[4, 8], 3));
        let r = finite_diff_check(
            |g, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let b = Bound::from_vars(params.to_vec());
                let mut h = x[0];
                for blk in &blocks {
                    h = blk.forward(g, &b, h)?;
                }
                let h = g.square(h)?;
                g.mean(h)
            },
            &inputs,
        )
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
