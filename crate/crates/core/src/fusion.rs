//! Visual/tactile token fusion.

use crate::nn::{AttentionConfig, Bound, Init, MultiHeadAttention, Params};
use crate::tensor::{Graph, Result, TensorError, Var};

/// Projected token streams, each `[.., L, D]` with matching leading axes.
#[derive(Clone, Copy, Debug)]
pub struct ModalityTokens {
    pub visual: Var,
    pub tactile: Var,
}

impl ModalityTokens {
    fn validate(&self, g: &Graph, op: &'static str) -> Result<usize> {
        let (v, t) = (g.shape(self.visual), g.shape(self.tactile));
        let r = v.len();
        if r < 2 || t.len() != r || v[r - 1] != t[r - 1] || v[..r - 2] != t[..r - 2] {
            return Err(TensorError::ShapeMismatch {
                op,
                left: v.to_vec(),
                right: t.to_vec(),
            });
        }
        Ok(r - 2)
    }
}

/// Bidirectional cross-attention: tactile queries read the visual stream and
/// visual queries read the tactile stream.
#[derive(Clone, Debug)]
pub struct CrossModalFusion {
    /// Visual queries, tactile keys and values.
    pub visual_reads_tactile: MultiHeadAttention,
    /// Tactile queries, visual keys and values.
    pub tactile_reads_visual: MultiHeadAttention,
}

impl CrossModalFusion {
    pub fn new(p: &mut Params, init: &mut Init, name: &str, cfg: AttentionConfig) -> Self {
        Self {
            visual_reads_tactile: MultiHeadAttention::new(
                p,
                init,
                &format!("{name}.v_from_t"),
                cfg,
            ),
            tactile_reads_visual: MultiHeadAttention::new(
                p,
                init,
                &format!("{name}.t_from_v"),
                cfg,
            ),
        }
    }

    /// Returns `[.., Lv + Lt, D]`: the visual-query rows first, then the tactile-query rows.
    pub fn fuse(&self, g: &mut Graph, b: &Bound, m: ModalityTokens) -> Result<Var> {
        let axis = m.validate(g, "cross_modal_fuse")?;
        let a = self
            .tactile_reads_visual
            .forward(g, b, m.tactile, m.visual)?;
        let bv = self
            .visual_reads_tactile
            .forward(g, b, m.visual, m.tactile)?;
        g.concat(&[bv, a], axis)
    }
}

/// Plain concatenation of the two streams along the token axis.
pub fn naive_token_fuse(g: &mut Graph, m: ModalityTokens) -> Result<Var> {
    let axis = m.validate(g, "naive_token_fuse")?;
    g.concat(&[m.visual, m.tactile], axis)
}
