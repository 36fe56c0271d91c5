//! The semantic-attention block: a learned [CLS] token attends over the
//! patch tokens of one stage. Only [CLS] is updated; the head-averaged
//! attention of its query over patch keys is the SATT vector.

use rand::Rng;

use crate::autograd::{AttnSpec, Graph, Var};
use crate::error::{shape, Result};
use crate::nn::{trunc_normal, Binder, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::swin::Mlp;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAttentionOutput<T> {
    /// Final (normalized) [CLS] embedding, length `D`.
    pub cls_embedding: Vec<T>,
    /// Head-averaged [CLS] attention over the `N` patch keys.
    pub satt: Vec<T>,
    /// `[heads, N + 1]` attention rows of the last layer; [CLS] is the last key.
    pub per_head_rows: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SaLayer {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub gamma1: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub gamma2: ParamId,
}

#[derive(Debug, Clone)]
pub struct SemanticAttention {
    pub cls_token: ParamId,
    pub layers: Vec<SaLayer>,
    pub norm: LayerNorm,
    pub width: usize,
    pub heads: usize,
}

/// Graph handles produced by [`SemanticAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct SaVars {
    pub cls: Var,
    /// Attention node of the last layer (probabilities via `Graph::attention_probs`).
    pub attn: Var,
    pub n_patches: usize,
}

pub const LAYER_SCALE_INIT: f64 = 1e-4;

impl SemanticAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
    ) -> Self {
        let cls_token = store.add(format!("{name}.cls_token"), trunc_normal(rng, &[1, width], 0.02), false);
        let layers = (0..depth)
            .map(|l| {
                let n = format!("{name}.layers.{l}");
                SaLayer {
                    norm1: LayerNorm::new(store, &format!("{n}.norm1"), width),
                    q: Linear::new(store, rng, &format!("{n}.attn.q"), width, width, true),
                    k: Linear::new(store, rng, &format!("{n}.attn.k"), width, width, true),
                    v: Linear::new(store, rng, &format!("{n}.attn.v"), width, width, true),
                    proj: Linear::new(store, rng, &format!("{n}.attn.proj"), width, width, true),
                    gamma1: store.add(format!("{n}.gamma1"), Tensor::full([width], T::lit(LAYER_SCALE_INIT)), false),
                    norm2: LayerNorm::new(store, &format!("{n}.norm2"), width),
                    mlp: Mlp::new(store, rng, &format!("{n}.mlp"), width),
                    gamma2: store.add(format!("{n}.gamma2"), Tensor::full([width], T::lit(LAYER_SCALE_INIT)), false),
                }
            })
            .collect();
        SemanticAttention {
            cls_token,
            layers,
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            width,
            heads,
        }
    }

    /// Runs the block over patch tokens `x: [N, D]`, starting from the
    /// learned [CLS] token.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Result<SaVars> {
        let cls = p.var(g, self.cls_token);
        self.forward_from(g, p, x, cls)
    }

    /// As [`forward`](Self::forward) with an explicit initial [CLS] row.
    pub fn forward_from<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, cls: Var) -> Result<SaVars> {
        let (n, d) = (g.value(x).rows(), g.value(x).cols());
        if d != self.width || g.value(cls).numel() != d {
            return Err(shape(format!("semantic attention expects width {}, got {d}", self.width)));
        }
        if d % self.heads != 0 {
            return Err(shape(format!("width {d} not divisible by {} heads", self.heads)));
        }
        let mut cls = cls;
        let mut attn = None;
        for layer in &self.layers {
            let z = g.concat_rows(x, cls);
            let zn = layer.norm1.forward(g, p, z);
            let cn = g.gather_rows(zn, vec![n as u32].into());
            let q = layer.q.forward(g, p, cn);
            let k = layer.k.forward(g, p, zn);
            let v = layer.v.forward(g, p, zn);
            let a = g.attention(
                q,
                k,
                v,
                None,
                AttnSpec {
                    heads: self.heads,
                    lq: 1,
                    lk: n + 1,
                    allowed: None,
                },
            );
            attn = Some(a);
            let a = layer.proj.forward(g, p, a);
            let g1 = p.var(g, layer.gamma1);
            let a = g.mul_cols(a, g1);
            cls = g.add(cls, a);
            let h = layer.norm2.forward(g, p, cls);
            let h = layer.mlp.forward(g, p, h);
            let g2 = p.var(g, layer.gamma2);
            let h = g.mul_cols(h, g2);
            cls = g.add(cls, h);
        }
        let attn = attn.ok_or_else(|| shape("semantic attention needs at least one layer"))?;
        let cls = self.norm.forward(g, p, cls);
        Ok(SaVars { cls, attn, n_patches: n })
    }

    /// Reads the SATT vector and per-head rows out of a built graph.
    pub fn output<T: Scalar>(&self, g: &Graph<T>, sa: SaVars) -> SemanticAttentionOutput<T> {
        let probs = g.attention_probs(sa.attn).expect("attention node");
        let lk = sa.n_patches + 1;
        let inv_h = T::one() / T::from_usize_lossy(self.heads);
        let satt = (0..sa.n_patches)
            .map(|i| (0..self.heads).map(|h| probs[h * lk + i]).sum::<T>() * inv_h)
            .collect();
        SemanticAttentionOutput {
            cls_embedding: g.value(sa.cls).data().to_vec(),
            satt,
            per_head_rows: Tensor::new([self.heads, lk], probs.to_vec()),
        }
    }
}

/// Runs a semantic-attention block on an explicit `(N+1) × D` matrix whose
/// last row is the [CLS] token.
pub fn semantic_attention<T: Scalar>(
    z: &Tensor<T>,
    block: &SemanticAttention,
    params: &ParamStore<T>,
) -> Result<SemanticAttentionOutput<T>> {
    if z.shape().len() != 2 || z.rows() < 2 || z.cols() != block.width {
        return Err(shape(format!(
            "semantic attention input {:?} vs width {}",
            z.shape(),
            block.width
        )));
    }
    let n = z.rows() - 1;
    let d = z.cols();
    let mut g = Graph::new();
    let mut p = Binder::new(params, false);
    let x = g.constant(Tensor::new([n, d], z.data()[..n * d].to_vec()));
    let cls = g.constant(Tensor::new([1, d], z.row(n).to_vec()));
    let sa = block.forward_from(&mut g, &mut p, x, cls)?;
    Ok(block.output(&g, sa))
}
