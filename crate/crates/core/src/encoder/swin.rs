//! Windowed self-attention blocks and patch merging.

use std::rc::Rc;

use rand::{Rng, RngCore};

use crate::autograd::{AttnSpec, Graph, Var};
use crate::error::{shape, Result};
use crate::nn::{trunc_normal, Binder, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Per-axis window actually used on a stage grid: the configured window,
/// clipped to the grid. Shifting is pointless when a window spans the axis.
pub fn effective_window(dims: [usize; 3], window: usize) -> Result<[usize; 3]> {
    let mut w = [0; 3];
    for a in 0..3 {
        w[a] = window.min(dims[a]);
        if w[a] == 0 || dims[a] % w[a] != 0 {
            return Err(shape(format!("stage grid {dims:?} not divisible by window {window}")));
        }
    }
    Ok(w)
}

/// Index bookkeeping for one (possibly shifted) window partition.
pub struct WindowPlan {
    /// Window-major order to source raster row.
    pub perm: Rc<[u32]>,
    /// Raster row to window-major position.
    pub inv: Rc<[u32]>,
    pub n_windows: usize,
    pub len: usize,
    /// `[n_windows, len, len]` attention mask for shifted partitions.
    pub allowed: Option<Rc<[bool]>>,
    /// Offsets into the relative-bias table, `[len, len]`.
    pub rel: Vec<u32>,
}

fn region(x: usize, dim: usize, w: usize, shift: usize) -> u8 {
    if shift == 0 || x < dim - w {
        0
    } else if x < dim - shift {
        1
    } else {
        2
    }
}

pub fn window_plan(dims: [usize; 3], win: [usize; 3], shift: [usize; 3], table_window: usize) -> WindowPlan {
    let nw = [dims[0] / win[0], dims[1] / win[1], dims[2] / win[2]];
    let len = win[0] * win[1] * win[2];
    let n_windows = nw[0] * nw[1] * nw[2];
    let n = n_windows * len;
    let mut perm = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for wd in 0..nw[0] {
        for wh in 0..nw[1] {
            for ww in 0..nw[2] {
                for i in 0..win[0] {
                    for j in 0..win[1] {
                        for k in 0..win[2] {
                            let r = [wd * win[0] + i, wh * win[1] + j, ww * win[2] + k];
                            let src: Vec<usize> = (0..3).map(|a| (r[a] + shift[a]) % dims[a]).collect();
                            perm.push(((src[0] * dims[1] + src[1]) * dims[2] + src[2]) as u32);
                            labels.push(
                                (0..3)
                                    .map(|a| region(r[a], dims[a], win[a], shift[a]))
                                    .fold(0u8, |acc, l| acc * 3 + l),
                            );
                        }
                    }
                }
            }
        }
    }
    let mut inv = vec![0u32; n];
    for (p, &s) in perm.iter().enumerate() {
        inv[s as usize] = p as u32;
    }
    let allowed = shift.iter().any(|&s| s > 0).then(|| {
        let mut a = Vec::with_capacity(n_windows * len * len);
        for w in 0..n_windows {
            let l = &labels[w * len..(w + 1) * len];
            for i in 0..len {
                for j in 0..len {
                    a.push(l[i] == l[j]);
                }
            }
        }
        Rc::from(a)
    });
    let span = 2 * table_window - 1;
    let coords: Vec<[usize; 3]> = (0..len)
        .map(|i| [i / (win[1] * win[2]), (i / win[2]) % win[1], i % win[2]])
        .collect();
    let mut rel = Vec::with_capacity(len * len);
    for ci in &coords {
        for cj in &coords {
            let o: Vec<usize> = (0..3).map(|a| ci[a] + table_window - 1 - cj[a]).collect();
            rel.push(((o[0] * span + o[1]) * span + o[2]) as u32);
        }
    }
    WindowPlan {
        perm: perm.into(),
        inv: inv.into(),
        n_windows,
        len,
        allowed,
        rel,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, 4 * width, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * width, width, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let h = self.fc1.forward(g, p, x);
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Pre-norm transformer block with (shifted) window attention and a
/// relative position bias.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub rel_bias: ParamId,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
    pub shifted: bool,
    pub drop_prob: f64,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        drop_prob: f64,
    ) -> Self {
        let span = 2 * window - 1;
        SwinBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), width),
            q: Linear::new(store, rng, &format!("{name}.attn.q"), width, width, true),
            k: Linear::new(store, rng, &format!("{name}.attn.k"), width, width, true),
            v: Linear::new(store, rng, &format!("{name}.attn.v"), width, width, true),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), width, width, true),
            rel_bias: store.add(
                format!("{name}.attn.rel_bias"),
                trunc_normal(rng, &[span * span * span, heads], 0.02),
                false,
            ),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), width),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), width),
            heads,
            shifted,
            drop_prob,
        }
    }

    /// Residual branch weight under stochastic depth: `None` drops the
    /// branch, otherwise the survivor rescale.
    fn keep<T: Scalar>(&self, drop: &mut Option<&mut dyn RngCore>) -> Option<T> {
        match drop {
            Some(rng) if self.drop_prob > 0.0 => {
                if rng.gen::<f64>() < self.drop_prob {
                    None
                } else {
                    Some(T::lit(1.0 / (1.0 - self.drop_prob)))
                }
            }
            _ => Some(T::one()),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        x: Var,
        plan: &WindowPlan,
        drop: &mut Option<&mut dyn RngCore>,
    ) -> Var {
        let mut x = x;
        if let Some(s) = self.keep::<T>(drop) {
            let h = self.norm1.forward(g, p, x);
            let h = g.gather_rows(h, plan.perm.clone());
            let q = self.q.forward(g, p, h);
            let k = self.k.forward(g, p, h);
            let v = self.v.forward(g, p, h);
            let table = p.var(g, self.rel_bias);
            let heads = self.heads;
            let idx: Vec<u32> = (0..heads)
                .flat_map(|hd| plan.rel.iter().map(move |&r| r * heads as u32 + hd as u32))
                .collect();
            let bias = g.gather(table, idx.into(), &[heads * plan.len, plan.len]);
            let a = g.attention(
                q,
                k,
                v,
                Some(bias),
                AttnSpec {
                    heads,
                    lq: plan.len,
                    lk: plan.len,
                    allowed: plan.allowed.clone(),
                },
            );
            let a = self.proj.forward(g, p, a);
            let mut a = g.gather_rows(a, plan.inv.clone());
            if s != T::one() {
                a = g.scale(a, s);
            }
            x = g.add(x, a);
        }
        if let Some(s) = self.keep::<T>(drop) {
            let h = self.norm2.forward(g, p, x);
            let mut h = self.mlp.forward(g, p, h);
            if s != T::one() {
                h = g.scale(h, s);
            }
            x = g.add(x, h);
        }
        x
    }
}

/// Rows of each 2×2×2 neighbourhood, coarse-cell-major.
pub fn merge_index(dims: [usize; 3]) -> Vec<u32> {
    let c = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
    let mut idx = Vec::with_capacity(dims.iter().product());
    for d in 0..c[0] {
        for h in 0..c[1] {
            for w in 0..c[2] {
                for i in 0..2 {
                    for j in 0..2 {
                        for k in 0..2 {
                            idx.push((((2 * d + i) * dims[1] + 2 * h + j) * dims[2] + 2 * w + k) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Concatenates 2×2×2 neighbours, normalizes and projects `8C → 2C`.
#[derive(Debug, Clone, Copy)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 8 * width),
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), 8 * width, 2 * width, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, dims: [usize; 3]) -> Result<Var> {
        if dims.iter().any(|&d| d % 2 != 0) {
            return Err(shape(format!("cannot merge odd grid {dims:?}")));
        }
        let c = g.value(x).cols();
        let n: usize = dims.iter().product();
        let x = g.gather_rows(x, merge_index(dims).into());
        let x = g.reshape(x, &[n / 8, 8 * c]);
        let x = self.norm.forward(g, p, x);
        Ok(self.reduce.forward(g, p, x))
    }
}
