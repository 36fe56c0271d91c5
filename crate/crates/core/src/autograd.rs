//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves created with
//! `requires_grad = false` (constants, teacher parameters) never receive a
//! gradient, and nothing downstream of only such leaves is differentiated.

use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape and masking of a fused multi-head attention call.
///
/// `q` holds `batches·lq` rows and `k`/`v` hold `batches·lk` rows, all with
/// `heads·head_dim` columns. When `allowed` is set it stores boolean
/// `[n, lq, lk]` blocks; batch `b` uses block `b % n`.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub allowed: Option<Rc<[bool]>>,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, T),
    MulCols {
        x: Var,
        g: Var,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    GatherRows {
        x: Var,
        idx: Rc<[u32]>,
    },
    Gather {
        x: Var,
        idx: Rc<[u32]>,
    },
    Reshape(Var),
    ConcatRows(Var, Var),
    MeanRows(Var),
    ReplaceRows {
        x: Var,
        masked: Rc<[bool]>,
        emb: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: AttnSpec,
        probs: Vec<T>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<T>,
        inv_tau: T,
        rows: Option<Rc<[bool]>>,
        logp: Vec<T>,
        denom: usize,
    },
    MaskedL1 {
        pred: Var,
        target: Rc<[T]>,
        mask: Option<Rc<[bool]>>,
        denom: usize,
    },
    WeightedSum(Vec<(Var, T)>),
    DotConst {
        x: Var,
        c: Rc<[T]>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Log-probability floor used by the cross-entropy kernel (ln 1e-12).
pub fn log_floor<T: Scalar>() -> T {
    T::lit(1e-12).ln()
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to the leaves that required them.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        if allowed.map_or(true, |a| a[j]) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (j, x) in row.iter_mut().enumerate() {
        if allowed.map_or(true, |a| a[j]) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = T::zero();
        }
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Softmax probabilities saved by an attention node, `[batches, heads, lq, lk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// `x·w + b` with `x: [r, i]`, `w: [i, o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (r, i) = self.dims2(x);
        let wt = &self.nodes[w.0].value;
        assert_eq!(wt.shape().len(), 2, "linear weight must be 2-D");
        assert_eq!(wt.shape()[0], i, "linear: input width {} vs weight rows {}", i, wt.shape()[0]);
        let o = wt.shape()[1];
        let mut out = vec![T::zero(); r * o];
        if let Some(b) = b {
            let bv = self.nodes[b.0].value.data();
            assert_eq!(bv.len(), o);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            r,
            i,
            o,
            T::one(),
            self.nodes[x.0].value.data(),
            i,
            1,
            wt.data(),
            o,
            1,
            beta,
            &mut out,
            o,
            1,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new([r, o], out), Op::Linear { x, w, b }, &parents)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.numel(), bv.numel(), "add: element counts differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Scale(x, c), &[x])
    }

    /// Per-column scaling `x[r, c] * g[c]`.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Var {
        let (_, c) = self.dims2(x);
        let gv = self.nodes[g.0].value.data();
        assert_eq!(gv.len(), c);
        let xv = &self.nodes[x.0].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &s) in row.iter_mut().zip(gv) {
                *v *= s;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::MulCols { x, g }, &[x, g])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (r, c) = self.dims2(x);
        let eps = T::lit(1e-5);
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[g.0].value.data();
        let bv = self.nodes[b.0].value.data();
        assert_eq!(gv.len(), c);
        let cn = T::from_usize_lossy(c);
        let mut out = vec![T::zero(); r * c];
        let mut mean = Vec::with_capacity(r);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                o[j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(
            Tensor::new(shape, out),
            Op::LayerNorm { x, g, b, mean, rstd },
            &[x, g, b],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let c = T::lit(GELU_C);
        let a = T::lit(GELU_A);
        let half = T::lit(0.5);
        let data = xv
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data), Op::Gelu(x), &[x])
    }

    /// Row gather: output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<[u32]>) -> Var {
        let (r, c) = self.dims2(x);
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            let i = i as usize;
            assert!(i < r, "gather_rows index {i} out of {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        self.push(Tensor::new([n, c], out), Op::GatherRows { x, idx }, &[x])
    }

    /// Flat element gather into a tensor of the given shape.
    pub fn gather(&mut self, x: Var, idx: Rc<[u32]>, shape: &[usize]) -> Var {
        let xv = self.nodes[x.0].value.data();
        let out: Vec<T> = idx.iter().map(|&i| xv[i as usize]).collect();
        self.push(Tensor::new(shape.to_vec(), out), Op::Gather { x, idx }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshaped(shape.to_vec());
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dims2(a);
        let (rb, cb) = self.dims2(b);
        assert_eq!(ca, cb, "concat_rows: column mismatch");
        let mut data = self.nodes[a.0].value.data().to_vec();
        data.extend_from_slice(self.nodes[b.0].value.data());
        self.push(Tensor::new([ra + rb, ca], data), Op::ConcatRows(a, b), &[a, b])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims2(x);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![T::zero(); c];
        for row in xv.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(r);
        for o in out.iter_mut() {
            *o *= inv;
        }
        self.push(Tensor::new([1, c], out), Op::MeanRows(x), &[x])
    }

    /// Rows flagged in `masked` are replaced by the embedding row `emb`.
    pub fn replace_rows(&mut self, x: Var, masked: Rc<[bool]>, emb: Var) -> Var {
        let (r, c) = self.dims2(x);
        assert_eq!(masked.len(), r, "replace_rows: mask length");
        let ev = self.nodes[emb.0].value.data();
        assert_eq!(ev.len(), c);
        let mut data = self.nodes[x.0].value.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            if masked[i] {
                row.copy_from_slice(ev);
            }
        }
        self.push(
            Tensor::new([r, c], data),
            Op::ReplaceRows { x, masked, emb },
            &[x, emb],
        )
    }

    /// Fused multi-head scaled dot-product attention, optional additive
    /// per-head bias `[heads, lq, lk]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, spec: AttnSpec) -> Var {
        let (rq, c) = self.dims2(q);
        let (rk, ck) = self.dims2(k);
        let (rv, cv) = self.dims2(v);
        assert!(c == ck && c == cv, "attention: width mismatch");
        assert_eq!(rk, rv);
        let AttnSpec { heads, lq, lk, .. } = spec;
        assert_eq!(c % heads, 0, "attention: width {c} not divisible by {heads} heads");
        assert_eq!(rq % lq, 0);
        let batches = rq / lq;
        assert_eq!(rk, batches * lk, "attention: key rows");
        let dh = c / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let n_blocks = spec.allowed.as_ref().map(|a| a.len() / (lq * lk));
        let qd = self.nodes[q.0].value.data();
        let kd = self.nodes[k.0].value.data();
        let vd = self.nodes[v.0].value.data();
        let bias_d = bias.map(|b| {
            let t = self.nodes[b.0].value.data();
            assert_eq!(t.len(), heads * lq * lk, "attention: bias shape");
            t
        });
        let mut probs = vec![T::zero(); batches * heads * lq * lk];
        let mut out = vec![T::zero(); rq * c];
        for b in 0..batches {
            let allowed = spec.allowed.as_ref().map(|a| {
                let blk = b % n_blocks.unwrap();
                &a[blk * lq * lk..(blk + 1) * lq * lk]
            });
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                T::gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qd[b * lq * c + h * dh..],
                    c,
                    1,
                    &kd[b * lk * c + h * dh..],
                    1,
                    c,
                    T::zero(),
                    p,
                    lk,
                    1,
                );
                if let Some(bd) = bias_d {
                    for (x, &y) in p.iter_mut().zip(&bd[h * lq * lk..(h + 1) * lq * lk]) {
                        *x += y;
                    }
                }
                for i in 0..lq {
                    softmax_in_place(
                        &mut p[i * lk..(i + 1) * lk],
                        allowed.map(|a| &a[i * lk..(i + 1) * lk]),
                    );
                }
                T::gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    p,
                    lk,
                    1,
                    &vd[b * lk * c + h * dh..],
                    c,
                    1,
                    T::zero(),
                    &mut out[b * lq * c + h * dh..],
                    c,
                    1,
                );
            }
        }
        let mut parents = vec![q, k, v];
        parents.extend(bias);
        self.push(
            Tensor::new([rq, c], out),
            Op::Attention {
                q,
                k,
                v,
                bias,
                spec,
                probs,
            },
            &parents,
        )
    }

    /// Mean over selected rows of `−Σ_k target·log softmax(logits/τ)`, with
    /// the log clamped at ln 1e-12. Targets are constants. Returns 0 when no
    /// row is selected.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: Vec<T>,
        tau: T,
        rows: Option<Rc<[bool]>>,
    ) -> Var {
        let (r, k) = self.dims2(logits);
        assert_eq!(target.len(), r * k, "soft_cross_entropy: target shape");
        if let Some(m) = &rows {
            assert_eq!(m.len(), r, "soft_cross_entropy: row mask length");
        }
        let inv_tau = T::one() / tau;
        let floor = log_floor::<T>();
        let lv = self.nodes[logits.0].value.data();
        let mut logp = vec![T::zero(); r * k];
        let mut total = T::zero();
        let mut denom = 0usize;
        for i in 0..r {
            if !rows.as_ref().map_or(true, |m| m[i]) {
                continue;
            }
            denom += 1;
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x * inv_tau));
            let lse = row.iter().map(|&x| (x * inv_tau - max).exp()).sum::<T>().ln() + max;
            for j in 0..k {
                let lp = row[j] * inv_tau - lse;
                logp[i * k + j] = lp;
                total -= target[i * k + j] * lp.max(floor);
            }
        }
        let loss = if denom == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(denom)
        };
        self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                target,
                inv_tau,
                rows,
                logp,
                denom,
            },
            &[logits],
        )
    }

    /// Mean absolute difference over elements where `mask` is set (all when
    /// `None`); 0 when nothing is selected.
    pub fn masked_l1(&mut self, pred: Var, target: Rc<[T]>, mask: Option<Rc<[bool]>>) -> Var {
        let pv = self.nodes[pred.0].value.data();
        assert_eq!(pv.len(), target.len(), "masked_l1: size mismatch");
        let mut total = T::zero();
        let mut denom = 0usize;
        for i in 0..pv.len() {
            if mask.as_ref().map_or(true, |m| m[i]) {
                total += (pv[i] - target[i]).abs();
                denom += 1;
            }
        }
        let loss = if denom == 0 {
            T::zero()
        } else {
            total / T::from_usize_lossy(denom)
        };
        self.push(
            Tensor::scalar(loss),
            Op::MaskedL1 {
                pred,
                target,
                mask,
                denom,
            },
            &[pred],
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, w) in terms {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.numel(), 1, "weighted_sum expects scalars");
            total += w * t.data()[0];
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// `Σ x·c` for a constant `c`; used to build scalar probes of outputs.
    pub fn dot_const(&mut self, x: Var, c: Rc<[T]>) -> Var {
        let xv = self.nodes[x.0].value.data();
        assert_eq!(xv.len(), c.len());
        let s = xv.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum();
        self.push(Tensor::scalar(s), Op::DotConst { x, c }, &[x])
    }

    /// Reverse sweep from a scalar output. Only leaves that require a
    /// gradient keep theirs in the result.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.nodes[output.0].value.numel(), 1, "backward from non-scalar");
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Gradients { grads };
        }
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let want = |v: Var| nodes[v.0].requires_grad;
        fn buf<'a, T: Scalar>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let (r, i) = (xv.rows(), xv.cols());
                let o = wv.shape()[1];
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    T::gemm(r, o, i, T::one(), g, o, 1, wv.data(), 1, o, T::one(), gx, i, 1);
                }
                if want(*w) {
                    let gw = buf(grads, nodes, *w);
                    T::gemm(i, r, o, T::one(), xv.data(), 1, i, g, o, 1, T::one(), gw, o, 1);
                }
                if let Some(b) = b {
                    if want(*b) {
                        let gb = buf(grads, nodes, *b);
                        for row in g.chunks(o) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if want(*p) {
                        let gp = buf(grads, nodes, *p);
                        for (x, &v) in gp.iter_mut().zip(g) {
                            *x += v;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v * *c;
                    }
                }
            }
            Op::MulCols { x, g: s } => {
                let xv = nodes[x.0].value.data();
                let sv = nodes[s.0].value.data();
                let c = sv.len();
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (grow, orow) in gx.chunks_mut(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            grow[j] += orow[j] * sv[j];
                        }
                    }
                }
                if want(*s) {
                    let gs = buf(grads, nodes, *s);
                    for (xrow, orow) in xv.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gs[j] += orow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gam, b, mean, rstd } => {
                let xv = nodes[x.0].value.data();
                let gv = nodes[gam.0].value.data();
                let c = gv.len();
                let r = xv.len() / c;
                let cn = T::from_usize_lossy(c);
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                let want_x = want(*x);
                let mut gx_local = if want_x { vec![T::zero(); r * c] } else { Vec::new() };
                let mut xhat = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let go = &g[i * c..(i + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean[i]) * rstd[i];
                        gg[j] += go[j] * xhat[j];
                        gb[j] += go[j];
                        gxhat[j] = go[j] * gv[j];
                        m1 += gxhat[j];
                        m2 += gxhat[j] * xhat[j];
                    }
                    if want_x {
                        m1 /= cn;
                        m2 /= cn;
                        let out = &mut gx_local[i * c..(i + 1) * c];
                        for j in 0..c {
                            out[j] = rstd[i] * (gxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if want_x {
                    let gx = buf(grads, nodes, *x);
                    for (a, v) in gx.iter_mut().zip(gx_local) {
                        *a += v;
                    }
                }
                if want(*gam) {
                    let t = buf(grads, nodes, *gam);
                    for (a, v) in t.iter_mut().zip(gg) {
                        *a += v;
                    }
                }
                if want(*b) {
                    let t = buf(grads, nodes, *b);
                    for (a, v) in t.iter_mut().zip(gb) {
                        *a += v;
                    }
                }
            }
            Op::Gelu(x) => {
                if want(*x) {
                    let xv = nodes[x.0].value.data();
                    let c = T::lit(GELU_C);
                    let a = T::lit(GELU_A);
                    let half = T::lit(0.5);
                    let three_a = T::lit(3.0 * GELU_A);
                    let gx = buf(grads, nodes, *x);
                    for ((out, &v), &go) in gx.iter_mut().zip(xv).zip(g) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + three_a * v * v);
                        *out += go * d;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if want(*x) {
                    let c = nodes[x.0].value.cols();
                    let gx = buf(grads, nodes, *x);
                    for (k, &i) in idx.iter().enumerate() {
                        let i = i as usize;
                        for j in 0..c {
                            gx[i * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::Gather { x, idx } => {
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i as usize] += g[k];
                    }
                }
            }
            Op::Reshape(x) => {
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (a, &v) in gx.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[a.0].value.numel();
                if want(*a) {
                    let ga = buf(grads, nodes, *a);
                    for (x, &v) in ga.iter_mut().zip(&g[..na]) {
                        *x += v;
                    }
                }
                if want(*b) {
                    let gb = buf(grads, nodes, *b);
                    for (x, &v) in gb.iter_mut().zip(&g[na..]) {
                        *x += v;
                    }
                }
            }
            Op::MeanRows(x) => {
                if want(*x) {
                    let xv = &nodes[x.0].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let inv = T::one() / T::from_usize_lossy(r);
                    let gx = buf(grads, nodes, *x);
                    for row in gx.chunks_mut(c) {
                        for (a, &v) in row.iter_mut().zip(g) {
                            *a += v * inv;
                        }
                    }
                }
            }
            Op::ReplaceRows { x, masked, emb } => {
                let c = nodes[emb.0].value.numel();
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (i, (grow, orow)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        if !masked[i] {
                            for (a, &v) in grow.iter_mut().zip(orow) {
                                *a += v;
                            }
                        }
                    }
                }
                if want(*emb) {
                    let ge = buf(grads, nodes, *emb);
                    for (i, orow) in g.chunks(c).enumerate() {
                        if masked[i] {
                            for (a, &v) in ge.iter_mut().zip(orow) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, spec, probs, g, grads),
            Op::SoftCrossEntropy {
                logits,
                target,
                inv_tau,
                rows,
                logp,
                denom,
            } => {
                if want(*logits) && *denom > 0 {
                    let k = nodes[logits.0].value.cols();
                    let r = logp.len() / k;
                    let floor = log_floor::<T>();
                    let scale = g[0] / T::from_usize_lossy(*denom);
                    let gl = buf(grads, nodes, *logits);
                    for i in 0..r {
                        if !rows.as_ref().map_or(true, |m| m[i]) {
                            continue;
                        }
                        let lp = &logp[i * k..(i + 1) * k];
                        let t = &target[i * k..(i + 1) * k];
                        // d loss / d logp_j = -t_j where the clamp is inactive
                        let mut sum_d = T::zero();
                        for j in 0..k {
                            if lp[j] > floor {
                                sum_d -= t[j];
                            }
                        }
                        for j in 0..k {
                            let d = if lp[j] > floor { -t[j] } else { T::zero() };
                            gl[i * k + j] += scale * *inv_tau * (d - lp[j].exp() * sum_d);
                        }
                    }
                }
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                denom,
            } => {
                if want(*pred) && *denom > 0 {
                    let pv = nodes[pred.0].value.data();
                    let scale = g[0] / T::from_usize_lossy(*denom);
                    let gp = buf(grads, nodes, *pred);
                    for i in 0..pv.len() {
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            let d = pv[i] - target[i];
                            let s = if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            gp[i] += scale * s;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if want(v) {
                        let gv = buf(grads, nodes, v);
                        gv[0] += g[0] * w;
                    }
                }
            }
            Op::DotConst { x, c } => {
                if want(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (a, &cv) in gx.iter_mut().zip(c.iter()) {
                        *a += g[0] * cv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        spec: &AttnSpec,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let qd = nodes[q.0].value.data();
        let kd = nodes[k.0].value.data();
        let vd = nodes[v.0].value.data();
        let c = nodes[q.0].value.cols();
        let AttnSpec { heads, lq, lk, .. } = *spec;
        let dh = c / heads;
        let batches = nodes[q.0].value.rows() / lq;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let (wq, wk, wv) = (
            nodes[q.0].requires_grad,
            nodes[k.0].requires_grad,
            nodes[v.0].requires_grad,
        );
        let wb = bias.map_or(false, |b| nodes[b.0].requires_grad);
        let mut gq = if wq { vec![T::zero(); qd.len()] } else { Vec::new() };
        let mut gk = if wk { vec![T::zero(); kd.len()] } else { Vec::new() };
        let mut gv = if wv { vec![T::zero(); vd.len()] } else { Vec::new() };
        let mut gbias = if wb { vec![T::zero(); heads * lq * lk] } else { Vec::new() };
        let mut dp = vec![T::zero(); lq * lk];
        for b in 0..batches {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                let go = &g[b * lq * c + h * dh..];
                if wv {
                    T::gemm(
                        lk,
                        lq,
                        dh,
                        T::one(),
                        p,
                        1,
                        lk,
                        go,
                        c,
                        1,
                        T::one(),
                        &mut gv[b * lk * c + h * dh..],
                        c,
                        1,
                    );
                }
                if !(wq || wk || wb) {
                    continue;
                }
                T::gemm(
                    lq,
                    dh,
                    lk,
                    T::one(),
                    go,
                    c,
                    1,
                    &vd[b * lk * c + h * dh..],
                    1,
                    c,
                    T::zero(),
                    &mut dp,
                    lk,
                    1,
                );
                for i in 0..lq {
                    let prow = &p[i * lk..(i + 1) * lk];
                    let drow = &mut dp[i * lk..(i + 1) * lk];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..lk {
                        drow[j] = prow[j] * (drow[j] - dot);
                    }
                }
                if wb {
                    for (a, &s) in gbias[h * lq * lk..(h + 1) * lq * lk].iter_mut().zip(&dp) {
                        *a += s;
                    }
                }
                if wq {
                    T::gemm(
                        lq,
                        lk,
                        dh,
                        scale,
                        &dp,
                        lk,
                        1,
                        &kd[b * lk * c + h * dh..],
                        c,
                        1,
                        T::one(),
                        &mut gq[b * lq * c + h * dh..],
                        c,
                        1,
                    );
                }
                if wk {
                    T::gemm(
                        lk,
                        lq,
                        dh,
                        scale,
                        &dp,
                        1,
                        lk,
                        &qd[b * lq * c + h * dh..],
                        c,
                        1,
                        T::one(),
                        &mut gk[b * lk * c + h * dh..],
                        c,
                        1,
                    );
                }
            }
        }
        let mut acc = |var: Var, local: Vec<T>| {
            let dst = grads[var.0].get_or_insert_with(|| vec![T::zero(); nodes[var.0].value.numel()]);
            for (a, v) in dst.iter_mut().zip(local) {
                *a += v;
            }
        };
        if wq {
            acc(q, gq);
        }
        if wk {
            acc(k, gk);
        }
        if wv {
            acc(v, gv);
        }
        if let (true, Some(b)) = (wb, bias) {
            acc(b, gbias);
        }
    }
}
