//! 3D shifted-window transformer with a semantic-attention block, the
//! distillation projection heads and the reconstruction head.

mod semantic;
mod swin;

pub use semantic::{semantic_attention, SaLayer, SaVars, SemanticAttention, SemanticAttentionOutput, LAYER_SCALE_INIT};
pub use swin::{effective_window, merge_index, window_plan, Mlp, PatchMerge, SwinBlock, WindowPlan};

use std::rc::Rc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape, Error, Result};
use crate::masking::{block_layout, TokenGrid, TokenLevel};
use crate::nn::{trunc_normal, Binder, LayerNorm, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Grid3;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Cubic crop edge in voxels the position embedding is sized for.
    pub input_size: usize,
    /// Voxels per patch edge.
    pub patch: usize,
    /// Stage-1 width; stage `k` has `base_embed · 2^(k-1)` channels.
    pub base_embed: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Window edge in tokens.
    pub window: usize,
    /// Stage (1-based) whose output feeds the semantic-attention block.
    pub sa_stage: usize,
    pub sa_depth: usize,
    /// Output width of the distillation heads.
    pub proj_dim: usize,
    /// Stochastic-depth rate of the last block (linearly ramped, student only).
    pub drop_path: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            patch: 2,
            base_embed: 24,
            depths: vec![1, 1, 2, 1],
            heads: vec![2, 2, 4, 8],
            window: 4,
            sa_stage: 3,
            sa_depth: 2,
            proj_dim: 256,
            drop_path: 0.1,
        }
    }
}

impl ModelConfig {
    /// Reference architecture at full scale.
    pub fn paper() -> Self {
        ModelConfig {
            input_size: 128,
            base_embed: 96,
            depths: vec![2, 2, 8, 2],
            heads: vec![4, 4, 8, 16],
            proj_dim: 8192,
            ..Default::default()
        }
    }

    /// Smallest useful configuration (gradient checks, smoke tests).
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 16,
            base_embed: 8,
            depths: vec![1, 1, 1, 1],
            heads: vec![2, 2, 2, 2],
            sa_depth: 1,
            proj_dim: 16,
            ..Default::default()
        }
    }

    pub fn width(&self, stage: usize) -> usize {
        self.base_embed << (stage - 1)
    }

    pub fn input_grid(&self) -> [usize; 3] {
        [self.input_size / self.patch.max(1); 3]
    }

    pub fn stage_grid(&self, stage: usize) -> [usize; 3] {
        self.input_grid().map(|d| d >> (stage - 1))
    }

    /// Voxels per stage-3 cell edge.
    pub fn stage3_block(&self) -> usize {
        self.patch * 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != STAGES || self.heads.len() != STAGES {
            return Err(invalid(format!("model.depths and model.heads need {STAGES} entries")));
        }
        if self.base_embed == 0 || self.patch == 0 || self.window == 0 {
            return Err(invalid("model.base_embed, model.patch and model.window must be positive"));
        }
        for s in 1..=STAGES {
            let h = self.heads[s - 1];
            if h == 0 || self.width(s) % h != 0 {
                return Err(invalid(format!(
                    "stage {s} width {} not divisible by {h} heads",
                    self.width(s)
                )));
            }
        }
        if !(1..=STAGES).contains(&self.sa_stage) {
            return Err(invalid(format!("model.sa_stage = {} outside 1..=4", self.sa_stage)));
        }
        if self.sa_depth == 0 {
            return Err(invalid("model.sa_depth must be at least 1"));
        }
        if self.proj_dim < 2 {
            return Err(invalid("model.proj_dim must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(invalid("model.drop_path must lie in [0, 1)"));
        }
        if self.input_size % (self.patch * 8) != 0 {
            return Err(invalid(format!(
                "model.input_size {} must be a multiple of 8 · patch = {}",
                self.input_size,
                8 * self.patch
            )));
        }
        check_grid(self.input_grid(), self.window)
    }
}

/// Divisibility of every stage grid by its effective window.
fn check_grid(grid: [usize; 3], window: usize) -> Result<()> {
    for s in 0..STAGES {
        let dims = grid.map(|d| d >> s);
        if grid.iter().any(|&d| d % (1 << s) != 0) || dims.iter().any(|&d| d == 0) {
            return Err(shape(format!("token grid {grid:?} cannot be halved {s} times")));
        }
        effective_window(dims, window)?;
    }
    Ok(())
}

/// Student forwards are tracked and may use stochastic depth; teacher
/// forwards are neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub patch: Linear,
    pub cls: Linear,
    pub global: Linear,
    pub pred: Linear,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub mask_token: ParamId,
    pub stages: Vec<Vec<SwinBlock>>,
    pub merges: Vec<PatchMerge>,
    pub norm3: LayerNorm,
    pub norm4: LayerNorm,
    pub sa: SemanticAttention,
    pub heads: Heads,
}

/// Graph handles of one encoder forward.
#[derive(Debug, Clone, Copy)]
pub struct Trunk {
    /// Normalized stage-3 tokens `[N₃, 4C]`.
    pub stage3: Var,
    pub stage3_dims: [usize; 3],
    pub sa: SaVars,
    pub sa_dims: [usize; 3],
    /// Stage-4 average pool `[1, 8C]`.
    pub global: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs<T> {
    pub stage3_tokens: TokenGrid<T>,
    pub sa: SemanticAttentionOutput<T>,
    pub global_token: Vec<T>,
    /// Student only.
    pub reconstruction: Option<Grid3<T>>,
}

fn ensure_finite<T: Scalar>(g: &Graph<T>, v: Var, stage: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { stage: stage.into() })
    }
}

impl Encoder {
    /// Builds the architecture and registers freshly initialized
    /// parameters in a new store.
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<(Encoder, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c1 = cfg.width(1);
        let p3 = cfg.patch.pow(3);
        let n_in: usize = cfg.input_grid().iter().product();
        let patch_embed = Linear::new(&mut store, rng, "embed.proj", p3, c1, true);
        let pos_embed = store.add("embed.pos", trunc_normal(rng, &[n_in, c1], 0.02), false);
        let mask_token = store.add("embed.mask_token", trunc_normal(rng, &[1, c1], 0.02), false);
        let total_depth: usize = cfg.depths.iter().sum();
        let mut block_i = 0;
        let mut stages = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for s in 1..=STAGES {
            let width = cfg.width(s);
            let dims = cfg.stage_grid(s);
            let win = effective_window(dims, cfg.window)?;
            let can_shift = (0..3).any(|a| win[a] < dims[a]);
            let mut blocks = Vec::new();
            for b in 0..cfg.depths[s - 1] {
                let dp = if total_depth > 1 {
                    cfg.drop_path * block_i as f64 / (total_depth - 1) as f64
                } else {
                    0.0
                };
                block_i += 1;
                blocks.push(SwinBlock::new(
                    &mut store,
                    rng,
                    &format!("stages.{s}.blocks.{b}"),
                    width,
                    cfg.heads[s - 1],
                    cfg.window,
                    can_shift && b % 2 == 1,
                    dp,
                ));
            }
            stages.push(blocks);
            if s < STAGES {
                merges.push(PatchMerge::new(&mut store, rng, &format!("merges.{s}"), width));
            }
        }
        let norm3 = LayerNorm::new(&mut store, "norm3", cfg.width(3));
        let norm4 = LayerNorm::new(&mut store, "norm4", cfg.width(4));
        let sa_w = cfg.width(cfg.sa_stage);
        let sa = SemanticAttention::new(&mut store, rng, "sa", sa_w, cfg.heads[cfg.sa_stage - 1], cfg.sa_depth);
        let k = cfg.proj_dim;
        let blk = cfg.stage3_block().pow(3);
        // Distillation logits start at unit scale so that teacher
        // sharpening is not swamped by centering from the first step.
        let fan = |c: usize| 1.0 / (c as f64).sqrt();
        let heads = Heads {
            patch: Linear::with_std(&mut store, rng, "heads.patch", cfg.width(3), k, true, fan(cfg.width(3))),
            cls: Linear::with_std(&mut store, rng, "heads.cls", sa_w, k, true, fan(sa_w)),
            global: Linear::with_std(&mut store, rng, "heads.global", cfg.width(4), k, true, fan(cfg.width(4))),
            pred: Linear::new(&mut store, rng, "heads.pred", cfg.width(3), blk, true),
        };
        Ok((
            Encoder {
                cfg,
                patch_embed,
                pos_embed,
                mask_token,
                stages,
                merges,
                norm3,
                norm4,
                sa,
                heads,
            },
            store,
        ))
    }

    /// Rebuilds the architecture for `cfg` and checks that `store` matches it.
    pub fn for_store<T: Scalar>(cfg: ModelConfig, store: &ParamStore<T>) -> Result<Encoder> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (enc, fresh) = Encoder::new::<T, _>(cfg, &mut rng)?;
        fresh.check_same_layout(store)?;
        Ok(enc)
    }

    /// The trunk: patch embedding, optional [MASK] replacement, four stages,
    /// and the semantic-attention block.
    ///
    /// `tg` holds raw `p³` voxel tokens; `masked` flags rows replaced by the
    /// learned [MASK] embedding; `drop` enables stochastic depth.
    pub fn trunk<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        tg: &TokenGrid<T>,
        masked: Option<&[bool]>,
        mut drop: Option<&mut dyn RngCore>,
    ) -> Result<Trunk> {
        let cfg = &self.cfg;
        if tg.patch_size != cfg.patch || tg.width() != cfg.patch.pow(3) {
            return Err(shape(format!(
                "expected raw {}³ voxel tokens, got width {} (patch {})",
                cfg.patch,
                tg.width(),
                tg.patch_size
            )));
        }
        let grid = tg.grid_dims;
        check_grid(grid, cfg.window)?;
        if grid != cfg.input_grid() {
            return Err(shape(format!(
                "token grid {grid:?} does not match the configured input grid {:?}",
                cfg.input_grid()
            )));
        }
        let x = g.constant(tg.tokens.clone());
        let mut x = self.patch_embed.forward(g, p, x);
        if let Some(m) = masked {
            if m.len() != tg.len() {
                return Err(shape(format!("mask length {} vs {} tokens", m.len(), tg.len())));
            }
            if m.iter().any(|&b| b) {
                let emb = p.var(g, self.mask_token);
                x = g.replace_rows(x, Rc::from(m), emb);
            }
        }
        let pos = p.var(g, self.pos_embed);
        x = g.add(x, pos);
        ensure_finite(g, x, "patch embedding")?;

        let mut dims = grid;
        let mut stage3 = None;
        let mut sa = None;
        let mut global = None;
        for s in 1..=STAGES {
            let win = effective_window(dims, cfg.window)?;
            let half = win.map(|w| w / 2);
            let plain = window_plan(dims, win, [0; 3], cfg.window);
            let mut shifted = None;
            for block in &self.stages[s - 1] {
                let plan = if block.shifted {
                    shifted.get_or_insert_with(|| window_plan(dims, win, half, cfg.window))
                } else {
                    &plain
                };
                x = block.forward(g, p, x, plan, &mut drop);
            }
            ensure_finite(g, x, &format!("stage {s}"))?;
            if s == cfg.sa_stage {
                sa = Some(self.sa.forward(g, p, x)?);
                ensure_finite(g, sa.unwrap().cls, "semantic attention")?;
            }
            if s == 3 {
                stage3 = Some(self.norm3.forward(g, p, x));
            }
            if s < STAGES {
                x = self.merges[s - 1].forward(g, p, x, dims)?;
                dims = dims.map(|d| d / 2);
            } else {
                let n = self.norm4.forward(g, p, x);
                global = Some(g.mean_rows(n));
            }
        }
        Ok(Trunk {
            stage3: stage3.unwrap(),
            stage3_dims: grid.map(|d| d / 4),
            sa: sa.unwrap(),
            sa_dims: grid.map(|d| d >> (cfg.sa_stage - 1)),
            global: global.unwrap(),
        })
    }

    /// Per-token logits `[N₃, K]`.
    pub fn project_patch_tokens<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, stage3: Var) -> Var {
        self.heads.patch.forward(g, p, stage3)
    }

    /// `[1, K]` logits of the [CLS] embedding.
    pub fn project_cls<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, cls: Var) -> Var {
        self.heads.cls.forward(g, p, cls)
    }

    /// `[1, K]` logits of the pooled global token.
    pub fn project_global<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, global: Var) -> Var {
        self.heads.global.forward(g, p, global)
    }

    /// Reconstruction in cell-major block layout `[N₃, B³]` (see
    /// [`block_layout`]).
    pub fn predict_blocks<T: Scalar>(&self, g: &mut Graph<T>, p: &mut Binder<T>, stage3: Var) -> Var {
        self.heads.pred.forward(g, p, stage3)
    }

    /// Assembles block-layout predictions into a voxel grid.
    pub fn assemble_reconstruction<T: Scalar>(&self, blocks: &Tensor<T>, stage3_dims: [usize; 3]) -> Result<Grid3<T>> {
        let b = self.cfg.stage3_block();
        let layout = block_layout(stage3_dims, b);
        if blocks.numel() != layout.len() {
            return Err(shape("prediction size does not match the stage-3 grid"));
        }
        let dims = stage3_dims.map(|d| d * b);
        let mut out = vec![T::zero(); layout.len()];
        for (j, &v) in layout.iter().enumerate() {
            out[v as usize] = blocks.data()[j];
        }
        Grid3::new(dims, out)
    }

    /// Untracked forward returning plain tensors. The student role also
    /// yields the reconstruction and applies stochastic depth when `drop`
    /// is given.
    pub fn forward_encoder<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        tg: &TokenGrid<T>,
        masked: Option<&[bool]>,
        role: Role,
        drop: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutputs<T>> {
        let mut g = Graph::new();
        let mut p = Binder::new(params, false);
        let drop = if role == Role::Student { drop } else { None };
        let t = self.trunk(&mut g, &mut p, tg, masked, drop)?;
        let reconstruction = if role == Role::Student {
            let pred = self.predict_blocks(&mut g, &mut p, t.stage3);
            Some(self.assemble_reconstruction(g.value(pred), t.stage3_dims)?)
        } else {
            None
        };
        Ok(EncoderOutputs {
            stage3_tokens: TokenGrid::new(
                g.value(t.stage3).clone(),
                t.stage3_dims,
                self.cfg.stage3_block(),
                TokenLevel::Stage3,
            )?,
            sa: self.sa.output(&g, t.sa),
            global_token: g.value(t.global).data().to_vec(),
            reconstruction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::patchify;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn crop(n: usize, seed: u64) -> Grid3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Tensor<f64> = trunc_normal(&mut rng, &[n * n * n], 0.5);
        Grid3::new([n; 3], t.into_data()).unwrap()
    }

    /// Stage shapes by direct arithmetic: halve dims, double width.
    fn simulate(grid: [usize; 3], base: usize) -> Vec<([usize; 3], usize)> {
        let mut out = vec![(grid, base)];
        for _ in 1..4 {
            let (d, w) = *out.last().unwrap();
            out.push(([d[0] / 2, d[1] / 2, d[2] / 2], w * 2));
        }
        out
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (enc, store) = Encoder::new::<f64, _>(cfg.clone(), &mut rng).unwrap();
        let tg = patchify(&crop(32, 1), 2).unwrap();
        assert_eq!(tg.grid_dims, [16; 3]);
        let out = enc.forward_encoder(&store, &tg, None, Role::Student, None).unwrap();
        let sim = simulate([16; 3], 24);
        assert_eq!(out.stage3_tokens.grid_dims, sim[2].0);
        assert_eq!(out.stage3_tokens.width(), sim[2].1);
        assert_eq!(out.stage3_tokens.grid_dims, [4; 3]);
        assert_eq!(out.stage3_tokens.width(), 96);
        assert_eq!(out.global_token.len(), 192);
        assert_eq!(out.sa.satt.len(), 64);
        assert_eq!(out.reconstruction.unwrap().dims(), [32; 3]);
    }

    #[test]
    fn teacher_is_deterministic() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (enc, store) = Encoder::new::<f64, _>(cfg, &mut rng).unwrap();
        let tg = patchify(&crop(16, 2), 2).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let a = enc.forward_encoder(&store, &tg, None, Role::Teacher, Some(&mut r1)).unwrap();
        let b = enc.forward_encoder(&store, &tg, None, Role::Teacher, None).unwrap();
        assert_eq!(a, b);
        assert!(a.reconstruction.is_none());
    }

    #[test]
    fn indivisible_grid_is_shape_error() {
        let cfg = ModelConfig {
            input_size: 12,
            ..ModelConfig::tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Validation(_)) | Err(Error::Shape(_))));
        let (enc, store) = Encoder::new::<f64, _>(ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tg = patchify(&crop(12, 0), 2).unwrap();
        assert_eq!(tg.grid_dims, [6; 3]);
        let err = enc.forward_encoder(&store, &tg, None, Role::Teacher, None).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn stage_halving_for_several_sizes() {
        for (size, patch) in [(16, 2), (32, 2), (32, 4), (64, 4)] {
            let cfg = ModelConfig {
                input_size: size,
                patch,
                ..ModelConfig::tiny()
            };
            cfg.validate().unwrap();
            let g = cfg.input_grid();
            for s in 1..=4 {
                assert_eq!(cfg.stage_grid(s), simulate(g, 8)[s - 1].0);
                assert_eq!(cfg.width(s), simulate(g, 8)[s - 1].1);
            }
        }
    }

    #[test]
    fn heads_are_linear() {
        let cfg = ModelConfig::tiny();
        let (enc, mut store) = Encoder::new::<f64, _>(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for id in [enc.heads.cls.w, enc.heads.cls.b.unwrap()] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let bias = enc.heads.global.b.unwrap();
        store.get_mut(bias).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let mut g = Graph::new();
        let mut p = Binder::new(&store, false);
        let x = g.constant(Tensor::new([1, 32], (0..32).map(|i| i as f64).collect()));
        let zero = enc.project_cls(&mut g, &mut p, x);
        assert!(g.value(zero).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.value(zero).numel(), cfg.proj_dim);
        let gx = g.constant(Tensor::new([1, 64], (0..64).map(|i| (i as f64).sin()).collect()));
        let gx2 = g.scale(gx, 2.0);
        let a = enc.project_global(&mut g, &mut p, gx);
        let b = enc.project_global(&mut g, &mut p, gx2);
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_locality() {
        let cfg = ModelConfig::tiny();
        let (enc, store) = Encoder::new::<f64, _>(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let dims = [2, 2, 2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base: Tensor<f64> = trunc_normal(&mut rng, &[8, 32], 1.0);
        let run = |t: &Tensor<f64>| {
            let mut g = Graph::new();
            let mut p = Binder::new(&store, false);
            let x = g.constant(t.clone());
            let y = enc.predict_blocks(&mut g, &mut p, x);
            enc.assemble_reconstruction(g.value(y), dims).unwrap()
        };
        let a = run(&base);
        let mut moved = base.clone();
        moved.data_mut()[3 * 32..4 * 32].iter_mut().for_each(|x| *x += 1.0);
        let b = run(&moved);
        assert_eq!(a.dims(), [16; 3]);
        // token 3 = cell (0, 1, 1) covers voxels d 0..8, h 8..16, w 8..16
        for d in 0..16 {
            for h in 0..16 {
                for w in 0..16 {
                    let inside = d < 8 && h >= 8 && w >= 8;
                    assert_eq!(a.at(d, h, w) != b.at(d, h, w), inside, "voxel ({d},{h},{w})");
                }
            }
        }
    }

    #[test]
    fn masked_rows_use_mask_token() {
        let cfg = ModelConfig::tiny();
        let (enc, store) = Encoder::new::<f64, _>(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = patchify(&crop(16, 3), 2).unwrap();
        let b = patchify(&crop(16, 4), 2).unwrap();
        let all = vec![true; a.len()];
        let oa = enc.forward_encoder(&store, &a, Some(&all), Role::Teacher, None).unwrap();
        let ob = enc.forward_encoder(&store, &b, Some(&all), Role::Teacher, None).unwrap();
        assert_eq!(oa, ob);
    }
}
