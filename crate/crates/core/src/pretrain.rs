//! The pretraining loop: noisy momentum teacher, attention-guided student
//! masking, the four losses, AdamW on the student, and checkpoints.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{load_archive, save_archive};
use crate::distill::{
    momentum_schedule_from, sharpen, sharpen_rows, total_loss, voxel_mask, Centers, LossBundle, LossWeights,
    SharpenConfig, TeacherState, BASE_MOMENTUM,
};
use crate::encoder::{Encoder, ModelConfig};
use crate::error::{invalid, Error, Result};
use crate::masking::{
    attention_guided_mask_excluding, block_layout, blockwise_mask, broadcast_mask, dropout_mask, patchify, pool_all,
    pool_mask, random_mask, MaskStrategy, MaskVector, MaskingConfig, TokenGrid,
};
use crate::nn::{Binder, ParamGrads, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::phantom::{generate_phantom, PhantomSpec, ShapeKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::views::{sample_views, AugmentConfig, ViewPair};
use crate::volume::Grid3;

/// Which teacher view's attention ranks the student's masked positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SattSource {
    /// The teacher's corrupted copy of the view the student sees.
    SameView,
    /// The teacher's copy of the other view (ablation).
    OtherView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub steps: usize,
    pub warmup_steps: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub seed: u64,
    /// Swap view roles and average the two loss sets.
    pub symmetrize: bool,
    /// Patch dropout on the teacher's inputs.
    pub noisy_teacher: bool,
    pub satt_source: SattSource,
    /// Teacher EMA momentum at step 0; rises to 1 on a cosine.
    pub ema_base: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad: f64,
    /// Steps between checkpoints in the CLI loop; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            steps: 300,
            warmup_steps: 30,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            symmetrize: true,
            noisy_teacher: true,
            satt_source: SattSource::SameView,
            ema_base: BASE_MOMENTUM,
            clip_grad: 3.0,
            checkpoint_every: 0,
        }
    }
}

/// On-the-fly phantom corpus used for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub volume_size: usize,
    pub n_structures: usize,
    pub shapes: Vec<ShapeKind>,
    pub contrast: f64,
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            volume_size: 40,
            n_structures: 1,
            shapes: vec![ShapeKind::Sphere],
            contrast: 1.0,
            radius_min: 4.0,
            radius_max: 7.0,
        }
    }
}

impl DataConfig {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            grid_size: self.volume_size,
            n_structures: self.n_structures,
            structure_classes: self.shapes.clone(),
            intensity_contrast: self.contrast,
            radius: (self.radius_min, self.radius_max),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: RunConfig,
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub sharpen: SharpenConfig,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    /// CPU-scale profile used by the acceptance suite.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Reference values at full scale (documentation; not meant to run on
    /// a desktop). Epoch counts are recorded as steps.
    pub fn paper() -> Self {
        TrainConfig {
            train: RunConfig {
                steps: 800,
                warmup_steps: 80,
                lr: 8e-4,
                ..Default::default()
            },
            model: ModelConfig::paper(),
            augment: AugmentConfig {
                crop_size: 128,
                ..Default::default()
            },
            data: DataConfig {
                volume_size: 160,
                radius_min: 8.0,
                radius_max: 24.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Gradient-check scale.
    pub fn tiny() -> Self {
        TrainConfig {
            train: RunConfig {
                steps: 20,
                warmup_steps: 2,
                batch_size: 2,
                ..Default::default()
            },
            model: ModelConfig::tiny(),
            augment: AugmentConfig {
                crop_size: 16,
                ..Default::default()
            },
            data: DataConfig {
                volume_size: 20,
                radius_min: 2.0,
                radius_max: 4.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected desk, paper or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate()?;
        self.sharpen.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 {
            return Err(invalid("train.steps and train.batch_size must be positive"));
        }
        if t.warmup_steps > t.steps {
            return Err(invalid("train.warmup_steps exceeds train.steps"));
        }
        if !(0.0..=1.0).contains(&t.ema_base) {
            return Err(invalid("train.ema_base must lie in [0, 1]"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) || !(t.clip_grad >= 0.0) {
            return Err(invalid("train.lr and train.clip_grad must be non-negative"));
        }
        if self.augment.crop_size != self.model.input_size {
            return Err(invalid(format!(
                "augment.crop_size {} must equal model.input_size {}",
                self.augment.crop_size, self.model.input_size
            )));
        }
        if self.data.volume_size < self.augment.crop_size {
            return Err(invalid("data.volume_size is smaller than the crop"));
        }
        if self.masking.strategy == MaskStrategy::Blockwise {
            let sa = self.model.stage_grid(self.model.sa_stage);
            if sa.iter().any(|&d| d < self.masking.block_edge) {
                return Err(invalid(format!(
                    "masking.block_edge {} exceeds the selection grid {sa:?}",
                    self.masking.block_edge
                )));
            }
        }
        self.data.spec(0).validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(step, self.train.steps, self.train.warmup_steps, self.train.lr)
    }
}

/// Linear warmup from 0 to `base`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if step >= total || total <= warmup {
        return 0.0;
    }
    let t = (step - warmup) as f64 / (total - warmup) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub momentum: f64,
    pub lr: f64,
    /// Seconds spent in the step.
    pub wall_time: f64,
}

impl StepRecord {
    /// Equality of everything but the wall-clock time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        self.step == other.step
            && self.losses == other.losses
            && self.momentum.to_bits() == other.momentum.to_bits()
            && self.lr.to_bits() == other.lr.to_bits()
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// A step's record plus the gradient audit.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    /// Student parameters that received a gradient.
    pub student_grad_params: usize,
    /// Teacher parameters that received a gradient (always 0).
    pub teacher_grad_params: usize,
    pub grad_norm: f64,
}

struct TeacherPass<T> {
    satt: Vec<f64>,
    dropped: Option<Vec<bool>>,
    cls: Tensor<T>,
    global: Tensor<T>,
    patch: Tensor<T>,
}

fn teacher_pass<T: Scalar>(
    g: &mut Graph<T>,
    enc: &Encoder,
    p: &mut Binder<T>,
    tokens: &TokenGrid<T>,
    dropped: Option<Vec<bool>>,
) -> Result<TeacherPass<T>> {
    let t = enc.trunk(g, p, tokens, dropped.as_deref(), None)?;
    let patch = enc.project_patch_tokens(g, p, t.stage3);
    let cls = enc.project_cls(g, p, t.sa.cls);
    let global = enc.project_global(g, p, t.global);
    let sa = enc.sa.output(g, t.sa);
    Ok(TeacherPass {
        satt: sa.satt.iter().map(|x| x.as_f64()).collect(),
        dropped,
        cls: g.value(cls).clone(),
        global: g.value(global).clone(),
        patch: g.value(patch).clone(),
    })
}

/// Student mask on the input token grid. Selection happens on the grid
/// where SATT lives and is broadcast down.
fn select_mask<T: Scalar>(
    cfg: &TrainConfig,
    source: &TeacherPass<T>,
    rng: &mut ChaCha8Rng,
) -> Result<MaskVector> {
    let m = &cfg.model;
    let sel_dims = m.stage_grid(m.sa_stage);
    let input = m.input_grid();
    let n_sel: usize = sel_dims.iter().product();
    let mc = &cfg.masking;
    let sel = match mc.strategy {
        MaskStrategy::Attention => {
            let excluded = match (&source.dropped, mc.exclude_dropped) {
                (Some(d), true) => Some(pool_all(d, input, sel_dims)?),
                _ => None,
            };
            attention_guided_mask_excluding(&source.satt, excluded.as_deref(), mc)?
        }
        MaskStrategy::Random => random_mask(n_sel, mc.r, rng)?,
        MaskStrategy::Blockwise => blockwise_mask(sel_dims, mc.r, mc.block_edge, rng)?,
        MaskStrategy::PatchDropout => return Err(invalid("patch_dropout is not a student strategy")),
    };
    broadcast_mask(&sel, sel_dims, input)
}

struct Branch {
    amip: Var,
    ampd: Var,
    aitd: Var,
    gitd: Var,
}

/// Per-step constants shared by every student branch.
struct StepCtx<'a, T> {
    cfg: &'a TrainConfig,
    tau_t: f64,
    centers: &'a Centers<T>,
    layout: Rc<[u32]>,
}

#[allow(clippy::too_many_arguments)]
fn student_branch<T: Scalar>(
    g: &mut Graph<T>,
    enc: &Encoder,
    p: &mut Binder<T>,
    ctx: &StepCtx<T>,
    tokens: &TokenGrid<T>,
    view: &Grid3<T>,
    mask: &MaskVector,
    same: &TeacherPass<T>,
    other: &TeacherPass<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Branch> {
    let cfg = ctx.cfg;
    let tau_s = T::lit(cfg.sharpen.tau_s);
    let drop: Option<&mut dyn RngCore> = if cfg.model.drop_path > 0.0 { Some(rng) } else { None };
    let flags = mask.masked_flags();
    let t = enc.trunk(g, p, tokens, Some(&flags), drop)?;
    let s_patch = enc.project_patch_tokens(g, p, t.stage3);
    let s_cls = enc.project_cls(g, p, t.sa.cls);
    let s_global = enc.project_global(g, p, t.global);
    let pred = enc.predict_blocks(g, p, t.stage3);

    let rows = pool_mask(mask, cfg.model.input_grid(), t.stage3_dims)?.masked_flags();
    let tp = sharpen_rows(&same.patch, ctx.tau_t, Some(&ctx.centers.patch))?.into_data();
    let ampd = g.soft_cross_entropy(s_patch, tp, tau_s, Some(rows.into()));
    let tc = sharpen(other.cls.data(), ctx.tau_t, Some(&ctx.centers.cls))?;
    let aitd = g.soft_cross_entropy(s_cls, tc, tau_s, None);
    let tg = sharpen(other.global.data(), ctx.tau_t, Some(&ctx.centers.global))?;
    let gitd = g.soft_cross_entropy(s_global, tg, tau_s, None);

    let vm = voxel_mask(mask, view.dims(), cfg.model.patch)?;
    let target: Vec<T> = ctx.layout.iter().map(|&v| view.data()[v as usize]).collect();
    let sel: Vec<bool> = ctx.layout.iter().map(|&v| vm[v as usize]).collect();
    let amip = g.masked_l1(pred, target.into(), Some(sel.into()));
    Ok(Branch { amip, ampd, aitd, gitd })
}

fn stats<T: Scalar>(g: &Grid3<T>) -> String {
    let v: Vec<f64> = g.data().iter().map(|x| x.as_f64()).collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    format!("mean {mean:.4} sd {sd:.4} min {lo:.4} max {hi:.4}")
}

/// One optimization step over a batch of view pairs.
///
/// The teacher sees patch-dropped copies of both views; its attention on
/// one view ranks the student's masked positions; the student is trained
/// on all losses; then the teacher follows by EMA and its logit centers
/// are refreshed.
#[allow(clippy::too_many_arguments)]
/// Losses and student gradients of one batch, with no parameter update.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Batch-mean components; `losses.total` is the differentiated objective.
    pub losses: LossBundle,
    pub grads: ParamGrads<T>,
    /// Teacher parameters that received a gradient (always expected 0).
    pub teacher_grad_params: usize,
    cls_rows: Vec<T>,
    global_rows: Vec<T>,
    patch_rows: Vec<T>,
}

/// Forward and backward over a batch. Every random draw (teacher dropout,
/// masks) comes from `rng` in a fixed order, so a cloned generator replays
/// the same draws.
pub fn batch_loss<T: Scalar>(
    batch: &[ViewPair<T>],
    enc: &Encoder,
    student: &ParamStore<T>,
    teacher: &TeacherState<T>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss<T>> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let total_steps = cfg.train.steps;
    let ctx = StepCtx {
        cfg,
        tau_t: cfg.sharpen.teacher_tau(step, total_steps),
        centers: &teacher.centers,
        layout: block_layout(cfg.model.stage_grid(3), cfg.model.stage3_block()).into(),
    };
    let n_in: usize = cfg.model.input_grid().iter().product();
    let w = cfg.loss;
    let half = if cfg.train.symmetrize { 0.5 } else { 1.0 };
    let inv_b = T::one() / T::from_usize_lossy(batch.len());

    let mut grads = ParamGrads::empty(student.len());
    let mut teacher_grads = 0;
    let mut sums = [0.0f64; 4];
    let (mut cls_rows, mut global_rows, mut patch_rows) = (Vec::new(), Vec::new(), Vec::new());
    for pair in batch {
        let tu = patchify(&pair.u, cfg.model.patch)?;
        let tv = patchify(&pair.v, cfg.model.patch)?;
        let mut g = Graph::new();
        let mut tb = Binder::new(&teacher.params, false);
        let mut sb = Binder::new(student, true);
        let drop = |rng: &mut ChaCha8Rng| -> Result<Option<Vec<bool>>> {
            Ok(if cfg.train.noisy_teacher {
                Some(dropout_mask(n_in, cfg.masking.r_t, rng)?.masked_flags())
            } else {
                None
            })
        };
        let du = drop(rng)?;
        let dv = drop(rng)?;
        let t_u = teacher_pass(&mut g, enc, &mut tb, &tu, du)?;
        let t_v = teacher_pass(&mut g, enc, &mut tb, &tv, dv)?;
        let (src_u, src_v) = match cfg.train.satt_source {
            SattSource::SameView => (&t_u, &t_v),
            SattSource::OtherView => (&t_v, &t_u),
        };
        let m_u = select_mask(cfg, src_u, rng)?;
        let mut branches = vec![student_branch(&mut g, enc, &mut sb, &ctx, &tu, &pair.u, &m_u, &t_u, &t_v, rng)?];
        if cfg.train.symmetrize {
            let m_v = select_mask(cfg, src_v, rng)?;
            branches.push(student_branch(&mut g, enc, &mut sb, &ctx, &tv, &pair.v, &m_v, &t_v, &t_u, rng)?);
        }
        let mut terms = Vec::new();
        let mut comp = [0.0f64; 4];
        for b in &branches {
            for (i, (v, lw)) in [(b.amip, 1.0), (b.ampd, w.ampd), (b.aitd, w.aitd), (b.gitd, w.gitd)]
                .into_iter()
                .enumerate()
            {
                terms.push((v, T::lit(half * lw)));
                comp[i] += half * g.value(v).data()[0].as_f64();
            }
        }
        let total = g.weighted_sum(&terms);
        let bundle = total_loss(comp[0], comp[1], comp[2], comp[3], w);
        if !bundle.is_finite() || !g.value(total).is_finite() {
            return Err(Error::Divergence {
                step,
                diagnostics: format!(
                    "amip {} ampd {} aitd {} gitd {}; view u: {}; view v: {}",
                    bundle.amip,
                    bundle.ampd,
                    bundle.aitd,
                    bundle.gitd,
                    stats(&pair.u),
                    stats(&pair.v)
                ),
            });
        }
        let mut gr = g.backward(total);
        grads.accumulate(sb.collect(&mut gr), inv_b);
        teacher_grads += tb.collect(&mut gr).count();
        for (s, c) in sums.iter_mut().zip(comp) {
            *s += c;
        }
        for t in [&t_u, &t_v] {
            cls_rows.extend_from_slice(t.cls.data());
            global_rows.extend_from_slice(t.global.data());
            patch_rows.extend_from_slice(t.patch.data());
        }
    }

    let nb = batch.len() as f64;
    Ok(BatchLoss {
        losses: total_loss(sums[0] / nb, sums[1] / nb, sums[2] / nb, sums[3] / nb, w),
        grads,
        teacher_grad_params: teacher_grads,
        cls_rows,
        global_rows,
        patch_rows,
    })
}

/// One optimization step: [`batch_loss`], clipping, AdamW, EMA and centers.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_step<T: Scalar>(
    batch: &[ViewPair<T>],
    enc: &Encoder,
    student: &mut ParamStore<T>,
    teacher: &mut TeacherState<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let started = Instant::now();
    let total_steps = cfg.train.steps;
    let BatchLoss {
        losses,
        mut grads,
        teacher_grad_params,
        cls_rows,
        global_rows,
        patch_rows,
    } = batch_loss(batch, enc, student, teacher, cfg, step, rng)?;
    let grad_norm = grads.norm().as_f64();
    if !grad_norm.is_finite() {
        return Err(Error::Divergence {
            step,
            diagnostics: format!("non-finite gradient norm {grad_norm}"),
        });
    }
    if cfg.train.clip_grad > 0.0 && grad_norm > cfg.train.clip_grad {
        let s = T::lit(cfg.train.clip_grad / grad_norm);
        for g in grads.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    let lr = cfg.lr_at(step);
    opt.step(student, &grads, lr)?;
    let momentum = momentum_schedule_from(cfg.train.ema_base, step.min(total_steps), total_steps)?;
    teacher.ema_update(student, momentum)?;
    let k = cfg.model.proj_dim;
    teacher.update_centers(
        &Tensor::new([cls_rows.len() / k, k], cls_rows),
        &Tensor::new([global_rows.len() / k, k], global_rows),
        &Tensor::new([patch_rows.len() / k, k], patch_rows),
        cfg.sharpen.center_momentum,
    )?;

    Ok(StepOutcome {
        record: StepRecord {
            step,
            losses,
            momentum,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        },
        student_grad_params: grads.count(),
        teacher_grad_params,
        grad_norm,
    })
}

/// Full mutable training state.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub encoder: Encoder,
    pub student: ParamStore<T>,
    pub teacher: TeacherState<T>,
    pub opt: AdamW<T>,
    pub rng: ChaCha8Rng,
    /// Completed steps.
    pub step: usize,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run: the model is initialized from the run seed and the
    /// teacher starts as an exact copy of the student.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (encoder, student) = Encoder::new::<T, _>(cfg.model.clone(), &mut rng)?;
        let teacher = TeacherState::from_student(&student, cfg.model.proj_dim, cfg.train.steps);
        let opt = AdamW::new(cfg.optim.clone(), &student);
        Ok(Trainer {
            cfg,
            encoder,
            student,
            teacher,
            opt,
            rng,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.train.steps
    }

    /// Draws fresh phantoms and their view pairs from the run stream.
    pub fn sample_batch(&mut self) -> Result<Vec<ViewPair<T>>> {
        (0..self.cfg.train.batch_size)
            .map(|_| {
                let seed = self.rng.gen::<u64>();
                let vol = generate_phantom::<T>(&self.cfg.data.spec(seed))?;
                sample_views(&vol, &self.cfg.augment, &mut self.rng)
            })
            .collect()
    }

    pub fn train_step(&mut self) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(invalid(format!("run already completed {} steps", self.step)));
        }
        let batch = self.sample_batch()?;
        let out = pretrain_step(
            &batch,
            &self.encoder,
            &mut self.student,
            &mut self.teacher,
            &mut self.opt,
            &self.cfg,
            self.step,
            &mut self.rng,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Trains until `until` steps are complete (capped at the configured total).
    pub fn run_until(&mut self, until: usize, mut on_step: impl FnMut(&Self, &StepOutcome) -> Result<()>) -> Result<()> {
        while self.step < until.min(self.cfg.train.steps) {
            let out = self.train_step()?;
            on_step(self, &out)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "pretrain",
            "config": self.cfg,
            "step": self.step,
            "optimizer_t": self.opt.t,
            "teacher_step": self.teacher.step,
            "rng": {
                "seed": hex(&self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
        });
        let mut tensors: Vec<(String, &Tensor<T>)> = Vec::new();
        for (prefix, store) in [
            ("student", &self.student),
            ("teacher", &self.teacher.params),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ] {
            for id in store.ids() {
                tensors.push((format!("{prefix}/{}", store.name(id)), store.get(id)));
            }
        }
        let k = self.cfg.model.proj_dim;
        let centers = [
            Tensor::new([k], self.teacher.centers.cls.clone()),
            Tensor::new([k], self.teacher.centers.global.clone()),
            Tensor::new([k], self.teacher.centers.patch.clone()),
        ];
        for (name, t) in ["center/cls", "center/global", "center/patch"].iter().zip(&centers) {
            tensors.push((name.to_string(), t));
        }
        save_archive(path, &meta, &tensors)
    }

    /// Restores a run exactly as saved. Nothing is returned on failure.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (manifest, tensors) = load_archive::<T>(path)?;
        let corrupt = |reason: String| Error::Corruption {
            path: path.to_path_buf(),
            reason,
        };
        let meta = &manifest.meta;
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| corrupt(format!("bad config in manifest: {e}")))?;
        let mut tr = Trainer::<T>::new(cfg)?;
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor<T>> {
            let t = by_name.remove(&name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(corrupt(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (prefix, store) in [
            ("student", &mut tr.student),
            ("teacher", &mut tr.teacher.params),
            ("adam_m", &mut tr.opt.m),
            ("adam_v", &mut tr.opt.v),
        ] {
            let ids: Vec<_> = store.ids().collect();
            for id in ids {
                let name = format!("{prefix}/{}", store.name(id));
                let shape = store.get(id).shape().to_vec();
                *store.get_mut(id) = take(name, &shape)?;
            }
        }
        let k = tr.cfg.model.proj_dim;
        tr.teacher.centers = Centers {
            cls: take("center/cls".into(), &[k])?.into_data(),
            global: take("center/global".into(), &[k])?.into_data(),
            patch: take("center/patch".into(), &[k])?.into_data(),
        };
        let field = |k: &str| meta.get(k).and_then(|v| v.as_u64()).ok_or_else(|| corrupt(format!("missing {k}")));
        tr.step = field("step")? as usize;
        tr.opt.t = field("optimizer_t")?;
        tr.teacher.step = field("teacher_step")? as usize;
        let rng = &meta["rng"];
        let seed: [u8; 32] = rng["seed"]
            .as_str()
            .and_then(unhex)
            .and_then(|v| v.try_into().ok())
            .ok_or_else(|| corrupt("bad rng seed".into()))?;
        let stream = rng["stream"].as_u64().ok_or_else(|| corrupt("bad rng stream".into()))?;
        let word_pos: u128 = rng["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("bad rng position".into()))?;
        tr.rng = ChaCha8Rng::from_seed(seed);
        tr.rng.set_stream(stream);
        tr.rng.set_word_pos(word_pos);
        Ok(tr)
    }
}

/// Model weights restored from a checkpoint for evaluation.
#[derive(Debug, Clone)]
pub struct LoadedModel<T> {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub step: usize,
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let tr = Trainer::<T>::load_checkpoint(path)?;
    Ok(LoadedModel {
        config: tr.cfg,
        encoder: tr.encoder,
        student: tr.student,
        teacher: tr.teacher.params,
        step: tr.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0, 100, 10, 1e-3), 0.0);
        assert!((lr_schedule(10, 100, 10, 1e-3) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(5, 100, 10, 1e-3) - 5e-4).abs() < 1e-18);
        assert!(lr_schedule(100, 100, 10, 1e-3).abs() < 1e-9);
        // cosine midpoint
        assert!((lr_schedule(55, 100, 10, 1e-3) - 5e-4).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 10..=100 {
            let l = lr_schedule(s, 100, 10, 1e-3);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn profiles_validate() {
        TrainConfig::desk().validate().unwrap();
        TrainConfig::paper().validate().unwrap();
        TrainConfig::tiny().validate().unwrap();
        assert!(TrainConfig::profile("nope").is_err());
    }

    #[test]
    fn hex_roundtrip() {
        let b = [0u8, 1, 254, 255, 16];
        assert_eq!(unhex(&hex(&b)).unwrap(), b);
        assert!(unhex("abc").is_none());
    }

    fn tiny_trainer() -> Trainer<f64> {
        Trainer::new(TrainConfig::tiny()).unwrap()
    }

    #[test]
    fn tiny_step_audits() {
        let mut tr = tiny_trainer();
        let before = tr.teacher.params.clone();
        let student_before = tr.student.clone();
        let out = tr.train_step().unwrap();
        assert_eq!(out.teacher_grad_params, 0);
        assert!(out.student_grad_params > 0);
        assert!(out.record.losses.is_finite());
        // the teacher moved by the EMA formula alone
        let lambda = out.record.momentum;
        let mut expect = before.clone();
        crate::distill::ema_params(&mut expect, &tr.student, lambda).unwrap();
        assert_eq!(expect, tr.teacher.params);
        // student starts equal to teacher, so the first EMA drift is bounded
        let drift = before.distance(&tr.teacher.params);
        assert!(drift <= (1.0 - lambda) * before.distance(&tr.student) + 1e-12);
        assert_eq!(student_before, before);
    }

    #[test]
    fn zero_weights_leave_amip() {
        let mut cfg = TrainConfig::tiny();
        cfg.loss = LossWeights {
            ampd: 0.0,
            aitd: 0.0,
            gitd: 0.0,
        };
        let mut tr = Trainer::<f64>::new(cfg).unwrap();
        let r = tr.train_step().unwrap().record;
        assert_eq!(r.losses.total, r.losses.amip);
    }

    #[test]
    fn checkpoint_resume_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.smrt");
        let mut a = tiny_trainer();
        a.train_step().unwrap();
        a.save_checkpoint(&path).unwrap();
        let mut b = Trainer::<f64>::load_checkpoint(&path).unwrap();
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher, b.teacher);
        assert_eq!(a.opt, b.opt);
        for _ in 0..2 {
            let ra = a.train_step().unwrap().record;
            let rb = b.train_step().unwrap().record;
            assert!(ra.same_values(&rb), "{ra:?} vs {rb:?}");
        }
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            Trainer::<f64>::load_checkpoint(&path),
            Err(Error::Corruption { .. })
        ));
    }
}
