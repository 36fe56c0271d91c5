//! Sharpening, centering, the four pretraining losses and the momentum
//! teacher update.

use serde::{Deserialize, Serialize};

use crate::autograd::log_floor;
use crate::error::{invalid, shape, Error, Result};
use crate::masking::MaskVector;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Grid3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SharpenConfig {
    pub tau_s: f64,
    /// Teacher temperature at step 0.
    pub tau_t_start: f64,
    /// Teacher temperature after warmup.
    pub tau_t: f64,
    /// Fraction of training over which the teacher temperature ramps.
    pub tau_t_warmup: f64,
    pub center_momentum: f64,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        SharpenConfig {
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t: 0.07,
            tau_t_warmup: 0.1,
            center_momentum: 0.9,
        }
    }
}

impl SharpenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0 && self.tau_t > 0.0 && self.tau_t_start > 0.0) {
            return Err(invalid("sharpen temperatures must be positive"));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(invalid("sharpen.center_momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.tau_t_warmup) {
            return Err(invalid("sharpen.tau_t_warmup must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Teacher temperature, ramped linearly over the warmup fraction.
    pub fn teacher_tau(&self, step: usize, total_steps: usize) -> f64 {
        let warm = self.tau_t_warmup * total_steps as f64;
        if warm <= 0.0 || step as f64 >= warm {
            self.tau_t
        } else {
            self.tau_t_start + (self.tau_t - self.tau_t_start) * step as f64 / warm
        }
    }
}

/// Softmax of `(logits − center) / tau`.
pub fn sharpen<T: Scalar>(logits: &[T], tau: f64, center: Option<&[T]>) -> Result<Vec<T>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if let Some(c) = center {
        if c.len() != logits.len() {
            return Err(shape("center length differs from logits"));
        }
    }
    let inv = T::lit(1.0 / tau);
    let z: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| (l - center.map_or(T::zero(), |c| c[i])) * inv)
        .collect();
    let max = z.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let e: Vec<T> = z.iter().map(|&x| (x - max).exp()).collect();
    let s: T = e.iter().copied().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// Row-wise [`sharpen`] of a `[R, K]` matrix.
pub fn sharpen_rows<T: Scalar>(logits: &Tensor<T>, tau: f64, center: Option<&[T]>) -> Result<Tensor<T>> {
    let k = logits.cols();
    let mut out = Vec::with_capacity(logits.numel());
    for r in 0..logits.rows() {
        out.extend(sharpen(logits.row(r), tau, center)?);
    }
    Ok(Tensor::new([logits.rows(), k], out))
}

/// `m·center + (1 − m)·mean(batch rows)`.
pub fn update_center<T: Scalar>(center: &[T], batch: &Tensor<T>, momentum: f64) -> Result<Vec<T>> {
    if batch.cols() != center.len() {
        return Err(shape("batch logits width differs from center"));
    }
    if !batch.is_finite() {
        return Err(invalid("teacher logits are not finite"));
    }
    let rows = batch.rows();
    if rows == 0 {
        return Ok(center.to_vec());
    }
    let m = T::lit(momentum);
    let inv = T::one() / T::from_usize_lossy(rows);
    Ok((0..center.len())
        .map(|j| {
            let mean = (0..rows).map(|r| batch.row(r)[j]).sum::<T>() * inv;
            m * center[j] + (T::one() - m) * mean
        })
        .collect())
}

fn check_prob<T: Scalar>(p: &[T], what: &str) -> Result<()> {
    let s: f64 = p.iter().map(|x| x.as_f64()).sum();
    if (s - 1.0).abs() > 1e-4 || p.iter().any(|x| !(x.as_f64() >= 0.0)) {
        return Err(invalid(format!("{what} is not a probability vector (sum {s})")));
    }
    Ok(())
}

/// `−Σ p_t · max(log p_s, ln 1e-12)`.
pub fn cross_entropy<T: Scalar>(p_t: &[T], p_s: &[T]) -> Result<T> {
    if p_t.len() != p_s.len() {
        return Err(shape("distribution lengths differ"));
    }
    check_prob(p_t, "teacher distribution")?;
    check_prob(p_s, "student distribution")?;
    let floor = log_floor::<T>();
    Ok(p_t
        .iter()
        .zip(p_s)
        .map(|(&t, &s)| -t * s.ln().max(floor))
        .sum())
}

/// [CLS]-token distillation between views.
pub fn aitd_loss<T: Scalar>(p_t_cls: &[T], p_s_cls: &[T]) -> Result<T> {
    cross_entropy(p_t_cls, p_s_cls)
}

/// Global-token distillation between views.
pub fn gitd_loss<T: Scalar>(p_t_g: &[T], p_s_g: &[T]) -> Result<T> {
    cross_entropy(p_t_g, p_s_g)
}

/// Mean per-row cross-entropy over the masked stage-3 rows; 0 if none.
pub fn ampd_loss<T: Scalar>(p_t: &Tensor<T>, p_s: &Tensor<T>, mask: &MaskVector) -> Result<T> {
    if p_t.shape() != p_s.shape() || p_t.rows() != mask.len() {
        return Err(shape(format!(
            "patch distributions {:?}/{:?} vs mask length {}",
            p_t.shape(),
            p_s.shape(),
            mask.len()
        )));
    }
    if mask.masked_idx.is_empty() {
        return Ok(T::zero());
    }
    let mut total = T::zero();
    for &i in &mask.masked_idx {
        total += cross_entropy(p_t.row(i), p_s.row(i))?;
    }
    Ok(total / T::from_usize_lossy(mask.masked_idx.len()))
}

/// Per-voxel flags: a voxel is selected when its input patch is masked.
pub fn voxel_mask(mask: &MaskVector, dims: [usize; 3], patch: usize) -> Result<Vec<bool>> {
    if patch == 0 || dims.iter().any(|&d| d % patch != 0) {
        return Err(shape(format!("grid {dims:?} not divisible by patch {patch}")));
    }
    let g = dims.map(|d| d / patch);
    if mask.len() != g.iter().product::<usize>() {
        return Err(shape(format!("mask length {} vs token grid {g:?}", mask.len())));
    }
    let mut out = Vec::with_capacity(dims.iter().product());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let t = ((d / patch) * g[1] + h / patch) * g[2] + w / patch;
                out.push(mask.is_masked(t));
            }
        }
    }
    Ok(out)
}

/// Mean absolute reconstruction error over voxels of masked patches.
pub fn amip_loss<T: Scalar>(recon: &Grid3<T>, target: &Grid3<T>, mask: &MaskVector, patch: usize) -> Result<T> {
    if recon.dims() != target.dims() {
        return Err(shape(format!("reconstruction {:?} vs target {:?}", recon.dims(), target.dims())));
    }
    let sel = voxel_mask(mask, target.dims(), patch)?;
    let mut total = T::zero();
    let mut n = 0usize;
    for ((&a, &b), &m) in recon.data().iter().zip(target.data()).zip(&sel) {
        if m {
            total += (a - b).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { T::zero() } else { total / T::from_usize_lossy(n) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub ampd: f64,
    pub aitd: f64,
    pub gitd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ampd: 0.1,
            aitd: 0.1,
            gitd: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ampd, self.aitd, self.gitd].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub amip: f64,
    pub ampd: f64,
    pub aitd: f64,
    pub gitd: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `amip + λ_ampd·ampd + λ_aitd·aitd + λ_gitd·gitd`.
pub fn total_loss(amip: f64, ampd: f64, aitd: f64, gitd: f64, weights: LossWeights) -> LossBundle {
    LossBundle {
        amip,
        ampd,
        aitd,
        gitd,
        total: amip + weights.ampd * ampd + weights.aitd * aitd + weights.gitd * gitd,
        weights,
    }
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.amip, self.ampd, self.aitd, self.gitd, self.total].iter().all(|x| x.is_finite())
    }
}

/// Cosine momentum from `base` at step 0 to 1 at `total_steps`.
pub fn momentum_schedule_from(base: f64, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(invalid(format!("step {step} beyond total {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(1.0);
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    Ok(1.0 - (1.0 - base) * (c + 1.0) / 2.0)
}

pub const BASE_MOMENTUM: f64 = 0.996;

pub fn momentum_schedule(step: usize, total_steps: usize) -> Result<f64> {
    momentum_schedule_from(BASE_MOMENTUM, step, total_steps)
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s` elementwise.
pub fn ema_params<T: Scalar>(teacher: &mut ParamStore<T>, student: &ParamStore<T>, lambda: f64) -> Result<()> {
    teacher.check_same_layout(student)?;
    let l = T::lit(lambda);
    let k = T::one() - l;
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = l * *a + k * b;
        }
    }
    Ok(())
}

/// Running centers of the teacher's cls, global and patch logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Centers<T> {
    pub cls: Vec<T>,
    pub global: Vec<T>,
    pub patch: Vec<T>,
}

impl<T: Scalar> Centers<T> {
    pub fn zeros(k: usize) -> Self {
        Centers {
            cls: vec![T::zero(); k],
            global: vec![T::zero(); k],
            patch: vec![T::zero(); k],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState<T> {
    pub params: ParamStore<T>,
    pub centers: Centers<T>,
    pub step: usize,
    pub total_steps: usize,
}

impl<T: Scalar> TeacherState<T> {
    /// Exact copy of the student with zero centers.
    pub fn from_student(student: &ParamStore<T>, k: usize, total_steps: usize) -> Self {
        TeacherState {
            params: student.clone(),
            centers: Centers::zeros(k),
            step: 0,
            total_steps,
        }
    }

    pub fn ema_update(&mut self, student: &ParamStore<T>, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("momentum {lambda} outside [0, 1]")));
        }
        ema_params(&mut self.params, student, lambda)?;
        self.step += 1;
        Ok(())
    }

    pub fn update_centers(&mut self, cls: &Tensor<T>, global: &Tensor<T>, patch: &Tensor<T>, momentum: f64) -> Result<()> {
        let cls = update_center(&self.centers.cls, cls, momentum)?;
        let global = update_center(&self.centers.global, global, momentum)?;
        let patch = update_center(&self.centers.patch, patch, momentum)?;
        if cls.iter().chain(&global).chain(&patch).any(|x| !x.is_finite()) {
            return Err(Error::Numeric { stage: "teacher centering".into() });
        }
        self.centers = Centers { cls, global, patch };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskStrategy;
    use proptest::prelude::*;

    #[test]
    fn sharpen_examples() {
        let u = sharpen(&[1.0f64; 5], 0.3, None).unwrap();
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let p = sharpen(&[2.0f64, 0.0], 1.0, None).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4 && (p[1] - 0.1192).abs() < 1e-4);
        let sharp = sharpen(&[1.0f64, 0.0, -0.5], 1e-3, None).unwrap();
        assert!((sharp[0] - 1.0).abs() < 1e-6);
        assert!(sharpen(&[1.0f64], 0.0, None).is_err());
        let centred = sharpen(&[3.0f64, 1.0], 1.0, Some(&[2.0, 0.0])).unwrap();
        assert!((centred[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn center_updates() {
        let batch = Tensor::new([2, 2], vec![1.0f64, 2.0, 3.0, 6.0]);
        assert_eq!(update_center(&[9.0, 9.0], &batch, 0.0).unwrap(), vec![2.0, 4.0]);
        assert_eq!(update_center(&[9.0, 9.0], &batch, 1.0 - 1e-300).unwrap(), vec![9.0, 9.0]);
        // geometric recursion: c_n − c = m^n (c_0 − c)
        let constant = Tensor::new([3, 1], vec![5.0f64; 3]);
        let mut c = vec![1.0];
        for n in 1..=20 {
            c = update_center(&c, &constant, 0.9).unwrap();
            let want = 5.0 + 0.9f64.powi(n) * (1.0 - 5.0);
            assert!((c[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn distillation_loss_examples() {
        let u = [0.25f64; 4];
        assert!((aitd_loss(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((gitd_loss(&[1.0, 0.0, 0.0, 0.0], &u).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(aitd_loss(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_minimized_at_teacher() {
        // brute force over a simplex grid for K = 3
        let p_t = [0.5f64, 0.3, 0.2];
        let h: f64 = -p_t.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((cross_entropy(&p_t, &p_t).unwrap() - h).abs() < 1e-12);
        let mut best = f64::INFINITY;
        for i in 1..100 {
            for j in 1..(100 - i) {
                let q = [i as f64 / 100.0, j as f64 / 100.0, (100 - i - j) as f64 / 100.0];
                best = best.min(cross_entropy(&p_t, &q).unwrap());
            }
        }
        assert!((best - h).abs() < 1e-12);
    }

    #[test]
    fn ampd_examples() {
        let u = Tensor::new([3, 4], vec![0.25f64; 12]);
        let none = MaskVector::all_visible(3, MaskStrategy::Attention);
        assert_eq!(ampd_loss(&u, &u, &none).unwrap(), 0.0);
        let one = MaskVector::from_masked(3, vec![1], vec![], MaskStrategy::Attention, 0.3, 0.0);
        assert!((ampd_loss(&u, &u, &one).unwrap() - 4f64.ln()).abs() < 1e-12);
        let pt = Tensor::new([2, 2], vec![0.9f64, 0.1, 0.4, 0.6]);
        let ps = Tensor::new([2, 2], vec![0.7f64, 0.3, 0.2, 0.8]);
        let both = MaskVector::from_masked(2, vec![0, 1], vec![], MaskStrategy::Attention, 1.0, 0.0);
        let r0 = -(0.9 * 0.7f64.ln() + 0.1 * 0.3f64.ln());
        let r1 = -(0.4 * 0.2f64.ln() + 0.6 * 0.8f64.ln());
        assert!((ampd_loss(&pt, &ps, &both).unwrap() - (r0 + r1) / 2.0).abs() < 1e-12);
        assert!(ampd_loss(&pt, &ps, &one).is_err());
    }

    #[test]
    fn amip_examples() {
        let t = Grid3::new([4, 4, 4], (0..64).map(|i| i as f64 * 0.1).collect()).unwrap();
        let all = MaskVector::from_masked(8, (0..8).collect(), vec![], MaskStrategy::Random, 1.0, 0.0);
        assert_eq!(amip_loss(&t, &t, &all, 2).unwrap(), 0.0);
        let shifted = t.map(|x| x + 0.37);
        let some = MaskVector::from_masked(8, vec![2, 5], vec![], MaskStrategy::Random, 0.25, 0.0);
        assert!((amip_loss(&shifted, &t, &some, 2).unwrap() - 0.37).abs() < 1e-12);
        let none = MaskVector::all_visible(8, MaskStrategy::Random);
        assert_eq!(amip_loss(&shifted, &t, &none, 2).unwrap(), 0.0);
        let small = Grid3::filled([2, 2, 2], 0.0);
        assert!(amip_loss(&small, &t, &all, 2).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, w).total, 0.0);
        assert_eq!(total_loss(1.0, 0.0, 0.0, 0.0, w).total, 1.0);
        assert!((total_loss(0.0, 1.0, 1.0, 1.0, w).total - 0.3).abs() < 1e-15);
    }

    #[test]
    fn momentum_examples() {
        assert!((momentum_schedule(0, 100).unwrap() - 0.996).abs() < 1e-15);
        assert!((momentum_schedule(100, 100).unwrap() - 1.0).abs() < 1e-15);
        assert!((momentum_schedule(50, 100).unwrap() - 0.998).abs() < 1e-12);
        assert!(momentum_schedule(101, 100).is_err());
    }

    #[test]
    fn ema_examples() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::new([1], vec![4.0]), true);
        let mut t = ParamStore::<f64>::new();
        t.add("w", Tensor::new([1], vec![2.0]), true);
        let mut st = TeacherState::from_student(&s, 2, 10);
        st.params = t.clone();
        st.ema_update(&s, 1.0).unwrap();
        assert_eq!(st.params, t);
        st.ema_update(&s, 0.5).unwrap();
        assert_eq!(st.params.tensors()[0].data(), &[3.0]);
        st.ema_update(&s, 0.0).unwrap();
        assert_eq!(st.params, s);
        assert_eq!(st.step, 3);
        let mut other = ParamStore::<f64>::new();
        other.add("v", Tensor::new([1], vec![0.0]), true);
        assert!(matches!(st.ema_update(&other, 0.5), Err(Error::Structure(_))));
    }

    #[test]
    fn teacher_tau_ramp() {
        let c = SharpenConfig::default();
        assert_eq!(c.teacher_tau(0, 100), 0.04);
        assert!((c.teacher_tau(5, 100) - 0.055).abs() < 1e-12);
        assert_eq!(c.teacher_tau(10, 100), 0.07);
        assert_eq!(c.teacher_tau(99, 100), 0.07);
    }

    proptest! {
        #[test]
        fn ce_is_at_least_entropy(a in prop::collection::vec(0.01f64..1.0, 5), b in prop::collection::vec(0.01f64..1.0, 5)) {
            let norm = |v: &Vec<f64>| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let (pt, ps) = (norm(&a), norm(&b));
            let h: f64 = -pt.iter().map(|p| p * p.ln()).sum::<f64>();
            let ce = cross_entropy(&pt, &ps).unwrap();
            let direct: f64 = -pt.iter().zip(&ps).map(|(t, s)| t * s.ln()).sum::<f64>();
            prop_assert!((ce - direct).abs() < 1e-12);
            prop_assert!(ce >= h - 1e-12);
            if pt.iter().zip(&ps).any(|(x, y)| (x - y).abs() > 1e-6) {
                prop_assert!(ce > h);
            }
        }

        #[test]
        fn ema_contracts(t in prop::collection::vec(-5.0f64..5.0, 6), s in prop::collection::vec(-5.0f64..5.0, 6), l in 0.01f64..0.99) {
            let mk = |v: &Vec<f64>| { let mut p = ParamStore::new(); p.add("a", Tensor::new([6], v.clone()), true); p };
            let (mut tp, sp) = (mk(&t), mk(&s));
            let before = tp.distance(&sp);
            ema_params(&mut tp, &sp, l).unwrap();
            prop_assert!((tp.distance(&sp) - l * before).abs() < 1e-12);
        }

        #[test]
        fn total_is_linear(a in 0.0f64..5.0, b in 0.0f64..5.0, c in 0.0f64..5.0, d in 0.0f64..5.0, w1 in 0.0f64..1.0, w2 in 0.0f64..1.0, w3 in 0.0f64..1.0) {
            let w = LossWeights { ampd: w1, aitd: w2, gitd: w3 };
            let t = total_loss(a, b, c, d, w).total;
            prop_assert_eq!(t, a + w1 * b + w2 * c + w3 * d);
        }
    }
}
