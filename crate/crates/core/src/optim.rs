//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{ParamGrads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to parameters registered with decay (weight matrices).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("optimizer betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("optimizer eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        AdamW {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched,
    /// including their decay.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        params.check_same_layout(&self.m)?;
        if grads.grads.len() != params.len() {
            return Err(Error::Structure("gradient count differs from parameter count".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powf(self.t as f64);
        let bc2 = 1.0 - b2.powf(self.t as f64);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(self.cfg.eps);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let decay = if params.decays(id) {
                T::lit(1.0 - lr * self.cfg.weight_decay)
            } else {
                T::one()
            };
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1t * m[i] + (T::one() - b1t) * g[i];
                v[i] = b2t * v[i] + (T::one() - b2t) * g[i] * g[i];
                p[i] = p[i] * decay - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::<f64>::new();
        let w = p.add("w", Tensor::new([3], vec![1.0, -2.0, 0.5]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut g = ParamGrads::empty(1);
        g.grads[w.index()] = Some(vec![0.3, -4.0, 0.0]);
        opt.step(&mut p, &g, 0.01).unwrap();
        let d = p.get(w).data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] + 1.99).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_and_selective() {
        let mut p = ParamStore::<f64>::new();
        let a = p.add("a", Tensor::new([1], vec![2.0]), true);
        let b = p.add("b", Tensor::new([1], vec![2.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let mut g = ParamGrads::empty(2);
        g.grads[a.index()] = Some(vec![0.0]);
        g.grads[b.index()] = Some(vec![0.0]);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!((p.get(a).data()[0] - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        assert_eq!(p.get(b).data()[0], 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        let w = p.add("w", Tensor::new([2], vec![3.0, -1.0]), false);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..2000 {
            let x = p.get(w).data().to_vec();
            let mut g = ParamGrads::empty(1);
            g.grads[0] = Some(vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 2.0)]);
            opt.step(&mut p, &g, 0.01).unwrap();
        }
        let x = p.get(w).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3);
    }
}
