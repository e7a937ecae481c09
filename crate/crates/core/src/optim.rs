//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::autograd::{global_norm, Gradients, ParamStore};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &ParamStore<F>, config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update. Parameters without a gradient still decay.
    pub fn update(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (F::c(c.beta1), F::c(c.beta2));
        let (ob1, ob2) = (F::c(1.0 - c.beta1), F::c(1.0 - c.beta2));
        let step_size = F::c(lr / bc1);
        let inv_bc2 = F::c(1.0 / bc2);
        let eps = F::c(c.eps);
        let decay = F::c(1.0 - lr * c.weight_decay);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            if c.weight_decay != 0.0 {
                p.mapv_inplace(|x| x * decay);
            }
            let Some(g) = grads[id.0].as_ref() else { continue };
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + ob1 * g;
                    *v = b2 * *v + ob2 * g * g;
                    *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                });
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = F::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g: Gradients<f64> = vec![Some(array![[3.0, 4.0]]), None, Some(array![[12.0]])];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 13.0).abs() < 1e-12);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small: Gradients<f64> = vec![Some(array![[0.3]])];
        clip_grad_norm(&mut small, 1.0);
        assert_eq!(small[0].as_ref().unwrap()[[0, 0]], 0.3);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", array![[5.0, -3.0]]);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        // A constant step only reaches a noise floor of its own size.
        for t in 0..2000 {
            let g = vec![Some(s.get(id).mapv(|x| 2.0 * x))];
            opt.update(&mut s, &g, 0.05 * (1.0 - t as f64 / 2000.0));
        }
        assert!(s.get(id).iter().all(|x| x.abs() < 1e-3), "{:?}", s.get(id));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", array![[1.0]]);
        let mut opt = AdamW::new(
            &s,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        opt.update(&mut s, &vec![Some(array![[0.7]])], 0.01);
        assert!((s.get(id)[[0, 0]] - 0.99).abs() < 1e-8);
    }
}
