//! Adam with bias correction. Learning-rate schedules belong to the caller.

use crate::nn::{Module, Param, ParamVisitor};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a flat parameter buffer. `step` is 1-based.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamConfig) {
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(step as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(step as i32));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam state for every parameter of a module, keyed by visit order.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Update every parameter of `module` from its accumulated gradient.
    pub fn step(&mut self, module: &mut (impl Module<T> + ?Sized)) {
        self.step += 1;
        struct Update<'a, T: Real> {
            opt: &'a mut Adam<T>,
            index: usize,
        }
        impl<T: Real> ParamVisitor<T> for Update<'_, T> {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                let opt = &mut *self.opt;
                if opt.moments.len() <= self.index {
                    let shape = p.value.shape().to_vec();
                    opt.moments.push((Tensor::zeros(&shape), Tensor::zeros(&shape)));
                }
                let (m, v) = &mut opt.moments[self.index];
                adam_step(p.value.data_mut(), p.grad.data(), m.data_mut(), v.data_mut(), opt.step, &opt.config);
                self.index += 1;
            }
        }
        module.visit("", &mut Update { opt: self, index: 0 });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [1.5f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps).
        let cfg = AdamConfig { lr: 0.01, ..AdamConfig::default() };
        for g in [0.3f64, -4.0, 1e-3] {
            let mut p = [0.0];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let expected = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p[0] - expected).abs() < 1e-15, "{g}: {} vs {expected}", p[0]);
            assert!(p[0].signum() == -g.signum() && p[0].abs() < cfg.lr);
        }
    }

    #[test]
    fn descends_scalar_quadratic() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut w = [0.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=100 {
            let g = [2.0 * (w[0] - 3.0)];
            adam_step(&mut w, &g, &mut m, &mut v, t, &cfg);
        }
        assert!((w[0] - 3.0).abs() < 0.1, "w = {}", w[0]);
    }
}
