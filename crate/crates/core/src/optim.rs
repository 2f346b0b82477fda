//! AdamW with bias-corrected moments, decoupled weight decay, and linear
//! learning-rate warmup.

use crate::scalar::Scalar;
use crate::tensor::SharedTensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        }
    }
}

pub struct AdamW<T: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Moment buffers are allocated to match `params`; later `step` calls
    /// must pass the same list in the same order.
    pub fn new(cfg: AdamWConfig, params: &[(String, SharedTensor<T>)]) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.borrow().numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| vec![T::zero(); p.borrow().numel()])
            .collect();
        AdamW {
            cfg,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Effective learning rate at a 1-based step, after linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 || step >= self.cfg.warmup_steps {
            self.cfg.lr
        } else {
            self.cfg.lr * step as f64 / self.cfg.warmup_steps as f64
        }
    }

    /// One update. Parameters whose grad is None are skipped entirely:
    /// no moment update and no weight decay. Returns the lr used.
    pub fn step(&mut self, params: &[(String, SharedTensor<T>)]) -> f64 {
        self.step += 1;
        let t = self.step;
        let lr_t = self.lr_at(t);
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(t as i32));
        let eps = T::from_f64(self.cfg.eps);
        let lr = T::from_f64(lr_t);
        let decay = T::from_f64(1.0 - lr_t * self.cfg.weight_decay);
        for (i, (_, p)) in params.iter().enumerate() {
            let mut pt = p.borrow_mut();
            let Some(grad) = pt.grad.take() else {
                continue;
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = pt.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            pt.grad = Some(grad); // restore; caller decides when to zero
        }
        lr_t
    }
}

/// Drop accumulated gradients on every parameter.
pub fn zero_grads<T: Scalar>(params: &[(String, SharedTensor<T>)]) {
    for (_, p) in params {
        p.borrow_mut().zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{shared, Tensor};

    fn one_param(vals: Vec<f64>) -> Vec<(String, SharedTensor<f64>)> {
        vec![(
            "p".to_string(),
            shared(Tensor::new(vec![1, vals.len()], vals).unwrap()),
        )]
    }

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // with bias correction, the first update is lr·g/(|g|+eps) ≈ lr·sign(g)
        let params = one_param(vec![1.0, 1.0]);
        params[0].1.borrow_mut().accumulate_grad(&[3.0, -0.25]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.1,
                ..Default::default()
            },
            &params,
        );
        opt.step(&params);
        let d = params[0].1.borrow().data().to_vec();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn warmup_is_linear() {
        let params = one_param(vec![0.0]);
        let opt = AdamW::new(
            AdamWConfig {
                lr: 2e-3,
                warmup_steps: 1000,
                ..Default::default()
            },
            &params,
        );
        assert!((opt.lr_at(500) - 1e-3).abs() < 1e-15);
        assert!((opt.lr_at(1000) - 2e-3).abs() < 1e-15);
        assert!((opt.lr_at(5000) - 2e-3).abs() < 1e-15);
        assert!((opt.lr_at(1) - 2e-6).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_params_with_zero_grad() {
        let params = one_param(vec![4.0]);
        params[0].1.borrow_mut().accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.5,
                weight_decay: 0.1,
                ..Default::default()
            },
            &params,
        );
        opt.step(&params);
        // zero grad → moments stay zero → update term 0; decay factor 1−lr·wd
        let got = params[0].1.borrow().data()[0];
        assert!((got - 4.0 * (1.0 - 0.5 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn params_without_grad_are_untouched() {
        let params = one_param(vec![7.0]);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.5,
                weight_decay: 0.5,
                ..Default::default()
            },
            &params,
        );
        opt.step(&params);
        assert_eq!(params[0].1.borrow().data()[0], 7.0);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = AdamWConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
        };
        let params = one_param(vec![1.0]);
        let mut opt = AdamW::new(cfg.clone(), &params);
        let grads = [0.5, -0.2];
        // hand-rolled reference
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mhat = m / (1.0 - cfg.beta1.powi(t));
            let vhat = v / (1.0 - cfg.beta2.powi(t));
            x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
        for &g in &grads {
            params[0].1.borrow_mut().zero_grad();
            params[0].1.borrow_mut().accumulate_grad(&[g]);
            opt.step(&params);
        }
        assert!((params[0].1.borrow().data()[0] - x).abs() < 1e-12);
    }
}
