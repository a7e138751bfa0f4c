//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::Tensor;
use crate::math::{powf, sqrt};
use crate::{Error, Result};

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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }
}

/// One Adam update of `params` in place.
///
/// Non-finite gradients abort before any parameter is touched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and state counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(format!("#{i}")));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - powf(cfg.beta1, t);
    let c2 = 1.0 - powf(cfg.beta2, t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *w -= cfg.lr * mh / (sqrt(vh) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_lr_sign() {
        let mut p = [Tensor::vector(alloc::vec![1.0, -2.0, 0.5])];
        let g = [Tensor::vector(alloc::vec![0.3, -4.0, 1e-3])];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        let d: Vec<f64> = p[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((d[0] + 0.01).abs() < 1e-8);
        assert!((d[1] - 0.01).abs() < 1e-8);
        assert!((d[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = [Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        for _ in 0..2000 {
            let w = p[0].item();
            let g = [Tensor::scalar(2.0 * (w - 3.0))];
            adam_step(&mut p, &g, &mut s, &cfg).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 1e-3, "{}", p[0].item());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [Tensor::vector(alloc::vec![1.5, -0.25])];
        let g = [Tensor::vector(alloc::vec![0.0, 0.0])];
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[1.5, -0.25]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = [Tensor::scalar(1.0)];
        let g = [Tensor::scalar(f64::NAN)];
        let mut s = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut s, &AdamConfig::default()),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(s.step, 0);
    }
}
