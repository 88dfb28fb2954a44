//! SGD with Nesterov momentum and the milestone learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::params::{Gradmap, ParamStore};
use crate::tensor::{Real, Tensor};

/// Momentum, Nesterov flag, and decoupled-from-nothing weight decay (decay
/// is folded into the gradient, applied to every parameter).
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "sgd: momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("sgd: negative weight decay"));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers, mirroring the store's shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState<E> {
    buffers: Vec<Tensor<E>>,
}

impl<E: Real> OptimizerState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        OptimizerState {
            buffers: store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// One update of a single tensor, exactly:
/// `g' = g + λ·p;  b ← μ·b + g';  u = g' + μ·b (Nesterov) or b;  p ← p − lr·u`.
pub fn sgd_update_tensor<E: Real>(
    param: &mut Tensor<E>,
    grad: Option<&Tensor<E>>,
    buffer: &mut Tensor<E>,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    if let Some(g) = grad {
        if g.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: param.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    let mu = E::from_f64(cfg.momentum);
    let lambda = E::from_f64(cfg.weight_decay);
    let lr = E::from_f64(lr);
    let n = param.numel();
    for i in 0..n {
        let p = param.data()[i];
        let g = grad.map(|g| g.data()[i]).unwrap_or_else(E::zero);
        let g = g + lambda * p;
        let b = mu * buffer.data()[i] + g;
        buffer.data_mut()[i] = b;
        let update = if cfg.nesterov { g + mu * b } else { b };
        param.data_mut()[i] = p - lr * update;
    }
    Ok(())
}

/// Applies one SGD step to every parameter in store order.
pub fn sgd_step<E: Real>(
    store: &mut ParamStore<E>,
    grads: &Gradmap<E>,
    state: &mut OptimizerState<E>,
    cfg: &SgdConfig,
    lr: f64,
) -> Result<()> {
    cfg.validate()?;
    if grads.len() != store.len() || state.buffers.len() != store.len() {
        return Err(Error::invalid(format!(
            "sgd_step: {} params, {} grads, {} buffers",
            store.len(),
            grads.len(),
            state.buffers.len()
        )));
    }
    for i in 0..store.len() {
        let param = store.value_mut(crate::model::params::Param(i));
        sgd_update_tensor(param, grads.get(i), &mut state.buffers[i], cfg, lr)?;
    }
    Ok(())
}

/// Step schedule: base learning rate divided by `1/gamma` at each milestone.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub end_epoch: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, milestones: Vec<usize>, gamma: f64, end_epoch: usize) -> Result<Self> {
        if base_lr <= 0.0 || gamma <= 0.0 {
            return Err(Error::invalid("schedule: base_lr and gamma must be positive"));
        }
        for w in milestones.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(format!(
                    "schedule: milestones must be strictly increasing, got {milestones:?}"
                )));
            }
        }
        if let Some(&last) = milestones.last() {
            if last >= end_epoch {
                return Err(Error::invalid(format!(
                    "schedule: milestone {last} not before end epoch {end_epoch}"
                )));
            }
        }
        Ok(LrSchedule {
            base_lr,
            milestones,
            gamma,
            end_epoch,
        })
    }

    /// `base_lr · gamma^(milestones ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_lr * self.gamma.powi(hits as i32)
    }

    /// The indoor-dataset recipe: 0.1 divided by 10 at epochs 30 and 40,
    /// 50 epochs total.
    pub fn ntu() -> Self {
        LrSchedule::new(0.1, vec![30, 40], 0.1, 50).unwrap()
    }

    /// The web-video recipe: 0.1 divided by 10 at epochs 45 and 55,
    /// 65 epochs total.
    pub fn kinetics() -> Self {
        LrSchedule::new(0.1, vec![45, 55], 0.1, 65).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(momentum: f64, nesterov: bool, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            momentum,
            nesterov,
            weight_decay,
        }
    }

    #[test]
    fn nesterov_hand_example_bit_exact() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::<f64>::scalar(0.5);
        let mut b = Tensor::<f64>::scalar(0.0);
        sgd_update_tensor(&mut p, Some(&g), &mut b, &plain(0.9, true, 0.0), 0.1).unwrap();
        // b = 0.9·0 + 0.5; u = 0.5 + 0.9·0.5 = 0.95; p = 1 − 0.1·0.95.
        let expected = {
            let b = 0.9f64 * 0.0 + 0.5;
            let u = 0.5 + 0.9 * b;
            1.0 - 0.1 * u
        };
        assert_eq!(p.item(), expected);
        assert_eq!(p.item(), 0.905);
        assert_eq!(b.item(), 0.5);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = Tensor::<f64>::scalar(2.0);
        let g = Tensor::<f64>::scalar(0.25);
        let mut b = Tensor::<f64>::scalar(0.0);
        sgd_update_tensor(&mut p, Some(&g), &mut b, &plain(0.0, false, 0.0), 0.5).unwrap();
        assert_eq!(p.item(), 2.0 - 0.5 * 0.25);
    }

    #[test]
    fn zero_gradient_fresh_buffer_leaves_param_unchanged() {
        let mut p = Tensor::<f64>::scalar(3.0);
        let g = Tensor::<f64>::scalar(0.0);
        let mut b = Tensor::<f64>::scalar(0.0);
        sgd_update_tensor(&mut p, Some(&g), &mut b, &plain(0.9, true, 0.0), 0.1).unwrap();
        assert_eq!(p.item(), 3.0);
    }

    #[test]
    fn weight_decay_shrinks_magnitude_monotonically() {
        for (momentum, nesterov) in [(0.0, false), (0.9, true)] {
            let mut p = Tensor::<f64>::scalar(1.0);
            let mut b = Tensor::<f64>::scalar(0.0);
            let mut last = 1.0f64;
            for _ in 0..10 {
                sgd_update_tensor(&mut p, None, &mut b, &plain(momentum, nesterov, 0.1), 0.1)
                    .unwrap();
                assert!(p.item().abs() < last, "momentum {momentum}");
                last = p.item().abs();
            }
        }
    }

    #[test]
    fn schedule_ntu_values() {
        let s = LrSchedule::ntu();
        assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(29) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(30) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(39) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(40) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn schedule_kinetics_values() {
        let s = LrSchedule::kinetics();
        assert!((s.lr_at(44) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(45) - 0.01).abs() < 1e-12);
        assert!((s.lr_at(55) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_milestones_is_constant() {
        let s = LrSchedule::new(0.05, vec![], 0.1, 10).unwrap();
        for e in 0..10 {
            assert_eq!(s.lr_at(e), 0.05);
        }
    }

    #[test]
    fn schedule_rejects_unsorted_milestones() {
        assert!(LrSchedule::new(0.1, vec![40, 30], 0.1, 50).is_err());
        assert!(LrSchedule::new(0.1, vec![30, 60], 0.1, 50).is_err());
    }
}
