//! AdamW with decoupled weight decay and a warmup + cosine schedule.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            weight_decay: 1e-4,
            warmup_epochs: 10,
            total_epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} epochs)",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(Error::Config("learning rate and eps must be positive, weight decay non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear warmup to `base_lr`, then cosine decay
/// to zero at `total_epochs`.
pub fn lr_at(epoch: usize, cfg: &OptimConfig) -> Result<f64> {
    if epoch > cfg.total_epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} beyond schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        return Ok(cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64);
    }
    let span = (cfg.total_epochs - cfg.warmup_epochs).max(1) as f64;
    let t = (epoch - cfg.warmup_epochs) as f64 / span;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First and second moments for an ordered parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One AdamW update of every trainable parameter in `params`, in the same
/// order the state was created with.
pub fn adamw_step(params: Vec<&mut Tensor>, state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} tensors, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.requires_grad() && p.grad().is_none() {
            return Err(Error::Contract(format!("trainable tensor {i} has no gradient")));
        }
        if p.numel() != state.first[i].len() {
            return Err(Error::dim("adamw", &[p.numel()], &[state.first[i].len()]));
        }
    }
    state.step += 1;
    let c = &state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(warmup: usize, total: usize) -> OptimConfig {
        OptimConfig {
            base_lr: 1e-3,
            warmup_epochs: warmup,
            total_epochs: total,
            ..OptimConfig::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(10, 50);
        assert_eq!(lr_at(10, &c).unwrap(), 1e-3);
        assert!(lr_at(50, &c).unwrap().abs() < 1e-12);
        assert!((lr_at(30, &c).unwrap() - 5e-4).abs() < 1e-15);
        assert!((lr_at(0, &c).unwrap() - 1e-4).abs() < 1e-18);
        assert_eq!(lr_at(51, &c).unwrap_err().kind(), "contract");
    }

    proptest! {
        #[test]
        fn schedule_shape(warmup in 0usize..20, extra in 1usize..100) {
            let c = cfg(warmup, warmup + extra);
            if warmup > 0 {
                prop_assert!((lr_at(warmup - 1, &c).unwrap() - lr_at(warmup, &c).unwrap()).abs() < 1e-15);
            }
            for e in warmup..warmup + extra {
                prop_assert!(lr_at(e + 1, &c).unwrap() <= lr_at(e, &c).unwrap());
            }
        }
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().into_param();
        p.accumulate_grad(&[0.0; 3]);
        let mut c = cfg(0, 10);
        c.weight_decay = 0.0;
        let mut st = OptimState::new(c, &[&p]);
        let before = p.data().to_vec();
        adamw_step(vec![&mut p], &mut st, 1e-2).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn first_step_matches_recurrence() {
        let mut p = Tensor::new(&[1], vec![0.5]).unwrap().into_param();
        p.accumulate_grad(&[1.0]);
        let c = OptimConfig {
            weight_decay: 0.01,
            ..cfg(0, 10)
        };
        let mut st = OptimState::new(c.clone(), &[&p]);
        let lr = 0.1;
        adamw_step(vec![&mut p], &mut st, lr).unwrap();
        // m = 0.1, v = 0.001, m̂ = 1, v̂ = 1
        let m_hat = (1.0 - 0.9) * 1.0 / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * 1.0 / (1.0 - 0.999);
        let expect = 0.5 - lr * (m_hat / (f64::sqrt(v_hat) + 1e-8) + 0.01 * 0.5);
        assert!((p.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks() {
        let mut p = Tensor::new(&[2], vec![2.0, -4.0]).unwrap().into_param();
        p.accumulate_grad(&[0.0, 0.0]);
        let c = OptimConfig {
            weight_decay: 0.1,
            ..cfg(0, 10)
        };
        let mut st = OptimState::new(c, &[&p]);
        adamw_step(vec![&mut p], &mut st, 0.5).unwrap();
        assert!((p.data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
        assert!((p.data()[1] - (-4.0 + 0.5 * 0.1 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_untouched_and_missing_grad_rejected() {
        let mut frozen = Tensor::new(&[1], vec![3.0]).unwrap();
        let mut live = Tensor::new(&[1], vec![1.0]).unwrap().into_param();
        let mut st = OptimState::new(cfg(0, 10), &[&frozen, &live]);
        assert_eq!(
            adamw_step(vec![&mut frozen, &mut live], &mut st, 0.1).unwrap_err().kind(),
            "contract"
        );
        live.accumulate_grad(&[1.0]);
        adamw_step(vec![&mut frozen, &mut live], &mut st, 0.1).unwrap();
        assert_eq!(frozen.data(), &[3.0]);
        assert_ne!(live.data(), &[1.0]);
    }
}
