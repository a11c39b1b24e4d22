use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Parameters, Slot};
use crate::tape::Gradients;
use crate::tensor::Scalar;

/// SGD hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    /// Nesterov SGD, lr 0.1, momentum 0.9, weight decay 1e-4, batch 128,
    /// 300 epochs.
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 300,
        }
    }
}

/// Hyper-parameters plus one velocity buffer per learnable tensor.
#[derive(Clone, Debug, Default)]
pub struct OptimState {
    pub config: OptimConfig,
    velocity: IndexMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig) -> Self {
        Self {
            config,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// `lr = lr0 / 2 * (1 + cos(pi * t / total))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// One Nesterov step on a flat array:
/// `g' = g + wd w; v = mu v + g'; w -= lr (g' + mu v)`.
pub fn sgd_update<T: Scalar>(
    w: &mut [T],
    g: &[T],
    v: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let wf = w.to_f64();
        let gd = g.to_f64() + weight_decay * wf;
        *v = momentum * *v + gd;
        *w = T::from_f64(wf - lr * (gd + momentum * *v));
    }
}

/// Update every learnable tensor that has a gradient. Tensors the loss
/// never reached are left untouched.
pub fn sgd_step<T: Scalar, P: Parameters<T> + ?Sized>(
    params: &mut P,
    grads: &Gradients<T>,
    state: &mut OptimState,
    lr: f64,
) -> Result<()> {
    let cfg = state.config;
    let mut failure: Option<Error> = None;
    params.visit_mut(&mut |p| {
        if p.slot != Slot::Learnable || failure.is_some() {
            return;
        }
        let Some(g) = grads.param(&p.name) else {
            return;
        };
        if g.len() != p.data.len() {
            failure = Some(Error::Dimension(format!(
                "gradient for {} has {} entries, parameter has {}",
                p.name,
                g.len(),
                p.data.len()
            )));
            return;
        }
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| vec![0.0; p.data.len()]);
        if v.len() != p.data.len() {
            failure = Some(Error::Dimension(format!(
                "velocity for {} has the wrong length",
                p.name
            )));
            return;
        }
        sgd_update(p.data, g, v, lr, cfg.momentum, cfg.weight_decay);
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_nesterov_step() {
        let (mut w, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(v[0], 1.0);
        assert!((w[0] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn no_momentum_is_plain_sgd() {
        let (mut w, mut v) = ([2.0f64, -1.0], [0.0, 0.0]);
        sgd_update(&mut w, &[0.5, 4.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(w, [2.0 - 0.05, -1.0 - 0.4]);
    }

    #[test]
    fn two_steps_hand_unrolled() {
        // g = 1, mu = 0.9, lr = 0.1, wd = 0:
        // step 1: v = 1, w = 1 - 0.1 * (1 + 0.9) = 0.81
        // step 2: v = 1.9, w = 0.81 - 0.1 * (1 + 1.71) = 0.539
        let (mut w, mut v) = ([1.0f64], [0.0]);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        sgd_update(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] - 1.9).abs() < 1e-15);
        assert!((w[0] - 0.539).abs() < 1e-12);
    }

    #[test]
    fn five_steps_match_closed_form() {
        // v_k = sum_{j<k} mu^j, w_k = w_{k-1} - lr (1 + mu v_k)
        let (mu, lr) = (0.9, 0.05);
        let (mut w, mut v) = ([0.3f64], [0.0]);
        let mut expect = 0.3;
        for k in 1..=5 {
            sgd_update(&mut w, &[1.0], &mut v, lr, mu, 0.0);
            let vk = (1.0 - mu.powi(k)) / (1.0 - mu);
            expect -= lr * (1.0 + mu * vk);
            assert!((v[0] - vk).abs() < 1e-12);
            assert!((w[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let (mut w, mut v) = ([2.0f64], [0.0]);
        sgd_update(&mut w, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((w[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 300, 0.1), 0.1);
        assert!(cosine_lr(300, 300, 0.1).abs() < 1e-17);
        assert!((cosine_lr(150, 300, 0.1) - 0.05).abs() < 1e-15);
    }
}
