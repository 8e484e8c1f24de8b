//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub first: Vec<Tensor<f64>>,
    pub second: Vec<Tensor<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Which tensors receive weight decay.
    pub decay: Vec<bool>,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]], decay: Vec<bool>) -> Result<Self> {
        if decay.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{} decay flags for {} tensors",
                decay.len(),
                shapes.len()
            )));
        }
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s)).collect::<Vec<_>>();
        Ok(Self {
            config,
            decay,
            state: AdamWState {
                step: 0,
                first: zeros(),
                second: zeros(),
            },
        })
    }

    /// One update. Decay is applied to the weights first, then the
    /// bias-corrected Adam step.
    pub fn step(&mut self, params: Vec<&mut Tensor<f64>>, grads: &[Tensor<f64>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.decay.len() {
            return Err(Error::Config(format!(
                "{} parameters, {} gradients, {} optimizer slots",
                params.len(),
                grads.len(),
                self.decay.len()
            )));
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {i}: shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let decay = if self.decay[i] { c.learning_rate * c.weight_decay } else { 0.0 };
            let m = self.state.first[i].data_mut();
            let v = self.state.second[i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *w -= decay * *w;
                *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
                *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *w -= c.learning_rate * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_nested(&[&[1.0, -2.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &[&[1, 2]],
            vec![true],
        )
        .unwrap();
        opt.step(vec![&mut p], &[Tensor::from_nested(&[&[3.0, -0.5]])]).unwrap();
        assert!((p.get(0, 0) - (1.0 - 1e-4)).abs() < 1e-10);
        assert!((p.get(0, 1) - (-2.0 + 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn zero_learning_rate_only_touches_state() {
        let mut p = Tensor::from_nested(&[&[0.5]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                learning_rate: 0.0,
                ..Default::default()
            },
            &[&[1, 1]],
            vec![true],
        )
        .unwrap();
        opt.step(vec![&mut p], &[Tensor::from_nested(&[&[1.0]])]).unwrap();
        assert_eq!(p.get(0, 0), 0.5);
        assert_eq!(opt.state.step, 1);
        assert!(opt.state.first[0].get(0, 0) > 0.0);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = Tensor::from_nested(&[&[2.0]]);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &[&[1, 1]], vec![true]).unwrap();
        opt.step(vec![&mut p], &[Tensor::from_nested(&[&[0.0]])]).unwrap();
        assert!((p.get(0, 0) - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }
}
