//! Adam optimizer with bias-corrected moment estimates.

use serde::{Deserialize, Serialize};

use super::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Applies one update from the gradients currently stored in the
    /// network. Moment buffers are lazily sized on first use.
    pub fn step(&mut self, net: &mut UNet) {
        let mut params = net.params_mut();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state does not match network");
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(m.len(), p.value.len(), "parameter {i} changed size");
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / b1t;
                let vhat = v[j] / b2t;
                p.value[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::UNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_net() -> UNet {
        let cfg = UNetConfig {
            resolution: 4,
            in_channels: 5,
            out_channels: 2,
            block_channels: vec![4],
            attention_block: 1,
            norm_groups: 2,
            time_embed_dim: 4,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        UNet::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut net = tiny_net();
        let before: Vec<f64> = net.params_mut().iter().flat_map(|p| p.value.to_vec()).collect();
        for p in net.params_mut() {
            p.grad.fill(1.0);
        }
        let mut adam = Adam::new(0.0);
        adam.step(&mut net);
        let after: Vec<f64> = net.params_mut().iter().flat_map(|p| p.value.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_each_parameter_by_about_lr() {
        // With bias correction, step one moves |delta| close to lr for any
        // nonzero gradient.
        let mut net = tiny_net();
        let before: Vec<f64> = net.params_mut().iter().flat_map(|p| p.value.to_vec()).collect();
        for p in net.params_mut() {
            p.grad.fill(0.5);
        }
        let mut adam = Adam::new(1e-2);
        adam.step(&mut net);
        let after: Vec<f64> = net.params_mut().iter().flat_map(|p| p.value.to_vec()).collect();
        for (b, a) in before.iter().zip(after.iter()) {
            let delta = (b - a).abs();
            assert!((delta - 1e-2).abs() < 1e-6, "delta {delta}");
        }
    }
}
