//! Training loop: noise, predict, measure, descend.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use super::adam::Adam;
use super::{ModelError, UNet, UNetConfig};
use crate::diffusion::{make_training_batch, mse_loss_and_grad, DiffusionError, DiffusionSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("no training windows")]
    NoData,
    #[error("non-finite loss {loss} at optimizer step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
}

/// Knobs for one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Restrict the loss to future columns; by default every pixel counts.
    pub future_only: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 4, future_only: false }
    }
}

/// Network, optimizer, and RNG bundled so a run can checkpoint and resume
/// without losing determinism.
pub struct Trainer {
    pub net: UNet,
    pub adam: Adam,
    pub rng: ChaCha12Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: UNetConfig, lr: f64, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let net = UNet::new(cfg, &mut rng)?;
        Ok(Self { net, adam: Adam::new(lr), rng, step: 0 })
    }

    /// One optimizer step on the given windows (a full batch). Returns the
    /// loss before the update.
    pub fn train_step(
        &mut self,
        sched: &DiffusionSchedule,
        batch: &[(Array3<f64>, usize)],
        future_only: bool,
    ) -> Result<f64, TrainError> {
        let lb = make_training_batch(batch, sched, &mut self.rng, future_only)?;
        let (pred, cache) = self.net.forward(&lb.input, &lb.t)?;
        let (loss, dpred) = mse_loss_and_grad(&pred, &lb.eps, lb.mask.as_ref());
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: self.step, loss });
        }
        self.net.zero_grads();
        self.net.backward(&cache, &dpred);
        self.adam.step(&mut self.net);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `opts.epochs` shuffled passes over `data`, invoking `on_step`
    /// with `(step, loss)` after every optimizer step. Returns the full
    /// loss trace.
    pub fn train(
        &mut self,
        sched: &DiffusionSchedule,
        data: &[(Array3<f64>, usize)],
        opts: &TrainOptions,
        mut on_step: impl FnMut(u64, f64),
    ) -> Result<Vec<f64>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::NoData);
        }
        let bs = opts.batch_size.max(1);
        let mut losses = Vec::new();
        for _ in 0..opts.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(bs) {
                let batch: Vec<(Array3<f64>, usize)> =
                    chunk.iter().map(|&i| (data[i].0.clone(), data[i].1)).collect();
                let loss = self.train_step(sched, &batch, opts.future_only)?;
                on_step(self.step, loss);
                losses.push(loss);
            }
        }
        Ok(losses)
    }
}
