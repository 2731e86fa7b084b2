//! Denoising diffusion: schedules, forward noising, reverse sampling.
//!
//! The forward process corrupts an image `x0` over `T` discrete steps,
//! `x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps`, which telescopes to
//! the closed form `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps` with
//! `abar_t` the running product of the `alpha_t`. A model trained to
//! predict `eps` then drives the reverse process, one ancestral step at a
//! time, optionally skipping through a strided sub-schedule to trade
//! fidelity for wall-clock time.
//!
//! Sampling here is inpainting-shaped: the model conditions on the
//! history part of the image via extra input channels and the whole grid
//! is denoised, after which the history columns are restored verbatim.

use ndarray::{s, Array3, Array4, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{build_inpaint_input, CodecError};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("invalid sub-schedule: {0}")]
    BadSubSchedule(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value produced at reverse step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Per-step noise schedule with precomputed cumulative products.
///
/// Accessors are 1-based in `t`, matching the usual indexing where `x_0`
/// is data and `x_T` is noise; `alpha_bar(0)` is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_T_DIFF: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl DiffusionSchedule {
    /// Linearly interpolated betas from `beta_start` at `t = 1` to
    /// `beta_end` at `t = t_diff`.
    pub fn linear(t_diff: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if t_diff == 0 {
            return Err(DiffusionError::BadSchedule("t_diff must be at least 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..t_diff)
            .map(|i| {
                if t_diff == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (t_diff - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_diff);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// The standard 1000-step linear schedule.
    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T_DIFF, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.len()).contains(&t), "t={t} outside 1..={}", self.len());
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.len()).contains(&t), "t={t} outside 1..={}", self.len());
        self.alphas[t - 1]
    }

    /// Cumulative product `abar_t`, with `abar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.len(), "t={t} outside 0..={}", self.len());
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Variance of the reverse-process posterior at step `t`
    /// (`beta_t (1 - abar_{t-1}) / (1 - abar_t)`, zero at `t = 1`).
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }
}

/// Draws a `[C, H, W]` array of independent standard normals.
pub fn randn3<R: Rng + ?Sized>(rng: &mut R, dim: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Forward marginal: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample(x0: ArrayView3<f64>, t: usize, eps: ArrayView3<f64>, sched: &DiffusionSchedule) -> Array3<f64> {
    assert_eq!(x0.dim(), eps.dim(), "x0 and eps shapes differ");
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    let mut out = x0.to_owned();
    out.zip_mut_with(&eps, |x, &e| *x = a * *x + b * e);
    out
}

/// One generalized reverse step from noise level `abar_cur` down to
/// `abar_prev`. With consecutive levels this is the standard ancestral
/// update; with strided levels it is the reduced-step variant.
fn reverse_step(
    x: &Array3<f64>,
    eps_hat: &Array3<f64>,
    alpha_bar_prev: f64,
    alpha_bar_cur: f64,
    z: Option<&Array3<f64>>,
) -> Array3<f64> {
    let alpha_eff = alpha_bar_cur / alpha_bar_prev;
    let beta_eff = 1.0 - alpha_eff;
    let coef = beta_eff / (1.0 - alpha_bar_cur).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha_eff.sqrt();
    let mut out = x.clone();
    out.zip_mut_with(eps_hat, |v, &e| *v = (*v - coef * e) * inv_sqrt_alpha);
    if let Some(z) = z {
        let var = beta_eff * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_cur);
        if var > 0.0 {
            let sd = var.sqrt();
            out.zip_mut_with(z, |v, &n| *v += sd * n);
        }
    }
    out
}

/// Ancestral reverse step on the full schedule. `z` is the injected
/// standard normal; it is ignored at `t = 1`, where the posterior
/// variance vanishes.
pub fn p_sample_step(
    x_t: &Array3<f64>,
    t: usize,
    eps_hat: &Array3<f64>,
    sched: &DiffusionSchedule,
    z: Option<&Array3<f64>>,
) -> Array3<f64> {
    let z = if t > 1 { z } else { None };
    reverse_step(x_t, eps_hat, sched.alpha_bar(t - 1), sched.alpha_bar(t), z)
}

/// A strided subset of schedule steps used for reduced-step sampling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSchedule {
    /// Ascending 1-based steps; the last entry is always `T`.
    pub steps: Vec<usize>,
}

/// Picks `k` steps `s_i = floor(i T / k)` for `i = 1..=k`, which always
/// includes `T` itself and strides the rest evenly.
pub fn make_subschedule(t_diff: usize, k: usize) -> Result<SubSchedule, DiffusionError> {
    if k == 0 || k > t_diff {
        return Err(DiffusionError::BadSubSchedule(format!("k={k} outside 1..={t_diff}")));
    }
    let steps: Vec<usize> = (1..=k).map(|i| i * t_diff / k).collect();
    debug_assert!(steps.windows(2).all(|w| w[0] < w[1]));
    debug_assert_eq!(*steps.last().unwrap(), t_diff);
    Ok(SubSchedule { steps })
}

/// A model that predicts the injected noise from the 5-channel input.
///
/// `x` has shape `[B, 5, T, T]`, `t` holds the 1-based schedule step per
/// lane, and the output has shape `[B, 2, T, T]`.
pub trait NoisePredictor {
    fn predict(&self, x: &Array4<f64>, t: &[usize]) -> Array4<f64>;
}

/// One lane of a training batch.
#[derive(Debug, Clone)]
pub struct LossBatch {
    /// Model input, `[B, 5, T, T]`.
    pub input: Array4<f64>,
    /// 1-based schedule step per lane.
    pub t: Vec<usize>,
    /// Noise targets, `[B, 2, T, T]`.
    pub eps: Array4<f64>,
    /// Optional per-element loss mask (1 = counted), `[B, 2, T, T]`.
    pub mask: Option<Array4<f64>>,
}

/// Assembles a noising batch: per lane an independent uniform step
/// `t in 1..=T`, fresh standard normal noise over the whole image, the
/// noised channels stacked with the inpainting context.
///
/// With `future_only` the loss mask restricts to future columns;
/// by default every pixel counts, history included.
pub fn make_training_batch<R: Rng + ?Sized>(
    squares: &[(Array3<f64>, usize)],
    sched: &DiffusionSchedule,
    rng: &mut R,
    future_only: bool,
) -> Result<LossBatch, DiffusionError> {
    if squares.is_empty() {
        return Err(DiffusionError::Dimension("empty batch".into()));
    }
    let (ch, h, w) = squares[0].0.dim();
    if ch != 2 || h != w {
        return Err(DiffusionError::Dimension(format!("expected [2, T, T], found [{ch}, {h}, {w}]")));
    }
    let b = squares.len();
    let mut input = Array4::zeros((b, 5, h, w));
    let mut eps_all = Array4::zeros((b, 2, h, w));
    let mut t_all = Vec::with_capacity(b);
    let mut mask_all = future_only.then(|| Array4::zeros((b, 2, h, w)));
    for (i, (square, history_len)) in squares.iter().enumerate() {
        if square.dim() != (ch, h, w) {
            return Err(DiffusionError::Dimension("batch images must share a shape".into()));
        }
        let t = rng.random_range(1..=sched.len());
        let eps = randn3(rng, (2, h, w));
        let x_t = q_sample(square.view(), t, eps.view(), sched);
        let lane = build_inpaint_input(square, &x_t, *history_len)?;
        input.slice_mut(s![i, .., .., ..]).assign(&lane.data);
        eps_all.slice_mut(s![i, .., .., ..]).assign(&eps);
        t_all.push(t);
        if let Some(mask) = &mut mask_all {
            mask.slice_mut(s![i, .., .., *history_len..]).fill(1.0);
        }
    }
    Ok(LossBatch { input, t: t_all, eps: eps_all, mask: mask_all })
}

/// Mean squared error against the noise target, plus its gradient with
/// respect to the prediction. The mean runs over counted elements only.
pub fn mse_loss_and_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    mask: Option<&Array4<f64>>,
) -> (f64, Array4<f64>) {
    assert_eq!(pred.dim(), target.dim(), "prediction and target shapes differ");
    let count = match mask {
        Some(m) => {
            assert_eq!(m.dim(), pred.dim(), "mask shape differs");
            m.sum()
        }
        None => pred.len() as f64,
    };
    let count = count.max(1.0);
    let mut grad = pred - target;
    if let Some(m) = mask {
        grad *= m;
    }
    let loss = grad.iter().map(|d| d * d).sum::<f64>() / count;
    grad.mapv_inplace(|d| 2.0 * d / count);
    (loss, grad)
}

/// Runs the reverse process for one conditioned image.
///
/// `square` is the clean normalized `[2, T, T]` image whose first
/// `history_len` columns condition the model; its future columns are
/// ignored. The output has the history columns restored bit-for-bit from
/// `square` and the rest generated.
pub fn sample_inpaint(
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    square: &Array3<f64>,
    history_len: usize,
    steps: usize,
    seed: u64,
) -> Result<Array3<f64>, DiffusionError> {
    let mut out = sample_inpaint_batch(predictor, sched, square, history_len, steps, &[seed])?;
    Ok(out.pop().unwrap())
}

/// Batched [`sample_inpaint`]: one lane per seed, all conditioned on the
/// same history. Lane `i` is bit-identical to a solo run with `seeds[i]`.
pub fn sample_inpaint_batch(
    predictor: &dyn NoisePredictor,
    sched: &DiffusionSchedule,
    square: &Array3<f64>,
    history_len: usize,
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Array3<f64>>, DiffusionError> {
    let (ch, h, w) = square.dim();
    if ch != 2 || h != w {
        return Err(DiffusionError::Dimension(format!("expected [2, T, T], found [{ch}, {h}, {w}]")));
    }
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let sub = make_subschedule(sched.len(), steps)?;
    // Context channels are fixed across the whole reverse loop.
    let context = build_inpaint_input(square, &Array3::zeros((2, h, w)), history_len)?;
    let context = context.data.slice(s![2..5, .., ..]).to_owned();
    let b = seeds.len();
    let mut rngs: Vec<ChaCha12Rng> = seeds.iter().map(|&s| ChaCha12Rng::seed_from_u64(s)).collect();
    let mut lanes: Vec<Array3<f64>> = rngs.iter_mut().map(|r| randn3(r, (2, h, w))).collect();
    for i in (1..=sub.steps.len()).rev() {
        let t_cur = sub.steps[i - 1];
        let ab_prev = if i > 1 { sched.alpha_bar(sub.steps[i - 2]) } else { 1.0 };
        let ab_cur = sched.alpha_bar(t_cur);
        let mut input = Array4::zeros((b, 5, h, w));
        for (l, lane) in lanes.iter().enumerate() {
            input.slice_mut(s![l, 0..2, .., ..]).assign(lane);
            input.slice_mut(s![l, 2..5, .., ..]).assign(&context);
        }
        let eps_hat = predictor.predict(&input, &vec![t_cur; b]);
        if eps_hat.dim() != (b, 2, h, w) {
            return Err(DiffusionError::Dimension(format!(
                "predictor returned {:?}, expected [{b}, 2, {h}, {w}]",
                eps_hat.dim()
            )));
        }
        for (l, lane) in lanes.iter_mut().enumerate() {
            let eh = eps_hat.slice(s![l, .., .., ..]).to_owned();
            let z = (i > 1).then(|| randn3(&mut rngs[l], (2, h, w)));
            *lane = reverse_step(lane, &eh, ab_prev, ab_cur, z.as_ref());
            if lane.iter().any(|v| !v.is_finite()) {
                return Err(DiffusionError::NonFinite { step: t_cur });
            }
        }
    }
    for lane in &mut lanes {
        lane.slice_mut(s![.., .., 0..history_len]).assign(&square.slice(s![.., .., 0..history_len]));
    }
    Ok(lanes)
}
