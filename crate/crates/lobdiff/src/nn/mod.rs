//! A U-shaped noise-prediction network, written directly over `ndarray`.
//!
//! The network takes the 5-channel conditioned image and a schedule step
//! and predicts the injected noise on the two data channels. The encoder
//! halves the spatial resolution after every block but the last; the
//! decoder mirrors it with nearest-neighbour upsampling and skip
//! concatenations. One encoder block and its mirror get single-head
//! self-attention. Timestep information enters every residual block as an
//! additive projection of a shared sinusoidal embedding.
//!
//! Everything is f64 and CPU-bound by design: small enough to train on a
//! single core, precise enough for finite-difference verification.

pub mod adam;
pub mod checkpoint;
pub mod layers;
pub mod train;

use ndarray::{s, Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::NoisePredictor;
use layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, time_embedding, upsample2, upsample2_backward, Attention,
    AttentionCache, Conv1x1, Conv1x1Cache, Conv3x3, Conv3x3Cache, Dense, DenseCache, GroupNorm, GroupNormCache,
    ParamMut,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("input shape {got:?} does not match config expectation {want:?}")]
    BadInput { got: Vec<usize>, want: Vec<usize> },
}

/// Network hyperparameters.
///
/// `block_channels[i]` is the output width of encoder block `i`; the
/// decoder mirrors the list. Pooling follows every encoder block except
/// the last, so the deepest feature map has spatial side
/// `resolution / 2^(len - 1)`. `attention_block` is 1-based and marks
/// which encoder block (and its mirror) gets self-attention.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub block_channels: Vec<usize>,
    pub attention_block: usize,
    pub norm_groups: usize,
    pub time_embed_dim: usize,
}

impl UNetConfig {
    /// Full-scale preset: 256x256 input, six blocks, attention in the
    /// fifth (16x16) stage.
    pub fn full() -> Self {
        Self {
            resolution: 256,
            in_channels: 5,
            out_channels: 2,
            block_channels: vec![128, 128, 256, 256, 512, 512],
            attention_block: 5,
            norm_groups: 32,
            time_embed_dim: 128,
        }
    }

    /// Desk-scale preset: 64x64 input, four narrow blocks, attention in
    /// the third (16x16) stage. Under a million parameters, trainable on
    /// one CPU core.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            in_channels: 5,
            out_channels: 2,
            block_channels: vec![16, 16, 32, 32],
            attention_block: 3,
            norm_groups: 4,
            time_embed_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let l = self.block_channels.len();
        if l == 0 {
            return Err(ModelError::BadConfig("block_channels must be non-empty".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::BadConfig("channel counts must be positive".into()));
        }
        if self.resolution == 0 || self.resolution % (1 << (l - 1)) != 0 {
            return Err(ModelError::BadConfig(format!(
                "resolution {} not divisible by 2^{}",
                self.resolution,
                l - 1
            )));
        }
        if self.resolution >> (l - 1) < 2 {
            return Err(ModelError::BadConfig("deepest feature map would be smaller than 2x2".into()));
        }
        if !(1..=l).contains(&self.attention_block) {
            return Err(ModelError::BadConfig(format!("attention_block {} outside 1..={l}", self.attention_block)));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(ModelError::BadConfig("time_embed_dim must be even and at least 2".into()));
        }
        for (i, &c) in self.block_channels.iter().enumerate() {
            if c == 0 || c % self.norm_groups != 0 {
                return Err(ModelError::BadConfig(format!(
                    "block {i} channels {c} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        // Decoder blocks normalize a concatenation of two block widths.
        for i in 0..l.saturating_sub(1) {
            let cat = self.block_channels[i] + self.block_channels[i + 1];
            if cat % self.norm_groups != 0 {
                return Err(ModelError::BadConfig(format!(
                    "concat width {cat} at stage {i} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Spatial side of each encoder stage, ending at the deepest map.
    pub fn stage_resolutions(&self) -> Vec<usize> {
        (0..self.block_channels.len()).map(|i| self.resolution >> i).collect()
    }
}

/// Residual block: norm, additive time projection, ReLU, conv, norm,
/// ReLU, conv, plus a (possibly projected) skip path.
struct ResBlock {
    c_in: usize,
    norm1: GroupNorm,
    t_proj: Dense,
    conv1: Conv3x3,
    norm2: GroupNorm,
    conv2: Conv3x3,
    skip: Option<Conv1x1>,
}

struct ResBlockCache {
    norm1: GroupNormCache,
    t_proj: DenseCache,
    act1: Array4<f64>,
    conv1: Conv3x3Cache,
    norm2: GroupNormCache,
    act2: Array4<f64>,
    conv2: Conv3x3Cache,
    skip: Option<Conv1x1Cache>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, groups: usize, time_dim: usize, rng: &mut R) -> Self {
        Self {
            c_in,
            norm1: GroupNorm::new(c_in, groups),
            t_proj: Dense::new(time_dim, c_in, rng),
            conv1: Conv3x3::new(c_in, c_out, rng),
            norm2: GroupNorm::new(c_out, groups),
            conv2: Conv3x3::new(c_out, c_out, rng),
            skip: (c_in != c_out).then(|| Conv1x1::new(c_in, c_out, rng)),
        }
    }

    fn forward(&self, x: &Array4<f64>, temb: &Array2<f64>) -> (Array4<f64>, ResBlockCache) {
        let (normed, norm1_cache) = self.norm1.forward(x);
        let (tp, t_cache) = self.t_proj.forward(temb);
        let mut h = normed;
        for b in 0..h.dim().0 {
            for c in 0..self.c_in {
                let add = tp[(b, c)];
                h.slice_mut(s![b, c, .., ..]).mapv_inplace(|v| v + add);
            }
        }
        let act1 = relu(&h);
        let (c1, conv1_cache) = self.conv1.forward(&act1);
        let (n2, norm2_cache) = self.norm2.forward(&c1);
        let act2 = relu(&n2);
        let (c2, conv2_cache) = self.conv2.forward(&act2);
        let (mut y, skip_cache) = match &self.skip {
            Some(sk) => {
                let (sx, sc) = sk.forward(x);
                (sx, Some(sc))
            }
            None => (x.clone(), None),
        };
        y += &c2;
        let cache = ResBlockCache {
            norm1: norm1_cache,
            t_proj: t_cache,
            act1,
            conv1: conv1_cache,
            norm2: norm2_cache,
            act2,
            conv2: conv2_cache,
            skip: skip_cache,
        };
        (y, cache)
    }

    /// Returns `(dx, dtemb)`.
    fn backward(&mut self, cache: &ResBlockCache, dy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let dc2 = self.conv2.backward(&cache.conv2, dy);
        let dn2 = relu_backward(&cache.act2, &dc2);
        let dc1 = self.norm2.backward(&cache.norm2, &dn2);
        let dact1 = self.conv1.backward(&cache.conv1, &dc1);
        let dh = relu_backward(&cache.act1, &dact1);
        // The time projection was added per (batch, channel): its gradient
        // is the spatial sum of dh.
        let (bsz, _, _, _) = dh.dim();
        let mut dtp = Array2::zeros((bsz, self.c_in));
        for b in 0..bsz {
            for c in 0..self.c_in {
                dtp[(b, c)] = dh.slice(s![b, c, .., ..]).sum();
            }
        }
        let dtemb = self.t_proj.backward(&cache.t_proj, &dtp);
        let mut dx = self.norm1.backward(&cache.norm1, &dh);
        match (&mut self.skip, &cache.skip) {
            (Some(sk), Some(sc)) => dx += &sk.backward(sc, dy),
            _ => dx += dy,
        }
        (dx, dtemb)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.norm1.collect_params(&format!("{prefix}.norm1"), out);
        self.t_proj.collect_params(&format!("{prefix}.t_proj"), out);
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.norm2.collect_params(&format!("{prefix}.norm2"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
        if let Some(sk) = &mut self.skip {
            sk.collect_params(&format!("{prefix}.skip"), out);
        }
    }
}

struct Stage {
    res: ResBlock,
    attn: Option<Attention>,
}

struct StageCache {
    res: ResBlockCache,
    attn: Option<AttentionCache>,
}

impl Stage {
    fn forward(&self, x: &Array4<f64>, temb: &Array2<f64>) -> (Array4<f64>, StageCache) {
        let (h, res_cache) = self.res.forward(x, temb);
        match &self.attn {
            Some(attn) => {
                let (y, ac) = attn.forward(&h);
                (y, StageCache { res: res_cache, attn: Some(ac) })
            }
            None => (h, StageCache { res: res_cache, attn: None }),
        }
    }

    fn backward(&mut self, cache: &StageCache, dy: &Array4<f64>) -> (Array4<f64>, Array2<f64>) {
        let dh = match (&mut self.attn, &cache.attn) {
            (Some(attn), Some(ac)) => attn.backward(ac, dy),
            _ => dy.clone(),
        };
        self.res.backward(&cache.res, &dh)
    }

    fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.res.collect_params(&format!("{prefix}.res"), out);
        if let Some(attn) = &mut self.attn {
            attn.collect_params(&format!("{prefix}.attn"), out);
        }
    }
}

/// The noise-prediction network. See the module docs for the topology.
pub struct UNet {
    pub cfg: UNetConfig,
    t_mlp1: Dense,
    t_mlp2: Dense,
    conv_in: Conv3x3,
    down: Vec<Stage>,
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv3x3,
}

pub struct UNetCache {
    t_mlp1: DenseCache,
    t_act: Array2<f64>,
    t_mlp2: DenseCache,
    conv_in: Conv3x3Cache,
    down: Vec<StageCache>,
    up: Vec<StageCache>,
    norm_out: GroupNormCache,
    out_act: Array4<f64>,
    conv_out: Conv3x3Cache,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self, ModelError> {
        cfg.validate()?;
        let l = cfg.block_channels.len();
        let g = cfg.norm_groups;
        let td = cfg.time_embed_dim;
        let t_mlp1 = Dense::new(td, td, rng);
        let t_mlp2 = Dense::new(td, td, rng);
        let conv_in = Conv3x3::new(cfg.in_channels, cfg.block_channels[0], rng);
        let mut down = Vec::with_capacity(l);
        for i in 0..l {
            let c_in = if i == 0 { cfg.block_channels[0] } else { cfg.block_channels[i - 1] };
            let c_out = cfg.block_channels[i];
            let attn = (i + 1 == cfg.attention_block).then(|| Attention::new(c_out, g, rng));
            down.push(Stage { res: ResBlock::new(c_in, c_out, g, td, rng), attn });
        }
        // Built deepest-first so construction order matches forward order.
        let mut up = Vec::with_capacity(l);
        for i in (0..l).rev() {
            let (c_in, c_out) = if i == l - 1 {
                (cfg.block_channels[i], cfg.block_channels[i])
            } else {
                (cfg.block_channels[i + 1] + cfg.block_channels[i], cfg.block_channels[i])
            };
            let attn = (i + 1 == cfg.attention_block).then(|| Attention::new(c_out, g, rng));
            up.push(Stage { res: ResBlock::new(c_in, c_out, g, td, rng), attn });
        }
        let norm_out = GroupNorm::new(cfg.block_channels[0], g);
        let conv_out = Conv3x3::new(cfg.block_channels[0], cfg.out_channels, rng);
        Ok(Self { cfg, t_mlp1, t_mlp2, conv_in, down, up, norm_out, conv_out })
    }

    pub fn forward(&self, x: &Array4<f64>, t: &[usize]) -> Result<(Array4<f64>, UNetCache), ModelError> {
        let (bsz, c, h, w) = x.dim();
        let want = vec![t.len(), self.cfg.in_channels, self.cfg.resolution, self.cfg.resolution];
        if bsz != t.len() || c != self.cfg.in_channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(ModelError::BadInput { got: vec![bsz, c, h, w], want });
        }
        let l = self.cfg.block_channels.len();
        let temb0 = time_embedding(t, self.cfg.time_embed_dim);
        let (t1, t_mlp1_cache) = self.t_mlp1.forward(&temb0);
        let t_act = t1.mapv(|v| v.max(0.0));
        let (temb, t_mlp2_cache) = self.t_mlp2.forward(&t_act);

        let (mut hcur, conv_in_cache) = self.conv_in.forward(x);
        let mut down_caches = Vec::with_capacity(l);
        let mut skips: Vec<Array4<f64>> = Vec::with_capacity(l);
        for (i, stage) in self.down.iter().enumerate() {
            let (out, sc) = stage.forward(&hcur, &temb);
            down_caches.push(sc);
            skips.push(out.clone());
            hcur = if i < l - 1 { avg_pool2(&out) } else { out };
        }
        let mut up_caches = Vec::with_capacity(l);
        for (j, stage) in self.up.iter().enumerate() {
            let i = l - 1 - j;
            let input = if i == l - 1 {
                hcur
            } else {
                let upsampled = upsample2(&hcur);
                concat_channels(&upsampled, &skips[i])
            };
            let (out, sc) = stage.forward(&input, &temb);
            up_caches.push(sc);
            hcur = out;
        }
        let (n_out, norm_out_cache) = self.norm_out.forward(&hcur);
        let out_act = relu(&n_out);
        let (y, conv_out_cache) = self.conv_out.forward(&out_act);
        let cache = UNetCache {
            t_mlp1: t_mlp1_cache,
            t_act,
            t_mlp2: t_mlp2_cache,
            conv_in: conv_in_cache,
            down: down_caches,
            up: up_caches,
            norm_out: norm_out_cache,
            out_act,
            conv_out: conv_out_cache,
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &UNetCache, dy: &Array4<f64>) -> Array4<f64> {
        let l = self.cfg.block_channels.len();
        let bsz = dy.dim().0;
        let mut dtemb = Array2::zeros((bsz, self.cfg.time_embed_dim));
        let dout_act = self.conv_out.backward(&cache.conv_out, dy);
        let dn_out = relu_backward(&cache.out_act, &dout_act);
        let mut dh = self.norm_out.backward(&cache.norm_out, &dn_out);
        // Decoder, reverse of forward order; skip gradients accumulate here.
        let mut dskips: Vec<Option<Array4<f64>>> = (0..l).map(|_| None).collect();
        for (j, stage) in self.up.iter_mut().enumerate().rev() {
            let i = l - 1 - j;
            let (dinput, dt) = stage.backward(&cache.up[j], &dh);
            dtemb += &dt;
            if i == l - 1 {
                dh = dinput;
            } else {
                let c_up = self.cfg.block_channels[i + 1];
                let dup = dinput.slice(s![.., 0..c_up, .., ..]).to_owned();
                let dskip = dinput.slice(s![.., c_up.., .., ..]).to_owned();
                dskips[i] = Some(dskip);
                dh = upsample2_backward(&dup);
            }
        }
        // dh now flows into the output of the deepest encoder stage.
        for (i, stage) in self.down.iter_mut().enumerate().rev() {
            let mut dout = if i < l - 1 { avg_pool2_backward(&dh) } else { dh };
            if let Some(ds) = dskips[i].take() {
                dout += &ds;
            }
            let (dinput, dt) = stage.backward(&cache.down[i], &dout);
            dtemb += &dt;
            dh = dinput;
        }
        let dx = self.conv_in.backward(&cache.conv_in, &dh);
        let dt_act = self.t_mlp2.backward(&cache.t_mlp2, &dtemb);
        let mut dt1 = dt_act;
        dt1.zip_mut_with(&cache.t_act, |d, &v| {
            if v <= 0.0 {
                *d = 0.0;
            }
        });
        self.t_mlp1.backward(&cache.t_mlp1, &dt1);
        dx
    }

    /// All parameters with their gradients, in a stable order.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.t_mlp1.collect_params("t_mlp1", &mut out);
        self.t_mlp2.collect_params("t_mlp2", &mut out);
        self.conv_in.collect_params("conv_in", &mut out);
        for (i, stage) in self.down.iter_mut().enumerate() {
            stage.collect_params(&format!("down{i}"), &mut out);
        }
        for (j, stage) in self.up.iter_mut().enumerate() {
            stage.collect_params(&format!("up{j}"), &mut out);
        }
        self.norm_out.collect_params("norm_out", &mut out);
        self.conv_out.collect_params("conv_out", &mut out);
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }
}

impl NoisePredictor for UNet {
    fn predict(&self, x: &Array4<f64>, t: &[usize]) -> Array4<f64> {
        let (y, _) = self.forward(x, t).expect("input shape mismatch in predict");
        y
    }
}

fn concat_channels(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    let (bsz, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut out = Array4::zeros((bsz, ca + cb, h, w));
    out.slice_mut(s![.., 0..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Parameter count implied by a config, computed from layer shapes alone.
pub fn param_count_for(cfg: &UNetConfig) -> usize {
    let l = cfg.block_channels.len();
    let td = cfg.time_embed_dim;
    let dense = |i: usize, o: usize| i * o + o;
    let conv3 = |i: usize, o: usize| i * o * 9 + o;
    let conv1 = |i: usize, o: usize| i * o + o;
    let norm = |c: usize| 2 * c;
    let resblock = |ci: usize, co: usize| {
        norm(ci) + dense(td, ci) + conv3(ci, co) + norm(co) + conv3(co, co) + if ci != co { conv1(ci, co) } else { 0 }
    };
    let attn = |c: usize| norm(c) + 4 * conv1(c, c);
    let mut total = 2 * dense(td, td) + conv3(cfg.in_channels, cfg.block_channels[0]);
    for i in 0..l {
        let ci = if i == 0 { cfg.block_channels[0] } else { cfg.block_channels[i - 1] };
        total += resblock(ci, cfg.block_channels[i]);
        if i + 1 == cfg.attention_block {
            total += attn(cfg.block_channels[i]);
        }
    }
    for i in 0..l {
        let (ci, co) = if i == l - 1 {
            (cfg.block_channels[i], cfg.block_channels[i])
        } else {
            (cfg.block_channels[i + 1] + cfg.block_channels[i], cfg.block_channels[i])
        };
        total += resblock(ci, co);
        if i + 1 == cfg.attention_block {
            total += attn(co);
        }
    }
    total += norm(cfg.block_channels[0]) + conv3(cfg.block_channels[0], cfg.out_channels);
    total
}
