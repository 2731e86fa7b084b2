//! Differentiable layer primitives over `ndarray`, all in f64.
//!
//! Every layer owns its parameters and gradient buffers and exposes an
//! explicit `forward` returning a cache plus a `backward` that consumes
//! it, accumulates parameter gradients, and returns the input gradient.
//! Convolutions run as im2col plus GEMM; pooling is 2x2 averaging so the
//! whole network stays friendly to finite-difference checks.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4};
use rand::Rng;
use rand_distr::Normal;

/// Mutable view of one parameter tensor and its gradient, for optimizers
/// and checkpointing. The flat order of `collect_params` is stable.
pub struct ParamMut<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
    pub shape: Vec<usize>,
}

fn he_normal<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<f64> {
    let sd = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| rng.sample(dist)).collect()
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are stored flat as
/// `[c_out, c_in * 9]` to match the im2col layout.
pub struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

pub struct Conv3x3Cache {
    x: Array4<f64>,
}

/// `col[ci*9 + ky*3 + kx, y*w + x] = x[ci, y+ky-1, x+kx-1]`, zero outside.
fn im2col(x: ndarray::ArrayView3<f64>, col: &mut Array2<f64>) {
    let (c, h, w) = x.dim();
    debug_assert_eq!(col.dim(), (c * 9, h * w));
    col.fill(0.0);
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = ci * 9 + ky * 3 + kx;
                let mut col_row = col.row_mut(row);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        col_row[y * w + xx] = x[(ci, sy as usize, sx as usize)];
                    }
                }
            }
        }
    }
}

/// Transpose of [`im2col`]: scatter-adds column gradients back to image
/// coordinates.
fn col2im(col: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..3usize {
            for kx in 0..3usize {
                let row = col.row(ci * 9 + ky * 3 + kx);
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        x[(ci, sy as usize, sx as usize)] += row[y * w + xx];
                    }
                }
            }
        }
    }
    x
}

impl Conv3x3 {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let fan_in = c_in * 9;
        let w = Array2::from_shape_vec((c_out, fan_in), he_normal(rng, fan_in, c_out * fan_in)).unwrap();
        Self {
            c_in,
            c_out,
            w,
            b: Array1::zeros(c_out),
            gw: Array2::zeros((c_out, fan_in)),
            gb: Array1::zeros(c_out),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv3x3Cache) {
        let (bsz, c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let mut y = Array4::zeros((bsz, self.c_out, h, w));
        let mut col = Array2::zeros((c * 9, h * w));
        let mut out = Array2::zeros((self.c_out, h * w));
        for b in 0..bsz {
            im2col(x.slice(s![b, .., .., ..]), &mut col);
            general_mat_mul(1.0, &self.w, &col, 0.0, &mut out);
            let mut yb = y.slice_mut(s![b, .., .., ..]);
            for co in 0..self.c_out {
                let bias = self.b[co];
                let row = out.row(co);
                let mut plane = yb.slice_mut(s![co, .., ..]);
                for (dst, &src) in plane.iter_mut().zip(row.iter()) {
                    *dst = src + bias;
                }
            }
        }
        (y, Conv3x3Cache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv3x3Cache, dy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = cache.x.dim();
        debug_assert_eq!(dy.dim(), (bsz, self.c_out, h, w));
        let mut dx = Array4::zeros((bsz, c, h, w));
        let mut col = Array2::zeros((c * 9, h * w));
        let mut dcol = Array2::zeros((c * 9, h * w));
        for b in 0..bsz {
            im2col(cache.x.slice(s![b, .., .., ..]), &mut col);
            let dyb = dy.slice(s![b, .., .., ..]);
            let dyb2 = dyb.to_shape((self.c_out, h * w)).unwrap();
            general_mat_mul(1.0, &dyb2.view(), &col.t(), 1.0, &mut self.gw);
            for co in 0..self.c_out {
                self.gb[co] += dyb2.row(co).sum();
            }
            general_mat_mul(1.0, &self.w.t(), &dyb2.view(), 0.0, &mut dcol);
            dx.slice_mut(s![b, .., .., ..]).assign(&col2im(&dcol, c, h, w));
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamMut {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }
}

/// 1x1 convolution: a per-pixel linear map, used for residual skips and
/// attention projections.
pub struct Conv1x1 {
    pub c_in: usize,
    pub c_out: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

pub struct Conv1x1Cache {
    x: Array4<f64>,
}

impl Conv1x1 {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_vec((c_out, c_in), he_normal(rng, c_in, c_out * c_in)).unwrap();
        Self { c_in, c_out, w, b: Array1::zeros(c_out), gw: Array2::zeros((c_out, c_in)), gb: Array1::zeros(c_out) }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, Conv1x1Cache) {
        let (bsz, c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let mut y = Array4::zeros((bsz, self.c_out, h, w));
        for b in 0..bsz {
            let xb = x.slice(s![b, .., .., ..]);
            let xb2 = xb.to_shape((c, h * w)).unwrap();
            let mut out = Array2::zeros((self.c_out, h * w));
            general_mat_mul(1.0, &self.w, &xb2.view(), 0.0, &mut out);
            let mut yb = y.slice_mut(s![b, .., .., ..]);
            for co in 0..self.c_out {
                let bias = self.b[co];
                let row = out.row(co);
                let mut plane = yb.slice_mut(s![co, .., ..]);
                for (dst, &src) in plane.iter_mut().zip(row.iter()) {
                    *dst = src + bias;
                }
            }
        }
        (y, Conv1x1Cache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &Conv1x1Cache, dy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = cache.x.dim();
        let mut dx = Array4::zeros((bsz, c, h, w));
        for b in 0..bsz {
            let xb = cache.x.slice(s![b, .., .., ..]);
            let xb2 = xb.to_shape((c, h * w)).unwrap();
            let dyb = dy.slice(s![b, .., .., ..]);
            let dyb2 = dyb.to_shape((self.c_out, h * w)).unwrap();
            general_mat_mul(1.0, &dyb2.view(), &xb2.t(), 1.0, &mut self.gw);
            for co in 0..self.c_out {
                self.gb[co] += dyb2.row(co).sum();
            }
            let mut dxb = Array2::zeros((c, h * w));
            general_mat_mul(1.0, &self.w.t(), &dyb2.view(), 0.0, &mut dxb);
            dx.slice_mut(s![b, .., .., ..]).assign(&dxb.to_shape((c, h, w)).unwrap());
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamMut {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }
}

/// Group normalization with per-channel affine parameters.
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
}

pub struct GroupNormCache {
    xhat: Array4<f64>,
    invstd: Array2<f64>,
}

impl GroupNorm {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(groups >= 1 && channels % groups == 0, "groups {groups} must divide channels {channels}");
        Self {
            channels,
            groups,
            eps: 1e-5,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, GroupNormCache) {
        let (bsz, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        let mut xhat = Array4::zeros((bsz, c, h, w));
        let mut invstd = Array2::zeros((bsz, self.groups));
        for b in 0..bsz {
            for g in 0..self.groups {
                let slice = s![b, g * cg..(g + 1) * cg, .., ..];
                let xs = x.slice(slice);
                let mean = xs.sum() / m;
                let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let istd = 1.0 / (var + self.eps).sqrt();
                invstd[(b, g)] = istd;
                let mut hs = xhat.slice_mut(slice);
                hs.assign(&xs);
                hs.mapv_inplace(|v| (v - mean) * istd);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let gamma = self.gamma[ci];
            let beta = self.beta[ci];
            y.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * gamma + beta);
        }
        (y, GroupNormCache { xhat, invstd })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, dy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = dy.dim();
        let cg = c / self.groups;
        let m = (cg * h * w) as f64;
        for ci in 0..c {
            let dys = dy.slice(s![.., ci, .., ..]);
            let xs = cache.xhat.slice(s![.., ci, .., ..]);
            self.gbeta[ci] += dys.sum();
            self.ggamma[ci] += dys.iter().zip(xs.iter()).map(|(&d, &x)| d * x).sum::<f64>();
        }
        let mut dx = Array4::zeros((bsz, c, h, w));
        for b in 0..bsz {
            for g in 0..self.groups {
                let slice = s![b, g * cg..(g + 1) * cg, .., ..];
                let xh = cache.xhat.slice(slice);
                let dys = dy.slice(slice);
                // dxhat = dy * gamma, channel by channel within the group.
                let mut dxh = dys.to_owned();
                for (ci_local, mut plane) in dxh.outer_iter_mut().enumerate() {
                    let gamma = self.gamma[g * cg + ci_local];
                    plane.mapv_inplace(|v| v * gamma);
                }
                let mean_dxh = dxh.sum() / m;
                let mean_dxh_xh = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<f64>() / m;
                let istd = cache.invstd[(b, g)];
                let mut dxs = dx.slice_mut(slice);
                for ((dst, &dh), &x) in dxs.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
                    *dst = istd * (dh - mean_dxh - x * mean_dxh_xh);
                }
            }
        }
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: format!("{prefix}.gamma"),
            shape: self.gamma.shape().to_vec(),
            value: self.gamma.as_slice_mut().unwrap(),
            grad: self.ggamma.as_slice_mut().unwrap(),
        });
        out.push(ParamMut {
            name: format!("{prefix}.beta"),
            shape: self.beta.shape().to_vec(),
            value: self.beta.as_slice_mut().unwrap(),
            grad: self.gbeta.as_slice_mut().unwrap(),
        });
    }
}

/// Elementwise ReLU. The cache is the output; positive entries mark where
/// gradients flow.
pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// 2x2 average pooling, stride 2. Spatial dims must be even.
pub fn avg_pool2(x: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even dims, got {h}x{w}");
    let mut y = Array4::zeros((bsz, c, h / 2, w / 2));
    for b in 0..bsz {
        for ci in 0..c {
            for yy in 0..h / 2 {
                for xx in 0..w / 2 {
                    let sum = x[(b, ci, 2 * yy, 2 * xx)]
                        + x[(b, ci, 2 * yy, 2 * xx + 1)]
                        + x[(b, ci, 2 * yy + 1, 2 * xx)]
                        + x[(b, ci, 2 * yy + 1, 2 * xx + 1)];
                    y[(b, ci, yy, xx)] = sum * 0.25;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((bsz, c, h2 * 2, w2 * 2));
    for b in 0..bsz {
        for ci in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    let g = dy[(b, ci, yy, xx)] * 0.25;
                    dx[(b, ci, 2 * yy, 2 * xx)] = g;
                    dx[(b, ci, 2 * yy, 2 * xx + 1)] = g;
                    dx[(b, ci, 2 * yy + 1, 2 * xx)] = g;
                    dx[(b, ci, 2 * yy + 1, 2 * xx + 1)] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h, w) = x.dim();
    let mut y = Array4::zeros((bsz, c, h * 2, w * 2));
    for b in 0..bsz {
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[(b, ci, yy, xx)];
                    y[(b, ci, 2 * yy, 2 * xx)] = v;
                    y[(b, ci, 2 * yy, 2 * xx + 1)] = v;
                    y[(b, ci, 2 * yy + 1, 2 * xx)] = v;
                    y[(b, ci, 2 * yy + 1, 2 * xx + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (bsz, c, h2, w2) = dy.dim();
    let mut dx = Array4::zeros((bsz, c, h2 / 2, w2 / 2));
    for b in 0..bsz {
        for ci in 0..c {
            for yy in 0..h2 / 2 {
                for xx in 0..w2 / 2 {
                    dx[(b, ci, yy, xx)] = dy[(b, ci, 2 * yy, 2 * xx)]
                        + dy[(b, ci, 2 * yy, 2 * xx + 1)]
                        + dy[(b, ci, 2 * yy + 1, 2 * xx)]
                        + dy[(b, ci, 2 * yy + 1, 2 * xx + 1)];
                }
            }
        }
    }
    dx
}

/// Fully connected layer on `[B, in]` matrices.
pub struct Dense {
    pub d_in: usize,
    pub d_out: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

pub struct DenseCache {
    x: Array2<f64>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = Array2::from_shape_vec((d_out, d_in), he_normal(rng, d_in, d_out * d_in)).unwrap();
        Self { d_in, d_out, w, b: Array1::zeros(d_out), gw: Array2::zeros((d_out, d_in)), gb: Array1::zeros(d_out) }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, DenseCache) {
        let bsz = x.nrows();
        let mut y = Array2::zeros((bsz, self.d_out));
        general_mat_mul(1.0, x, &self.w.t(), 0.0, &mut y);
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        (y, DenseCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &DenseCache, dy: &Array2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), &cache.x.view(), 1.0, &mut self.gw);
        for row in dy.rows() {
            self.gb += &row;
        }
        let mut dx = Array2::zeros(cache.x.dim());
        general_mat_mul(1.0, dy, &self.w.view(), 0.0, &mut dx);
        dx
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        out.push(ParamMut {
            name: format!("{prefix}.w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().unwrap(),
            grad: self.gw.as_slice_mut().unwrap(),
        });
        out.push(ParamMut {
            name: format!("{prefix}.b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().unwrap(),
            grad: self.gb.as_slice_mut().unwrap(),
        });
    }
}

/// Single-head residual self-attention over spatial positions.
pub struct Attention {
    pub channels: usize,
    pub norm: GroupNorm,
    pub q: Conv1x1,
    pub k: Conv1x1,
    pub v: Conv1x1,
    pub o: Conv1x1,
}

pub struct AttentionCache {
    norm: GroupNormCache,
    q_cache: Conv1x1Cache,
    k_cache: Conv1x1Cache,
    v_cache: Conv1x1Cache,
    o_cache: Conv1x1Cache,
    q: Array4<f64>,
    k: Array4<f64>,
    v: Array4<f64>,
    att: Vec<Array2<f64>>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(channels: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            channels,
            norm: GroupNorm::new(channels, groups),
            q: Conv1x1::new(channels, channels, rng),
            k: Conv1x1::new(channels, channels, rng),
            v: Conv1x1::new(channels, channels, rng),
            o: Conv1x1::new(channels, channels, rng),
        }
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, AttentionCache) {
        let (bsz, c, h, w) = x.dim();
        let hw = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        let (normed, norm_cache) = self.norm.forward(x);
        let (q, q_cache) = self.q.forward(&normed);
        let (k, k_cache) = self.k.forward(&normed);
        let (v, v_cache) = self.v.forward(&normed);
        let mut gathered = Array4::zeros((bsz, c, h, w));
        let mut att_all = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let qb = q.slice(s![b, .., .., ..]);
            let qb = qb.to_shape((c, hw)).unwrap();
            let kb = k.slice(s![b, .., .., ..]);
            let kb = kb.to_shape((c, hw)).unwrap();
            let vb = v.slice(s![b, .., .., ..]);
            let vb = vb.to_shape((c, hw)).unwrap();
            // scores[i, j] = <q_i, k_j> / sqrt(c)
            let mut scores = Array2::zeros((hw, hw));
            general_mat_mul(scale, &qb.t(), &kb.view(), 0.0, &mut scores);
            for mut row in scores.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|s| (s - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|s| s / sum);
            }
            // out[:, i] = sum_j att[i, j] v[:, j]
            let mut ob = Array2::zeros((c, hw));
            general_mat_mul(1.0, &vb.view(), &scores.t(), 0.0, &mut ob);
            gathered.slice_mut(s![b, .., .., ..]).assign(&ob.to_shape((c, h, w)).unwrap());
            att_all.push(scores);
        }
        let (proj, o_cache) = self.o.forward(&gathered);
        let y = x + &proj;
        let cache = AttentionCache { norm: norm_cache, q_cache, k_cache, v_cache, o_cache, q, k, v, att: att_all };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &AttentionCache, dy: &Array4<f64>) -> Array4<f64> {
        let (bsz, c, h, w) = dy.dim();
        let hw = h * w;
        let scale = 1.0 / (c as f64).sqrt();
        let dgathered = self.o.backward(&cache.o_cache, dy);
        let mut dq = Array4::zeros((bsz, c, h, w));
        let mut dk = Array4::zeros((bsz, c, h, w));
        let mut dv = Array4::zeros((bsz, c, h, w));
        for b in 0..bsz {
            let do_b = dgathered.slice(s![b, .., .., ..]);
            let do2 = do_b.to_shape((c, hw)).unwrap();
            let att = &cache.att[b];
            let qb = cache.q.slice(s![b, .., .., ..]);
            let qb = qb.to_shape((c, hw)).unwrap();
            let kb = cache.k.slice(s![b, .., .., ..]);
            let kb = kb.to_shape((c, hw)).unwrap();
            let vb = cache.v.slice(s![b, .., .., ..]);
            let vb = vb.to_shape((c, hw)).unwrap();
            // dv = do . att ; datt = do^T v
            let mut dvb = Array2::zeros((c, hw));
            general_mat_mul(1.0, &do2.view(), &att.view(), 0.0, &mut dvb);
            let mut datt = Array2::zeros((hw, hw));
            general_mat_mul(1.0, &do2.t(), &vb.view(), 0.0, &mut datt);
            // Softmax backward, row by row.
            let mut ds = Array2::zeros((hw, hw));
            for i in 0..hw {
                let arow = att.row(i);
                let drow = datt.row(i);
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(&a, &d)| a * d).sum();
                let mut srow = ds.row_mut(i);
                for j in 0..hw {
                    srow[j] = arow[j] * (drow[j] - dot);
                }
            }
            // dq = k ds^T / sqrt(c) ; dk = q ds / sqrt(c)
            let mut dqb = Array2::zeros((c, hw));
            general_mat_mul(scale, &kb.view(), &ds.t(), 0.0, &mut dqb);
            let mut dkb = Array2::zeros((c, hw));
            general_mat_mul(scale, &qb.view(), &ds.view(), 0.0, &mut dkb);
            dq.slice_mut(s![b, .., .., ..]).assign(&dqb.to_shape((c, h, w)).unwrap());
            dk.slice_mut(s![b, .., .., ..]).assign(&dkb.to_shape((c, h, w)).unwrap());
            dv.slice_mut(s![b, .., .., ..]).assign(&dvb.to_shape((c, h, w)).unwrap());
        }
        let mut dnormed = self.q.backward(&cache.q_cache, &dq);
        dnormed += &self.k.backward(&cache.k_cache, &dk);
        dnormed += &self.v.backward(&cache.v_cache, &dv);
        let dx_attn = self.norm.backward(&cache.norm, &dnormed);
        dy + &dx_attn
    }

    pub fn collect_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.norm.collect_params(&format!("{prefix}.norm"), out);
        self.q.collect_params(&format!("{prefix}.q"), out);
        self.k.collect_params(&format!("{prefix}.k"), out);
        self.v.collect_params(&format!("{prefix}.v"), out);
        self.o.collect_params(&format!("{prefix}.o"), out);
    }
}

/// Sinusoidal position embedding of integer timesteps: the first half of
/// the vector holds sines, the second half cosines, over geometrically
/// spaced frequencies.
pub fn time_embedding(t: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and at least 2");
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (b, &tb) in t.iter().enumerate() {
        for j in 0..half {
            let freq = (-(j as f64) * (10_000.0f64).ln() / half as f64).exp();
            let angle = tb as f64 * freq;
            out[(b, j)] = angle.sin();
            out[(b, half + j)] = angle.cos();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn randn4(rng: &mut ChaCha12Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
    }

    /// Random probe indices into a 4-d shape.
    fn probe_indices(
        rng: &mut ChaCha12Rng,
        dims: (usize, usize, usize, usize),
        n: usize,
    ) -> Vec<(usize, usize, usize, usize)> {
        (0..n)
            .map(|_| {
                (
                    rng.random_range(0..dims.0),
                    rng.random_range(0..dims.1),
                    rng.random_range(0..dims.2),
                    rng.random_range(0..dims.3),
                )
            })
            .collect()
    }

    fn assert_close(an: f64, fd: f64, tol: f64, what: &str) {
        let denom = an.abs().max(fd.abs()).max(1e-8);
        assert!((an - fd).abs() / denom < tol, "{what}: analytic {an} vs fd {fd}");
    }

    #[test]
    fn conv3x3_input_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut conv = Conv3x3::new(3, 4, &mut rng);
        let x = randn4(&mut rng, (2, 3, 5, 5));
        let wl = randn4(&mut rng, (2, 4, 5, 5));
        let (_, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &wl);
        let h = 1e-5;
        for idx in probe_indices(&mut rng, x.dim(), 8) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp = (conv.forward(&xp).0 * &wl).sum();
            let lm = (conv.forward(&xm).0 * &wl).sum();
            assert_close(dx[idx], (lp - lm) / (2.0 * h), 1e-5, &format!("{idx:?}"));
        }
    }

    #[test]
    fn conv3x3_identity_kernel_passes_through() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut conv = Conv3x3::new(1, 1, &mut rng);
        conv.w.fill(0.0);
        conv.w[(0, 4)] = 1.0; // centre tap of the 3x3 kernel
        conv.b.fill(0.0);
        let x = randn4(&mut rng, (1, 1, 6, 6));
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn conv3x3_weight_gradient_matches_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut conv = Conv3x3::new(2, 3, &mut rng);
        let x = randn4(&mut rng, (2, 2, 4, 4));
        let w_loss = randn4(&mut rng, (2, 3, 4, 4));
        let (_, cache) = conv.forward(&x);
        conv.gw.fill(0.0);
        conv.gb.fill(0.0);
        conv.backward(&cache, &w_loss);
        let h = 1e-6;
        for idx in [(0usize, 0usize), (1, 5), (2, 17)] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + h;
            let (yp, _) = conv.forward(&x);
            conv.w[idx] = orig - h;
            let (ym, _) = conv.forward(&x);
            conv.w[idx] = orig;
            let fd = ((yp * &w_loss).sum() - (ym * &w_loss).sum()) / (2.0 * h);
            let an = conv.gw[idx];
            assert!((an - fd).abs() / an.abs().max(fd.abs()).max(1e-8) < 1e-5, "{an} vs {fd}");
        }
    }

    #[test]
    fn groupnorm_standardizes_each_group() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let gn = GroupNorm::new(4, 2);
        let x = randn4(&mut rng, (2, 4, 3, 3));
        let (y, _) = gn.forward(&x);
        for b in 0..2 {
            for g in 0..2 {
                let ys = y.slice(s![b, g * 2..(g + 1) * 2, .., ..]);
                let m = ys.sum() / 18.0;
                let v = ys.iter().map(|&u| (u - m) * (u - m)).sum::<f64>() / 18.0;
                assert!(m.abs() < 1e-12);
                assert!((v - 1.0).abs() < 1e-4); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn groupnorm_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let mut gn = GroupNorm::new(4, 2);
        // Non-trivial affine parameters so their gradients matter.
        gn.gamma.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        gn.beta.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let x = randn4(&mut rng, (2, 4, 3, 3));
        let wl = randn4(&mut rng, (2, 4, 3, 3));
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &wl);
        let h = 1e-5;
        for idx in probe_indices(&mut rng, x.dim(), 8) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((gn.forward(&xp).0 * &wl).sum() - (gn.forward(&xm).0 * &wl).sum()) / (2.0 * h);
            assert_close(dx[idx], fd, 1e-4, &format!("dx {idx:?}"));
        }
        for ci in 0..4 {
            let orig = gn.gamma[ci];
            gn.gamma[ci] = orig + h;
            let lp = (gn.forward(&x).0 * &wl).sum();
            gn.gamma[ci] = orig - h;
            let lm = (gn.forward(&x).0 * &wl).sum();
            gn.gamma[ci] = orig;
            assert_close(gn.ggamma[ci], (lp - lm) / (2.0 * h), 1e-5, &format!("gamma {ci}"));
        }
    }

    #[test]
    fn pooling_and_upsampling_are_exact_adjoints() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (1, 2, 4, 4));
        let y = avg_pool2(&x);
        assert_eq!(y.dim(), (1, 2, 2, 2));
        assert!((y[(0, 0, 0, 0)] - (x[(0, 0, 0, 0)] + x[(0, 0, 0, 1)] + x[(0, 0, 1, 0)] + x[(0, 0, 1, 1)]) / 4.0).abs() < 1e-15);
        // <pool(x), w> == <x, pool_backward(w)> for the linear adjoint pair.
        let w = randn4(&mut rng, (1, 2, 2, 2));
        let lhs = (&y * &w).sum();
        let rhs = (&x * &avg_pool2_backward(&w)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let u = upsample2(&y);
        assert_eq!(u.dim(), (1, 2, 4, 4));
        let w2 = randn4(&mut rng, (1, 2, 4, 4));
        let lhs2 = (&u * &w2).sum();
        let rhs2 = (&y * &upsample2_backward(&w2)).sum();
        assert!((lhs2 - rhs2).abs() < 1e-12);
    }

    #[test]
    fn dense_gradients_match_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let mut dense = Dense::new(5, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.sample::<f64, _>(StandardNormal));
        let wl = Array2::from_shape_simple_fn((4, 3), || rng.sample::<f64, _>(StandardNormal));
        let (_, cache) = dense.forward(&x);
        let dx = dense.backward(&cache, &wl);
        let h = 1e-6;
        // input grad
        for idx in [(0usize, 0usize), (3, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((dense.forward(&xp).0 * &wl).sum() - (dense.forward(&xm).0 * &wl).sum()) / (2.0 * h);
            assert!((dx[idx] - fd).abs() < 1e-6);
        }
        // weight grad
        for idx in [(0usize, 0usize), (2, 4)] {
            let orig = dense.w[idx];
            dense.w[idx] = orig + h;
            let lp = (dense.forward(&x).0 * &wl).sum();
            dense.w[idx] = orig - h;
            let lm = (dense.forward(&x).0 * &wl).sum();
            dense.w[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((dense.gw[idx] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_gradient_checks() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut attn = Attention::new(4, 2, &mut rng);
        let x = randn4(&mut rng, (2, 4, 3, 3));
        let wl = randn4(&mut rng, (2, 4, 3, 3));
        let (_, cache) = attn.forward(&x);
        for att in &cache.att {
            for row in att.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
        let dx = attn.backward(&cache, &wl);
        let h = 1e-5;
        for idx in probe_indices(&mut rng, x.dim(), 8) {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((attn.forward(&xp).0 * &wl).sum() - (attn.forward(&xm).0 * &wl).sum()) / (2.0 * h);
            assert_close(dx[idx], fd, 1e-4, &format!("{idx:?}"));
        }
        // Projection weight gradient, a few probes.
        for idx in [(0usize, 0usize), (3, 2)] {
            let orig = attn.q.w[idx];
            attn.q.w[idx] = orig + h;
            let lp = (attn.forward(&x).0 * &wl).sum();
            attn.q.w[idx] = orig - h;
            let lm = (attn.forward(&x).0 * &wl).sum();
            attn.q.w[idx] = orig;
            assert_close(attn.q.gw[idx], (lp - lm) / (2.0 * h), 1e-4, &format!("q.w {idx:?}"));
        }
    }

    #[test]
    fn time_embedding_shape_and_range() {
        let emb = time_embedding(&[1, 500, 1000], 16);
        assert_eq!(emb.dim(), (3, 16));
        assert!(emb.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        // Distinct timesteps embed distinctly.
        assert_ne!(emb.row(0), emb.row(1));
        // Highest frequency distinguishes adjacent steps.
        let a = time_embedding(&[10], 16);
        let b = time_embedding(&[11], 16);
        assert_ne!(a, b);
    }
}
