use super::params::ModelParams;
use super::patch::ModelInput;
use super::{time_embedding, TokenSequence};
use crate::error::{Error, Result};
use crate::posindex::{PositionIndex, Rotary, RotaryCache};
use crate::tensor::{gemm, Mat, Scalar};

const LN_EPS: f64 = 1e-6;

/// Velocity patches for the id-0 block of `input` (rows in block order).
pub fn forward<T: Scalar>(params: &ModelParams<T>, input: &ModelInput<T>, t: f64) -> Result<Mat<T>> {
    Ok(Tape::record(params, input, t)?.0)
}

/// Same as [`forward`] but starting from already-embedded tokens.
pub fn forward_tokens<T: Scalar>(params: &ModelParams<T>, seq: &TokenSequence<T>, t: f64) -> Result<Mat<T>> {
    if seq.tokens.cols != params.config.width {
        return Err(Error::Shape(format!("token width {} != model width {}", seq.tokens.cols, params.config.width)));
    }
    Ok(run(params, seq.tokens.clone(), &seq.index, t)?.0)
}

struct LnCache<T> {
    normed: Mat<T>,
    rstd: Vec<T>,
}

struct TimeCache<T> {
    temb: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
    c: Mat<T>,
    sc: Mat<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    mods: Vec<T>,
    h1: Mat<T>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    attn: Mat<T>,
    a: Mat<T>,
    ln2: LnCache<T>,
    h2: Mat<T>,
    pre: Mat<T>,
    act: Mat<T>,
    m: Mat<T>,
}

/// Activations recorded by a forward pass, consumed by [`Tape::backward`].
pub struct Tape<T> {
    patches: Option<Mat<T>>,
    time: TimeCache<T>,
    rot: RotaryCache<T>,
    blocks: Vec<BlockCache<T>>,
    rows: (usize, usize),
    total_rows: usize,
    ln_f: LnCache<T>,
    fmods: Vec<T>,
    hf: Mat<T>,
}

impl<T: Scalar> Tape<T> {
    /// Forward pass from raw patches that keeps every activation.
    pub fn record(params: &ModelParams<T>, input: &ModelInput<T>, t: f64) -> Result<(Mat<T>, Tape<T>)> {
        let cfg = &params.config;
        if input.patches.cols != cfg.patch_in() {
            return Err(Error::Shape(format!("patch width {} != {}", input.patches.cols, cfg.patch_in())));
        }
        let x0 = params.patch_embed.forward(&input.patches);
        let (out, mut tape) = run(params, x0, &input.index, t)?;
        tape.patches = Some(input.patches.clone());
        Ok((out, tape))
    }

    /// Accumulates `dL/dparams` for upstream gradient `d_out` into `grads`.
    pub fn backward(&self, params: &ModelParams<T>, d_out: &Mat<T>, grads: &mut ModelParams<T>) {
        let cfg = &params.config;
        let frozen = params.has_lora();
        let w = cfg.width;
        let (s, e) = self.rows;

        // Output head.
        let d_hf = params.unembed.backward(&self.hf, d_out, &mut grads.unembed, frozen, true).unwrap();
        let mut d_fmods = vec![T::zero(); 2 * w];
        let d_nf = modulate_backward(&self.ln_f.normed, &self.fmods, 0, &d_hf, &mut d_fmods);
        let d_xf = layer_norm_backward(&self.ln_f, &d_nf);
        let mut dx = Mat::zeros(self.total_rows, w);
        dx.data[s * w..e * w].copy_from_slice(&d_xf.data);
        let mut d_sc = Mat::zeros(1, w);
        let d_fm = Mat::from_vec(1, 2 * w, d_fmods);
        d_sc.add_assign(&params.final_mod.backward(&self.time.sc, &d_fm, &mut grads.final_mod, frozen, true).unwrap());

        for (bi, cache) in self.blocks.iter().enumerate().rev() {
            let block = &params.blocks[bi];
            let gblock = &mut grads.blocks[bi];
            let mut d_mods = vec![T::zero(); 6 * w];

            // x2 = x1 + gate2 * m
            let d_m = gate_backward(&cache.m, &cache.mods[5 * w..6 * w], &dx, &mut d_mods[5 * w..6 * w]);
            let d_act = block.mlp_out.backward(&cache.act, &d_m, &mut gblock.mlp_out, frozen, true).unwrap();
            let mut d_pre = d_act;
            for (g, &x) in d_pre.data.iter_mut().zip(&cache.pre.data) {
                *g *= gelu_grad(x);
            }
            let d_h2 = block.mlp_in.backward(&cache.h2, &d_pre, &mut gblock.mlp_in, frozen, true).unwrap();
            let d_n2 = modulate_backward(&cache.ln2.normed, &cache.mods, 3 * w, &d_h2, &mut d_mods[3 * w..5 * w]);
            dx.add_assign(&layer_norm_backward(&cache.ln2, &d_n2));

            // x1 = x + gate1 * a
            let d_a = gate_backward(&cache.a, &cache.mods[2 * w..3 * w], &dx, &mut d_mods[2 * w..3 * w]);
            let d_attn = block.out.backward(&cache.attn, &d_a, &mut gblock.out, frozen, true).unwrap();
            let (mut dq, mut dk, dv) = attention_backward(cache, &d_attn, cfg.heads);
            for h in 0..cfg.heads {
                self.rot.rotate(&mut dq, h * cfg.head_dim(), true);
                self.rot.rotate(&mut dk, h * cfg.head_dim(), true);
            }
            let mut d_h1 = block.q.backward(&cache.h1, &dq, &mut gblock.q, frozen, true).unwrap();
            d_h1.add_assign(&block.k.backward(&cache.h1, &dk, &mut gblock.k, frozen, true).unwrap());
            d_h1.add_assign(&block.v.backward(&cache.h1, &dv, &mut gblock.v, frozen, true).unwrap());
            let d_n1 = modulate_backward(&cache.ln1.normed, &cache.mods, 0, &d_h1, &mut d_mods[0..2 * w]);
            dx.add_assign(&layer_norm_backward(&cache.ln1, &d_n1));

            let d_mods = Mat::from_vec(1, 6 * w, d_mods);
            d_sc.add_assign(&block.modulation.backward(&self.time.sc, &d_mods, &mut gblock.modulation, frozen, true).unwrap());
        }

        // Time MLP.
        let mut d_c = d_sc;
        for (g, &x) in d_c.data.iter_mut().zip(&self.time.c.data) {
            *g *= silu_grad(x);
        }
        let mut d_pre = params.time_out.backward(&self.time.act, &d_c, &mut grads.time_out, frozen, true).unwrap();
        for (g, &x) in d_pre.data.iter_mut().zip(&self.time.pre.data) {
            *g *= silu_grad(x);
        }
        if !frozen {
            params.time_in.backward(&self.time.temb, &d_pre, &mut grads.time_in, frozen, false);
            if let Some(patches) = &self.patches {
                params.patch_embed.backward(patches, &dx, &mut grads.patch_embed, frozen, false);
            }
        }
    }
}

fn run<T: Scalar>(params: &ModelParams<T>, x0: Mat<T>, index: &PositionIndex, t: f64) -> Result<(Mat<T>, Tape<T>)> {
    let cfg = &params.config;
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("flow time {t}")));
    }
    if x0.rows != index.len() {
        return Err(Error::Shape(format!("{} tokens but {} index entries", x0.rows, index.len())));
    }
    let noise_blocks: Vec<_> = index.blocks.iter().filter(|b| b.grid.condition_id == 0).collect();
    if noise_blocks.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "sequence must contain exactly one id-0 block, found {}",
            noise_blocks.len()
        )));
    }
    let rows = (noise_blocks[0].start, noise_blocks[0].end());
    let w = cfg.width;

    let temb = Mat::from_vec(1, cfg.time_embed_dim, time_embedding::<T>(t, cfg.time_embed_dim));
    let pre = params.time_in.forward(&temb);
    let act = map(&pre, silu);
    let c = params.time_out.forward(&act);
    let sc = map(&c, silu);
    let time = TimeCache { temb, pre, act, c, sc };

    let rotary = Rotary::new(cfg.head_dim(), cfg.rope_base)?;
    let rot = rotary.cache::<T>(index);
    let scale = T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());

    let mut x = x0;
    let mut blocks = Vec::with_capacity(cfg.depth);
    for block in &params.blocks {
        let mods = block.modulation.forward(&time.sc).data;
        let ln1 = layer_norm(&x);
        let h1 = modulate(&ln1.normed, &mods, 0);
        let mut q = block.q.forward(&h1);
        let mut k = block.k.forward(&h1);
        let v = block.v.forward(&h1);
        for h in 0..cfg.heads {
            rot.rotate(&mut q, h * cfg.head_dim(), false);
            rot.rotate(&mut k, h * cfg.head_dim(), false);
        }
        let (attn, probs) = attention(&q, &k, &v, cfg.heads, scale);
        let a = block.out.forward(&attn);
        let mut x1 = x.clone();
        add_gated(&mut x1, &a, &mods[2 * w..3 * w]);
        let ln2 = layer_norm(&x1);
        let h2 = modulate(&ln2.normed, &mods, 3 * w);
        let pre = block.mlp_in.forward(&h2);
        let act = map(&pre, gelu);
        let m = block.mlp_out.forward(&act);
        let mut x2 = x1;
        add_gated(&mut x2, &m, &mods[5 * w..6 * w]);
        blocks.push(BlockCache { ln1, mods, h1, q, k, v, probs, attn, a, ln2, h2, pre, act, m });
        x = x2;
    }

    let total_rows = x.rows;
    let xf = x.slice_rows(rows.0, rows.1);
    let fmods = params.final_mod.forward(&time.sc).data;
    let ln_f = layer_norm(&xf);
    let hf = modulate(&ln_f.normed, &fmods, 0);
    let out = params.unembed.forward(&hf);
    let tape = Tape { patches: None, time, rot, blocks, rows, total_rows, ln_f, fmods, hf };
    Ok((out, tape))
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `tanh` through a single `exp`; libm's `tanh` goes through `expm1` and
/// dominated the MLP cost. Absolute error stays at machine precision.
#[inline]
fn tanh<T: Scalar>(y: T) -> T {
    let lim = T::from_f64(15.0);
    if y > lim {
        return T::one();
    }
    if y < -lim {
        return -T::one();
    }
    let e = (y + y).exp();
    (e - T::one()) / (e + T::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + tanh(c * (x + a * x * x * x)))
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let th = tanh(c * (x + a * x * x * x));
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::from_f64(3.0) * a * x * x)
}

fn map<T: Scalar>(m: &Mat<T>, f: impl Fn(T) -> T) -> Mat<T> {
    Mat { rows: m.rows, cols: m.cols, data: m.data.iter().map(|&v| f(v)).collect() }
}

fn layer_norm<T: Scalar>(x: &Mat<T>) -> LnCache<T> {
    let n = T::from_f64(x.cols as f64);
    let eps = T::from_f64(LN_EPS);
    let mut normed = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    LnCache { normed, rstd }
}

fn layer_norm_backward<T: Scalar>(cache: &LnCache<T>, dn: &Mat<T>) -> Mat<T> {
    let n = T::from_f64(dn.cols as f64);
    let mut dx = Mat::zeros(dn.rows, dn.cols);
    for r in 0..dn.rows {
        let g = dn.row(r);
        let y = cache.normed.row(r);
        let mean_g = g.iter().copied().sum::<T>() / n;
        let mean_gy = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / n;
        let rs = cache.rstd[r];
        for ((o, &gi), &yi) in dx.row_mut(r).iter_mut().zip(g).zip(y) {
            *o = rs * (gi - mean_g - yi * mean_gy);
        }
    }
    dx
}

/// `n * (1 + scale) + shift` with `(shift, scale)` at `mods[offset..offset + 2w]`.
fn modulate<T: Scalar>(normed: &Mat<T>, mods: &[T], offset: usize) -> Mat<T> {
    let w = normed.cols;
    let shift = &mods[offset..offset + w];
    let scale = &mods[offset + w..offset + 2 * w];
    let mut h = normed.clone();
    for r in 0..h.rows {
        for ((v, &sh), &sc) in h.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *v = *v * (T::one() + sc) + sh;
        }
    }
    h
}

/// Returns `dL/dnormed`; writes `(d_shift, d_scale)` into `d_mods` (length 2w).
fn modulate_backward<T: Scalar>(normed: &Mat<T>, mods: &[T], offset: usize, dh: &Mat<T>, d_mods: &mut [T]) -> Mat<T> {
    let w = normed.cols;
    let scale = &mods[offset + w..offset + 2 * w];
    let mut dn = dh.clone();
    for r in 0..dh.rows {
        let g = dh.row(r);
        let n = normed.row(r);
        for j in 0..w {
            d_mods[j] += g[j];
            d_mods[w + j] += g[j] * n[j];
        }
        for (v, &sc) in dn.row_mut(r).iter_mut().zip(scale) {
            *v *= T::one() + sc;
        }
    }
    dn
}

fn add_gated<T: Scalar>(x: &mut Mat<T>, y: &Mat<T>, gate: &[T]) {
    for r in 0..x.rows {
        let src = y.row(r);
        for ((v, &s), &g) in x.row_mut(r).iter_mut().zip(src).zip(gate) {
            *v += g * s;
        }
    }
}

/// For `out = x + gate * y`: returns `dL/dy`, accumulates `dL/dgate`.
fn gate_backward<T: Scalar>(y: &Mat<T>, gate: &[T], d_out: &Mat<T>, d_gate: &mut [T]) -> Mat<T> {
    let mut dy = d_out.clone();
    for r in 0..y.rows {
        let g = d_out.row(r);
        for (j, &yv) in y.row(r).iter().enumerate() {
            d_gate[j] += g[j] * yv;
        }
        for (v, &gt) in dy.row_mut(r).iter_mut().zip(gate) {
            *v *= gt;
        }
    }
    dy
}

fn attention<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize, scale: T) -> (Mat<T>, Vec<Mat<T>>) {
    let dh = q.cols / heads;
    let l = q.rows;
    let mut out = Mat::zeros(l, q.cols);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let mut s = Mat::zeros(l, l);
        gemm(scale, &qh, false, &kh, true, T::zero(), &mut s);
        softmax_rows(&mut s);
        let mut oh = Mat::zeros(l, dh);
        gemm(T::one(), &s, false, &vh, false, T::zero(), &mut oh);
        out.set_cols(h * dh, &oh);
        probs.push(s);
    }
    (out, probs)
}

fn softmax_rows<T: Scalar>(s: &mut Mat<T>) {
    for r in 0..s.rows {
        let row = s.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Gradients w.r.t. the rotated queries, rotated keys and values.
fn attention_backward<T: Scalar>(cache: &BlockCache<T>, d_attn: &Mat<T>, heads: usize) -> (Mat<T>, Mat<T>, Mat<T>) {
    let width = cache.q.cols;
    let dh = width / heads;
    let l = cache.q.rows;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Mat::zeros(l, width);
    let mut dk = Mat::zeros(l, width);
    let mut dv = Mat::zeros(l, width);
    for h in 0..heads {
        let p = &cache.probs[h];
        let qh = cache.q.slice_cols(h * dh, dh);
        let kh = cache.k.slice_cols(h * dh, dh);
        let vh = cache.v.slice_cols(h * dh, dh);
        let doh = d_attn.slice_cols(h * dh, dh);
        let mut dp = Mat::zeros(l, l);
        gemm(T::one(), &doh, false, &vh, true, T::zero(), &mut dp);
        let mut dvh = Mat::zeros(l, dh);
        gemm(T::one(), p, true, &doh, false, T::zero(), &mut dvh);
        // dS = P * (dP - rowsum(dP * P))
        for r in 0..l {
            let pr = p.row(r);
            let dpr = dp.row_mut(r);
            let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            for (g, &pv) in dpr.iter_mut().zip(pr) {
                *g = pv * (*g - dot);
            }
        }
        let mut dqh = Mat::zeros(l, dh);
        gemm(scale, &dp, false, &kh, false, T::zero(), &mut dqh);
        let mut dkh = Mat::zeros(l, dh);
        gemm(scale, &dp, true, &qh, false, T::zero(), &mut dkh);
        dq.set_cols(h * dh, &dqh);
        dk.set_cols(h * dh, &dkh);
        dv.set_cols(h * dh, &dvh);
    }
    (dq, dk, dv)
}
