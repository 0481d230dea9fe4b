use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar};

/// Projection names that accept LoRA adapters.
pub const LORA_TARGETS: [&str; 4] = ["q", "k", "v", "out"];

/// Low-rank adapter pair; the effective update is `(alpha / rank) * B A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lora<T> {
    pub alpha: f64,
    /// rank x in
    pub a: Mat<T>,
    /// out x rank
    pub b: Mat<T>,
}

impl<T: Scalar> Lora<T> {
    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn scale(&self) -> T {
        T::from_f64(self.alpha / self.rank() as f64)
    }
}

/// Affine map `y = x W^T + b`, optionally with a LoRA adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// out x in
    pub weight: Mat<T>,
    pub bias: Vec<T>,
    pub lora: Option<Lora<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Mat::zeros(output, input), bias: vec![T::zero(); output], lora: None }
    }

    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
        let mut lin = Self::zeros(input, output);
        for w in &mut lin.weight.data {
            *w = T::from_f64(dist.sample(rng));
        }
        lin
    }

    pub fn normal<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let mut lin = Self::zeros(input, output);
        for w in &mut lin.weight.data {
            *w = T::from_f64(dist.sample(rng));
        }
        lin
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = Mat::zeros(x.rows, self.out_dim());
        for r in 0..y.rows {
            y.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(T::one(), x, false, &self.weight, true, T::one(), &mut y);
        if let Some(lora) = &self.lora {
            let mut xa = Mat::zeros(x.rows, lora.rank());
            gemm(T::one(), x, false, &lora.a, true, T::zero(), &mut xa);
            gemm(lora.scale(), &xa, false, &lora.b, true, T::one(), &mut y);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx` when
    /// `need_input` is set. Base weights are skipped when `base_frozen`.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grad: &mut Linear<T>, base_frozen: bool, need_input: bool) -> Option<Mat<T>> {
        if !base_frozen {
            gemm(T::one(), dy, true, x, false, T::one(), &mut grad.weight);
            for r in 0..dy.rows {
                for (g, &d) in grad.bias.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        let mut dx = if need_input {
            let mut dx = Mat::zeros(x.rows, self.in_dim());
            gemm(T::one(), dy, false, &self.weight, false, T::zero(), &mut dx);
            Some(dx)
        } else {
            None
        };
        if let Some(lora) = &self.lora {
            let s = lora.scale();
            let g = grad.lora.as_mut().expect("gradient buffer mirrors adapters");
            let mut xa = Mat::zeros(x.rows, lora.rank());
            gemm(T::one(), x, false, &lora.a, true, T::zero(), &mut xa);
            // dB = s * dy^T (x A^T)
            gemm(s, dy, true, &xa, false, T::one(), &mut g.b);
            // dy B : rows x rank
            let mut dyb = Mat::zeros(dy.rows, lora.rank());
            gemm(T::one(), dy, false, &lora.b, false, T::zero(), &mut dyb);
            // dA = s * (dy B)^T x
            gemm(s, &dyb, true, x, false, T::one(), &mut g.a);
            if let Some(dx) = dx.as_mut() {
                gemm(s, &dyb, false, &lora.a, false, T::one(), dx);
            }
        }
        dx
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Mat::zeros(self.weight.rows, self.weight.cols),
            bias: vec![T::zero(); self.bias.len()],
            lora: self.lora.as_ref().map(|l| Lora { alpha: l.alpha, a: Mat::zeros(l.a.rows, l.a.cols), b: Mat::zeros(l.b.rows, l.b.cols) }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    /// silu(c) -> (shift1, scale1, gate1, shift2, scale2, gate2)
    pub modulation: Linear<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub mlp_in: Linear<T>,
    pub mlp_out: Linear<T>,
}

impl<T: Scalar> Block<T> {
    pub fn projection(&self, name: &str) -> Option<&Linear<T>> {
        match name {
            "q" => Some(&self.q),
            "k" => Some(&self.k),
            "v" => Some(&self.v),
            "out" => Some(&self.out),
            _ => None,
        }
    }

    pub fn projection_mut(&mut self, name: &str) -> Option<&mut Linear<T>> {
        match name {
            "q" => Some(&mut self.q),
            "k" => Some(&mut self.k),
            "v" => Some(&mut self.v),
            "out" => Some(&mut self.out),
            _ => None,
        }
    }
}

/// Full parameter set. The same type doubles as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub patch_embed: Linear<T>,
    pub time_in: Linear<T>,
    pub time_out: Linear<T>,
    pub blocks: Vec<Block<T>>,
    /// silu(c) -> (shift, scale) of the output norm
    pub final_mod: Linear<T>,
    pub unembed: Linear<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters (output is identically zero).
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let blocks = (0..config.depth)
            .map(|_| Block {
                modulation: Linear::zeros(w, 6 * w),
                q: Linear::zeros(w, w),
                k: Linear::zeros(w, w),
                v: Linear::zeros(w, w),
                out: Linear::zeros(w, w),
                mlp_in: Linear::zeros(w, config.hidden()),
                mlp_out: Linear::zeros(config.hidden(), w),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed: Linear::zeros(config.patch_in(), w),
            time_in: Linear::zeros(config.time_embed_dim, w),
            time_out: Linear::zeros(w, w),
            blocks,
            final_mod: Linear::zeros(w, 2 * w),
            unembed: Linear::zeros(w, config.patch_out()),
        })
    }

    /// DiT-style initialisation: Xavier projections, normal time MLP, and
    /// zero modulation / output layers so every block starts as identity.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let w = config.width;
        p.patch_embed = Linear::xavier(config.patch_in(), w, rng);
        p.time_in = Linear::normal(config.time_embed_dim, w, 0.02, rng);
        p.time_out = Linear::normal(w, w, 0.02, rng);
        for b in &mut p.blocks {
            b.q = Linear::xavier(w, w, rng);
            b.k = Linear::xavier(w, w, rng);
            b.v = Linear::xavier(w, w, rng);
            b.out = Linear::xavier(w, w, rng);
            b.mlp_in = Linear::xavier(w, config.hidden(), rng);
            b.mlp_out = Linear::xavier(config.hidden(), w, rng);
        }
        Ok(p)
    }

    /// Every tensor (including biases and adapters) drawn from `N(0, std^2)`.
    pub fn randomized<R: Rng + ?Sized>(config: &ModelConfig, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let dist = Normal::new(0.0, std).expect("valid std");
        p.visit_mut(&mut |_, data| {
            for v in data.iter_mut() {
                *v = T::from_f64(dist.sample(rng));
            }
        });
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_embed: self.patch_embed.zeros_like(),
            time_in: self.time_in.zeros_like(),
            time_out: self.time_out.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    modulation: b.modulation.zeros_like(),
                    q: b.q.zeros_like(),
                    k: b.k.zeros_like(),
                    v: b.v.zeros_like(),
                    out: b.out.zeros_like(),
                    mlp_in: b.mlp_in.zeros_like(),
                    mlp_out: b.mlp_out.zeros_like(),
                })
                .collect(),
            final_mod: self.final_mod.zeros_like(),
            unembed: self.unembed.zeros_like(),
        }
    }

    fn linears(&self) -> Vec<(String, &Linear<T>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("time_in".to_string(), &self.time_in),
            ("time_out".to_string(), &self.time_out),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.modulation"), &b.modulation));
            out.push((format!("blocks.{i}.attn.q"), &b.q));
            out.push((format!("blocks.{i}.attn.k"), &b.k));
            out.push((format!("blocks.{i}.attn.v"), &b.v));
            out.push((format!("blocks.{i}.attn.out"), &b.out));
            out.push((format!("blocks.{i}.mlp.in"), &b.mlp_in));
            out.push((format!("blocks.{i}.mlp.out"), &b.mlp_out));
        }
        out.push(("final_mod".to_string(), &self.final_mod));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    fn linears_mut(&mut self) -> Vec<(String, &mut Linear<T>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &mut self.patch_embed),
            ("time_in".to_string(), &mut self.time_in),
            ("time_out".to_string(), &mut self.time_out),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.modulation"), &mut b.modulation));
            out.push((format!("blocks.{i}.attn.q"), &mut b.q));
            out.push((format!("blocks.{i}.attn.k"), &mut b.k));
            out.push((format!("blocks.{i}.attn.v"), &mut b.v));
            out.push((format!("blocks.{i}.attn.out"), &mut b.out));
            out.push((format!("blocks.{i}.mlp.in"), &mut b.mlp_in));
            out.push((format!("blocks.{i}.mlp.out"), &mut b.mlp_out));
        }
        out.push(("final_mod".to_string(), &mut self.final_mod));
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    /// Visits `(name, shape, data)` for every tensor in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, [usize; 2], &[T])) {
        for (name, lin) in self.linears() {
            f(&format!("{name}.weight"), [lin.weight.rows, lin.weight.cols], &lin.weight.data);
            f(&format!("{name}.bias"), [1, lin.bias.len()], &lin.bias);
            if let Some(l) = &lin.lora {
                f(&format!("{name}.lora_a"), [l.a.rows, l.a.cols], &l.a.data);
                f(&format!("{name}.lora_b"), [l.b.rows, l.b.cols], &l.b.data);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        for (name, lin) in self.linears_mut() {
            f(&format!("{name}.weight"), &mut lin.weight.data);
            f(&format!("{name}.bias"), &mut lin.bias);
            if let Some(l) = &mut lin.lora {
                f(&format!("{name}.lora_a"), &mut l.a.data);
                f(&format!("{name}.lora_b"), &mut l.b.data);
            }
        }
    }

    /// Tensor slices in visiting order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (name, lin) in self.linears() {
            out.push((format!("{name}.weight"), lin.weight.data.as_slice()));
            out.push((format!("{name}.bias"), lin.bias.as_slice()));
            if let Some(l) = &lin.lora {
                out.push((format!("{name}.lora_a"), l.a.data.as_slice()));
                out.push((format!("{name}.lora_b"), l.b.data.as_slice()));
            }
        }
        out
    }

    /// Mutable tensor slices in visiting order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        for (name, lin) in self.linears_mut() {
            let Linear { weight, bias, lora } = lin;
            out.push((format!("{name}.weight"), weight.data.as_mut_slice()));
            out.push((format!("{name}.bias"), bias.as_mut_slice()));
            if let Some(l) = lora {
                out.push((format!("{name}.lora_a"), l.a.data.as_mut_slice()));
                out.push((format!("{name}.lora_b"), l.b.data.as_mut_slice()));
            }
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, _| n += 1);
        n
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, d| n += d.len());
        n
    }

    pub fn has_lora(&self) -> bool {
        self.blocks.iter().any(|b| LORA_TARGETS.iter().any(|t| b.projection(t).is_some_and(|l| l.lora.is_some())))
    }

    /// True when a tensor receives gradient updates: adapters only while any
    /// adapter is attached, everything otherwise.
    pub fn is_trainable(&self, tensor_name: &str) -> bool {
        !self.has_lora() || tensor_name.ends_with(".lora_a") || tensor_name.ends_with(".lora_b")
    }

    /// Adds `other * s` to every tensor.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        let mut src = Vec::new();
        other.visit(&mut |_, _, d| src.push(d.to_vec()));
        for ((_, dst), src) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b * s;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.visit_mut(&mut |_, d| d.iter_mut().for_each(|v| *v *= s));
    }

    /// Order-fixed 64-bit FNV-1a digest of every tensor's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        self.visit(&mut |name, _, data| {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            for v in data {
                for b in v.as_f64().to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        });
        h
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        fn lin<T: Scalar, U: Scalar>(l: &Linear<T>) -> Linear<U> {
            Linear {
                weight: l.weight.cast(),
                bias: l.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                lora: l.lora.as_ref().map(|x| Lora { alpha: x.alpha, a: x.a.cast(), b: x.b.cast() }),
            }
        }
        ModelParams {
            config: self.config.clone(),
            patch_embed: lin(&self.patch_embed),
            time_in: lin(&self.time_in),
            time_out: lin(&self.time_out),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    modulation: lin(&b.modulation),
                    q: lin(&b.q),
                    k: lin(&b.k),
                    v: lin(&b.v),
                    out: lin(&b.out),
                    mlp_in: lin(&b.mlp_in),
                    mlp_out: lin(&b.mlp_out),
                })
                .collect(),
            final_mod: lin(&self.final_mod),
            unembed: lin(&self.unembed),
        }
    }

    /// Attaches fresh adapters (`B = 0`, `A ~ U(-1/sqrt(in), 1/sqrt(in))`) to
    /// the named attention projections of every block.
    pub fn attach_lora<R: Rng + ?Sized>(&self, targets: &[&str], rng: &mut R) -> Result<Self> {
        let rank = self.config.lora_rank;
        if rank == 0 {
            return Err(Error::Lora("lora_rank must be positive to attach adapters".into()));
        }
        if let Some(bad) = targets.iter().find(|t| !LORA_TARGETS.contains(t)) {
            return Err(Error::Lora(format!("unknown projection {bad:?}; expected one of {LORA_TARGETS:?}")));
        }
        let mut out = self.clone();
        for block in &mut out.blocks {
            for &t in targets {
                let lin = block.projection_mut(t).expect("validated name");
                let bound = 1.0 / (lin.in_dim() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
                let mut a = Mat::zeros(rank, lin.in_dim());
                for v in &mut a.data {
                    *v = T::from_f64(dist.sample(rng));
                }
                lin.lora = Some(Lora { alpha: self.config.lora_alpha, a, b: Mat::zeros(lin.out_dim(), rank) });
            }
        }
        Ok(out)
    }

    /// Folds every adapter into its base weight (`W += alpha/rank * B A`) and
    /// clears the adapter slots.
    pub fn merge_lora(&self) -> Result<Self> {
        if !self.has_lora() {
            return Err(Error::Lora("no adapters attached".into()));
        }
        let mut out = self.clone();
        for block in &mut out.blocks {
            for t in LORA_TARGETS {
                let lin = block.projection_mut(t).expect("known name");
                if let Some(lora) = lin.lora.take() {
                    gemm(lora.scale(), &lora.b, false, &lora.a, false, T::one(), &mut lin.weight);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { patch_size: 1, in_channels: 3, width: 12, depth: 1, heads: 2, time_embed_dim: 4, lora_rank: 2, lora_alpha: 4.0, ..Default::default() }
    }

    #[test]
    fn visit_order_and_counts() {
        let p: ModelParams<f64> = ModelParams::zeros(&tiny()).unwrap();
        // 3 stem + 7 per block + 2 head linears, two tensors each
        assert_eq!(p.tensor_count(), 2 * (3 + 7 + 2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = p.attach_lora(&LORA_TARGETS, &mut rng).unwrap();
        assert_eq!(a.tensor_count(), p.tensor_count() + 8);
        assert!(a.is_trainable("blocks.0.attn.q.lora_a"));
        assert!(!a.is_trainable("blocks.0.attn.q.weight"));
        assert!(p.is_trainable("blocks.0.attn.q.weight"));
    }

    #[test]
    fn attach_rejects_unknown_target_and_zero_rank() {
        let p: ModelParams<f64> = ModelParams::zeros(&tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(p.attach_lora(&["mlp"], &mut rng), Err(Error::Lora(_))));
        let mut cfg = tiny();
        cfg.lora_rank = 0;
        let p: ModelParams<f64> = ModelParams::zeros(&cfg).unwrap();
        assert!(p.attach_lora(&["q"], &mut rng).is_err());
    }

    #[test]
    fn merge_zero_b_is_noop_and_double_merge_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p: ModelParams<f64> = ModelParams::init(&tiny(), &mut rng).unwrap();
        let a = p.attach_lora(&LORA_TARGETS, &mut rng).unwrap();
        let merged = a.merge_lora().unwrap();
        assert_eq!(merged, p);
        assert!(matches!(merged.merge_lora(), Err(Error::Lora(_))));
    }

    #[test]
    fn merge_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: ModelParams<f64> = ModelParams::init(&tiny(), &mut rng).unwrap();
        let mut a = p.attach_lora(&["v"], &mut rng).unwrap();
        for v in &mut a.blocks[0].v.lora.as_mut().unwrap().b.data {
            *v = rng.random_range(-1.0..1.0);
        }
        let lora = a.blocks[0].v.lora.clone().unwrap();
        let merged = a.merge_lora().unwrap();
        let s = lora.alpha / lora.rank() as f64;
        for o in 0..12 {
            for i in 0..12 {
                let mut ba = 0.0;
                for r in 0..lora.rank() {
                    ba += lora.b.at(o, r) * lora.a.at(r, i);
                }
                let expect = p.blocks[0].v.weight.at(o, i) + s * ba;
                assert!((merged.blocks[0].v.weight.at(o, i) - expect).abs() < 1e-14);
            }
        }
        assert!(merged.blocks[0].v.lora.is_none());
    }

    #[test]
    fn alpha_scales_linear_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin: Linear<f64> = Linear::xavier(5, 4, &mut rng);
        let x = Mat::from_vec(2, 5, (0..10).map(|i| (i as f64 * 0.7).sin()).collect());
        let base = lin.forward(&x);
        let a = Mat::from_vec(2, 5, (0..10).map(|i| (i as f64).cos()).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|i| 0.3 * i as f64 - 1.0).collect());
        lin.lora = Some(Lora { alpha: 1.5, a: a.clone(), b: b.clone() });
        let one = lin.forward(&x);
        lin.lora = Some(Lora { alpha: 3.0, a, b });
        let two = lin.forward(&x);
        for i in 0..base.data.len() {
            let d1 = one.data[i] - base.data[i];
            let d2 = two.data[i] - base.data[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }
}
