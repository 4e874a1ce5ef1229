//! Small neural-network toolkit on top of candle: seeded parameter sets,
//! layers, seeded dropout and an AdamW wrapper with gradient clipping.
//!
//! Everything runs in `f64` on the CPU. Parameters are created through
//! [`ParamSet`], which remembers how each tensor was initialized so a model
//! can be re-initialized from a seed in place (optimizers keep valid handles).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{backprop::GradStore, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer as _, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// How a parameter tensor is (re)initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitKind {
    Uniform(f64),
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    var: Var,
    init: InitKind,
    shape: Vec<usize>,
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

fn sample_init(rng: &mut ChaCha8Rng, shape: &[usize], init: InitKind) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match init {
        InitKind::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        InitKind::Normal(std) => {
            let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        InitKind::Zeros => vec![0.0; n],
        InitKind::Ones => vec![1.0; n],
    };
    Ok(Tensor::from_vec(data, shape, &device())?)
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Values are drawn from `rng` immediately.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: InitKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        let var = Var::from_tensor(&sample_init(rng, shape, init)?)?;
        self.entries.push(Entry {
            name,
            var: var.clone(),
            init,
            shape: shape.to_vec(),
        });
        Ok(var)
    }

    /// Redraws every parameter, in registration order, from `seed`.
    pub fn reinitialize(&self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &self.entries {
            e.var.set(&sample_init(&mut rng, &e.shape, e.init)?)?;
        }
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|e| e.var.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.var)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.shape.iter().product::<usize>()).sum()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|e| Ok(e.var.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::contract("snapshot does not match parameter set"));
        }
        for (e, t) in self.entries.iter().zip(snapshot) {
            e.var.set(t)?;
        }
        Ok(())
    }

    /// All values flattened in registration order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in &self.entries {
            out.extend(e.var.as_tensor().flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path, &device())?;
        for e in &self.entries {
            let t = map
                .get(&e.name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks '{}'", e.name)))?;
            e.var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }
}

/// Affine map `x Wᵀ + b` over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Option<Var>,
}

impl Linear {
    /// PyTorch-style uniform init with bound `1/sqrt(fan_in)`.
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(params, rng, name, fan_in, fan_out, InitKind::Uniform(bound), true)
    }

    pub fn with_init(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: InitKind,
        bias: bool,
    ) -> Result<Self> {
        let weight = params.add(format!("{name}.weight"), &[fan_out, fan_in], init, rng)?;
        let bias = if bias {
            let b_init = match init {
                InitKind::Uniform(b) => InitKind::Uniform(b),
                _ => InitKind::Zeros,
            };
            Some(params.add(format!("{name}.bias"), &[fan_out], b_init, rng)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.as_tensor().t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: params.add(format!("{name}.weight"), &[dim], InitKind::Ones, rng)?,
            beta: params.add(format!("{name}.bias"), &[dim], InitKind::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Inverted dropout with a mask drawn from the caller's generator.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let n = x.elem_count();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
    Ok(x.mul(&mask)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(x)?)?)
}

/// Tanh-approximated gelu built from elementwise primitives.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let inner = ((x + (x.powf(3.0)? * 0.044715)?)? * (2.0 / std::f64::consts::PI).sqrt())?;
    Ok(((x * 0.5)? * (inner.tanh()? + 1.0)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Sinusoidal features of scalar positions (e.g. diffusion time).
/// Row `i` holds `[sin(p_i ω_k) …, cos(p_i ω_k) …]` with
/// `ω_k = 10000^{-k/(dim/2)}`.
pub fn sinusoidal_embedding(positions: &[f64], dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let angles: Vec<f64> = freqs.map(|w| p * w).collect();
        data.extend(angles.iter().map(|a| a.sin()));
        data.extend(angles.iter().map(|a| a.cos()));
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), &device())?)
}

/// Multi-head scaled dot-product attention with separate q/k/v projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if !width.is_multiple_of(heads) {
            return Err(Error::config(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(params, rng, &format!("{name}.q"), width, width)?,
            k: Linear::new(params, rng, &format!("{name}.k"), width, width)?,
            v: Linear::new(params, rng, &format!("{name}.v"), width, width)?,
            o: Linear::new(params, rng, &format!("{name}.o"), width, width)?,
            heads,
        })
    }

    /// `query`: (B, Tq, E), `context`: (B, Tk, E) → (B, Tq, E).
    pub fn forward(&self, query: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, tq, e) = query.dims3()?;
        let tk = context.dim(1)?;
        let hd = e / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            Ok(x.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(query)?, tq)?;
        let k = split(self.k.forward(context)?, tk)?;
        let v = split(self.v.forward(context)?, tk)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, e))?;
        self.o.forward(&out)
    }
}

/// Post-norm Transformer encoder layer with a gelu feed-forward block.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(params, rng, &format!("{name}.attn"), width, heads)?,
            norm1: LayerNorm::new(params, rng, &format!("{name}.norm1"), width)?,
            ff1: Linear::new(params, rng, &format!("{name}.ff1"), width, ffn)?,
            ff2: Linear::new(params, rng, &format!("{name}.ff2"), ffn, width)?,
            norm2: LayerNorm::new(params, rng, &format!("{name}.norm2"), width)?,
        })
    }

    /// (B, T, E) → (B, T, E). Dropout is applied only when `rng` is given.
    pub fn forward(&self, x: &Tensor, p: f64, mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut drop = |t: Tensor| -> Result<Tensor> {
            match rng.as_deref_mut() {
                Some(r) => dropout(&t, p, r),
                None => Ok(t),
            }
        };
        let a = drop(self.attn.forward(x, x)?)?;
        let x = self.norm1.forward(&(x + a)?)?;
        let f = drop(gelu(&self.ff1.forward(&x)?)?)?;
        let f = drop(self.ff2.forward(&f)?)?;
        self.norm2.forward(&(x + f)?)
    }
}

/// `sqrt(max(x, 0))` whose gradient is zero wherever `x <= 0`.
struct SqrtClamped;

impl CustomOp1 for SqrtClamped {
    fn name(&self) -> &'static str {
        "sqrt-clamped"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let data = match storage {
            CpuStorage::F64(v) => v,
            _ => candle_core::bail!("sqrt-clamped expects f64"),
        };
        let out: Vec<f64> = match layout.contiguous_offsets() {
            Some((a, b)) => data[a..b].iter().map(|x| x.max(0.0).sqrt()).collect(),
            None => candle_core::bail!("sqrt-clamped expects a contiguous input"),
        };
        Ok((CpuStorage::F64(out), layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let positive = arg.gt(0.0)?.to_dtype(arg.dtype())?;
        // Where the root is zero the denominator is replaced by 1 and masked out.
        let safe = (res + (1.0 - &positive)?)?;
        let g = (grad_res.mul(&positive)? / (safe * 2.0)?)?;
        Ok(Some(g))
    }
}

pub fn sqrt_clamped(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SqrtClamped)?)
}

/// AdamW with optional global-norm gradient clipping.
pub struct Optimizer {
    inner: AdamW,
    vars: Vec<Var>,
    pub clip_norm: Option<f64>,
}

impl Optimizer {
    pub fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip_norm: None,
        })
    }

    /// Plain Adam (no weight decay).
    pub fn adam(vars: Vec<Var>, lr: f64) -> Result<Self> {
        Self::adamw(vars, lr, 0.0)
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.inner.learning_rate()
    }

    /// Global L2 norm of this optimizer's gradients in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    pub fn step(&mut self, grads: &mut GradStore) -> Result<()> {
        if let Some(max) = self.clip_norm {
            let norm = self.grad_norm(grads)?;
            if norm > max && norm.is_finite() {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        for v in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let finite = g.flatten_all()?.to_vec1::<f64>()?.iter().all(|x| x.is_finite());
                if !finite {
                    return Err(Error::contract("non-finite gradient"));
                }
            }
        }
        self.inner.step(grads)?;
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

pub fn tensor2(data: Vec<f64>, rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &device())?)
}

pub fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_vec2::<f64>()?)
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(target)?.sqr()?.mean_all()?)
}

/// Per-row mean squared error of two (B, N) tensors.
pub fn mse_rows(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok(pred.sub(target)?.sqr()?.mean(D::Minus1)?)
}
