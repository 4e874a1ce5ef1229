//! Rectified-flow generator on flattened 2×2 geometric states.
//!
//! The sampler is a Heun warm start followed by a two-step Adams–Bashforth
//! predictor and trapezoidal Adams–Moulton corrector, reusing the corrector
//! evaluation as the next step's velocity. Guidance combines the final
//! conditional and unconditional states by default.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioner::{Condition, COND_DIM};
use crate::error::{Error, Result};
use crate::geometry::{decode_sample, GeometricSample, Paired, PcaState, SignPolicy};
use crate::nn::{self, InitKind, Linear, ParamSet};

/// Width of a flattened geometric state.
pub const STATE_DIM: usize = 4;

/// States larger than this in magnitude abort sampling.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Probability of training against the null condition.
pub const DEFAULT_UNCOND_PROB: f64 = 0.1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Combine the two final states.
    #[default]
    Final,
    /// Combine the two velocities at every evaluation.
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_weight: f64,
    pub guidance_mode: GuidanceMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_weight: 1.0,
            guidance_mode: GuidanceMode::Final,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler steps must be at least 1"));
        }
        if !self.guidance_weight.is_finite() {
            return Err(Error::config("guidance weight must be finite"));
        }
        Ok(())
    }
}

/// A velocity field `(x, t, c) → v` over batches.
///
/// `x`: (B, 4), `t`: (B,), `c`: (B, COND_DIM) → (B, 4).
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Feature-wise scale and shift of every hidden block.
    #[default]
    Film,
    /// Projected condition added to the input features.
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VelocityConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_dim: usize,
    /// Diffusion time is multiplied by this before the sinusoidal features.
    pub time_scale: f64,
    pub injection: Injection,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            depth: 2,
            time_dim: 256,
            time_scale: 1000.0,
            injection: Injection::Film,
        }
    }
}

struct Block {
    norm: nn::LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Residual MLP denoiser with sinusoidal time embedding.
pub struct VelocityModel {
    cfg: VelocityConfig,
    params: ParamSet,
    input: Linear,
    time1: Linear,
    time2: Linear,
    cond: Linear,
    blocks: Vec<Block>,
    output: Linear,
}

impl VelocityModel {
    pub fn new(cfg: VelocityConfig, seed: u64) -> Result<Self> {
        if cfg.hidden == 0 || cfg.time_dim < 2 {
            return Err(Error::config("velocity model needs hidden > 0 and time_dim ≥ 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let h = cfg.hidden;
        let input = Linear::new(&mut p, &mut rng, "vel.input", STATE_DIM, h)?;
        let time1 = Linear::new(&mut p, &mut rng, "vel.time1", cfg.time_dim, h)?;
        let time2 = Linear::new(&mut p, &mut rng, "vel.time2", h, h)?;
        let cond_out = match cfg.injection {
            Injection::Film => 2 * h * cfg.depth.max(1),
            Injection::Add => h,
        };
        let cond = Linear::new(&mut p, &mut rng, "vel.cond", COND_DIM, cond_out)?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Ok(Block {
                    norm: nn::LayerNorm::new(&mut p, &mut rng, &format!("vel.block{i}.norm"), h)?,
                    fc1: Linear::new(&mut p, &mut rng, &format!("vel.block{i}.fc1"), h, h)?,
                    fc2: Linear::new(&mut p, &mut rng, &format!("vel.block{i}.fc2"), h, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bound = 0.1 / (h as f64).sqrt();
        let output = Linear::with_init(&mut p, &mut rng, "vel.output", h, STATE_DIM, InitKind::Uniform(bound), true)?;
        Ok(Self {
            cfg,
            params: p,
            input,
            time1,
            time2,
            cond,
            blocks,
            output,
        })
    }

    pub fn config(&self) -> &VelocityConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, x: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor> {
        let ts: Vec<f64> = t.to_vec1::<f64>()?.iter().map(|v| v * self.cfg.time_scale).collect();
        let temb = nn::sinusoidal_embedding(&ts, self.cfg.time_dim)?;
        let temb = self.time2.forward(&nn::silu(&self.time1.forward(&temb)?)?)?;
        let mut h = (self.input.forward(x)? + temb)?;
        let cproj = self.cond.forward(c)?;
        let hd = self.cfg.hidden;
        if self.cfg.injection == Injection::Add {
            h = (h + cproj.clone())?;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let mut z = b.norm.forward(&h)?;
            if self.cfg.injection == Injection::Film {
                let scale = cproj.narrow(1, 2 * i * hd, hd)?;
                let shift = cproj.narrow(1, (2 * i + 1) * hd, hd)?;
                z = (z.mul(&(scale + 1.0)?)? + shift)?;
            }
            let z = b.fc2.forward(&nn::silu(&b.fc1.forward(&nn::silu(&z)?)?)?)?;
            h = (h + z)?;
        }
        self.output.forward(&nn::silu(&h)?)
    }
}

/// Velocity `(1+w)·v(x,t,c) − w·v(x,t,∅)` for per-step guidance.
pub struct Guided<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub weight: f64,
}

impl<F: VelocityField + ?Sized> VelocityField for Guided<'_, F> {
    fn velocity(&self, x: &Tensor, t: &Tensor, c: &Tensor) -> Result<Tensor> {
        let vc = self.field.velocity(x, t, c)?;
        let vn = self.field.velocity(x, t, &c.zeros_like()?)?;
        Ok(((vc * (1.0 + self.weight))? - (vn * self.weight)?)?)
    }
}

/// Draws a (B, 4) standard-normal tensor.
pub fn draw_noise(rows: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let data: Vec<f64> = (0..rows * STATE_DIM).map(|_| StandardNormal.sample(rng)).collect();
    nn::tensor2(data, rows, STATE_DIM)
}

/// Stacks conditions into a (B, COND_DIM) tensor.
pub fn condition_tensor(conds: &[&Condition]) -> Result<Tensor> {
    let data: Vec<f64> = conds.iter().flat_map(|c| c.vector.iter().copied()).collect();
    nn::tensor2(data, conds.len(), COND_DIM)
}

/// Batched rectified-flow loss as a differentiable scalar.
///
/// Each row gets its own `t ~ U[0,1]`, `x₀ ~ N(0, I)` and, with probability
/// `p_uncond`, a zeroed condition.
pub fn rf_loss_tensor(
    model: &dyn VelocityField,
    x1: &Tensor,
    cond: &Tensor,
    p_uncond: f64,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let b = x1.dim(0)?;
    if cond.dim(0)? != b {
        return Err(Error::contract("samples and conditions are misaligned"));
    }
    let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let x0 = draw_noise(b, rng)?;
    let keep: Vec<f64> = (0..b)
        .map(|_| if p_uncond > 0.0 && rng.random::<f64>() < p_uncond { 0.0 } else { 1.0 })
        .collect();
    let t_col = nn::tensor2(t.clone(), b, 1)?;
    let xt = (x1.broadcast_mul(&t_col)? + x0.broadcast_mul(&t_col.affine(-1.0, 1.0)?)?)?;
    let c = cond.broadcast_mul(&nn::tensor2(keep, b, 1)?)?;
    let t = Tensor::from_vec(t, b, &nn::device())?;
    let v = model.velocity(&xt, &t, &c)?;
    nn::mse(&v, &(x1 - x0)?)
}

/// Rectified-flow loss over geometric samples with aligned conditions.
pub fn rf_loss(
    model: &dyn VelocityField,
    samples: &[GeometricSample],
    conditions: &[Condition],
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if samples.len() != conditions.len() || samples.is_empty() {
        return Err(Error::contract(format!(
            "{} samples but {} conditions",
            samples.len(),
            conditions.len()
        )));
    }
    let x1: Vec<f64> = samples.iter().flat_map(|s| s.flat()).collect();
    let x1 = nn::tensor2(x1, samples.len(), STATE_DIM)?;
    let refs: Vec<&Condition> = conditions.iter().collect();
    rf_loss_tensor(model, &x1, &condition_tensor(&refs)?, DEFAULT_UNCOND_PROB, rng)
}

fn check_state(x: &Tensor, step: usize) -> Result<()> {
    let v = x.flatten_all()?.to_vec1::<f64>()?;
    if let Some(bad) = v.iter().find(|a| !a.is_finite() || a.abs() > DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            step,
            detail: format!("state component {bad}"),
        });
    }
    Ok(())
}

/// Integrates `dx/dt = v(x, t, c)` over a uniform grid on [0, 1].
///
/// `grad_last` keeps the autograd graph only through the final that many
/// steps; earlier states are detached. `None` keeps the whole trajectory.
pub fn integrate(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    steps: usize,
    grad_last: Option<usize>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("sampler steps must be at least 1"));
    }
    let b = x0.dim(0)?;
    let h = 1.0 / steps as f64;
    let time = |k: usize| Tensor::full(k as f64 * h, b, &nn::device());
    let first_tracked = grad_last.map_or(0, |k| steps.saturating_sub(k));
    let cut = |x: Tensor, k: usize| if k < first_tracked { x.detach() } else { x };

    let v0 = field.velocity(x0, &time(0)?, cond)?;
    let probe = (x0 + (&v0 * h)?)?;
    let v1 = field.velocity(&probe, &time(1)?, cond)?;
    let mut x = cut((x0 + ((&v0 + &v1)? * (h / 2.0))?)?, 0);
    check_state(&x, 1)?;
    let mut v_prev = cut(v0, 0);
    let mut v_cur = cut(v1, 0);
    for k in 1..steps {
        let pred = (&x + ((&v_cur * 1.5)? - (&v_prev * 0.5)?)?.affine(h, 0.0)?)?;
        let v_new = field.velocity(&pred, &time(k + 1)?, cond)?;
        x = cut((&x + ((&v_cur + &v_new)? * (h / 2.0))?)?, k);
        check_state(&x, k + 1)?;
        v_prev = v_cur;
        v_cur = cut(v_new, k);
    }
    Ok(x)
}

/// Guided batch generation from shared initial noise.
///
/// Returns `(1+w)·X̂_c − w·X̂_∅` for final-state guidance, or the trajectory
/// of the guided field for per-step guidance.
pub fn generate(
    field: &dyn VelocityField,
    x0: &Tensor,
    cond: &Tensor,
    cfg: &SamplerConfig,
    grad_last: Option<usize>,
) -> Result<Tensor> {
    cfg.validate()?;
    let w = cfg.guidance_weight;
    match cfg.guidance_mode {
        GuidanceMode::Final => {
            let xc = integrate(field, x0, cond, cfg.steps, grad_last)?;
            let xn = integrate(field, x0, &cond.zeros_like()?, cfg.steps, grad_last)?;
            combine_guidance(&xc, &xn, w)
        }
        GuidanceMode::PerStep => {
            let guided = Guided { field, weight: w };
            integrate(&guided, x0, cond, cfg.steps, grad_last)
        }
    }
}

/// `(1+w)·x_c − w·x_∅`.
pub fn combine_guidance(xc: &Tensor, xn: &Tensor, w: f64) -> Result<Tensor> {
    Ok(((xc * (1.0 + w))? - (xn * w)?)?)
}

fn state_matrix(v: &[f64]) -> [[f64; 2]; 2] {
    [[v[0], v[1]], [v[2], v[3]]]
}

/// One unguided trajectory from fresh noise.
pub fn sample_trajectory(
    field: &dyn VelocityField,
    c: &Condition,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<[[f64; 2]; 2]> {
    cfg.validate()?;
    let x0 = draw_noise(1, rng)?;
    let x = integrate(field, &x0, &condition_tensor(&[c])?, cfg.steps, None)?;
    Ok(state_matrix(&nn::rows(&x)?[0]))
}

/// Guided generation of one window, decoded through `state`.
pub fn cfg_generate(
    field: &dyn VelocityField,
    c: &Condition,
    state: &PcaState,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
    policy: SignPolicy,
    paired: Option<Paired<'_>>,
) -> Result<Vec<f64>> {
    if c.is_null {
        return Err(Error::contract("guided generation needs a non-null condition"));
    }
    let x0 = draw_noise(1, rng)?;
    let x = generate(field, &x0, &condition_tensor(&[c])?, cfg, None)?;
    decode_sample(&state_matrix(&nn::rows(&x)?[0]), state, policy, paired)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    /// v(x) = A x + b with A = diag(a).
    struct Affine {
        a: f64,
        b: [f64; 4],
        calls: Cell<usize>,
    }

    impl Affine {
        fn new(a: f64, b: [f64; 4]) -> Self {
            Self { a, b, calls: Cell::new(0) }
        }
    }

    impl VelocityField for Affine {
        fn velocity(&self, x: &Tensor, _t: &Tensor, _c: &Tensor) -> Result<Tensor> {
            self.calls.set(self.calls.get() + 1);
            let b = Tensor::new(&self.b, x.device())?;
            Ok(((x * self.a)?.broadcast_add(&b))?)
        }
    }

    fn zero_cond(b: usize) -> Tensor {
        Tensor::zeros((b, COND_DIM), nn::DTYPE, &nn::device()).unwrap()
    }

    fn exp_error(steps: usize) -> f64 {
        let x0 = nn::tensor2(vec![1.0, 0.0, 0.0, 0.0], 1, 4).unwrap();
        let x = integrate(&Affine::new(1.0, [0.0; 4]), &x0, &zero_cond(1), steps, None).unwrap();
        (nn::rows(&x).unwrap()[0][0] - std::f64::consts::E).abs()
    }

    #[test]
    fn constant_field_is_exact() {
        let a = [0.3, -1.7, 2.5, 0.01];
        let x0 = nn::tensor2(vec![0.5, 0.25, -1.0, 3.0], 1, 4).unwrap();
        for steps in [1, 2, 7, 20] {
            let x = integrate(&Affine::new(0.0, a), &x0, &zero_cond(1), steps, None).unwrap();
            let x = &nn::rows(&x).unwrap()[0];
            for j in 0..4 {
                assert!((x[j] - ([0.5, 0.25, -1.0, 3.0][j] + a[j])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn exponential_growth_within_tolerance() {
        assert!(exp_error(20) <= 5e-3, "{}", exp_error(20));
        assert!(exp_error(40) < exp_error(20));
    }

    #[test]
    fn evaluation_count_is_steps_plus_one() {
        let x0 = draw_noise(1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for steps in [1, 5, 20] {
            let f = Affine::new(0.5, [0.0; 4]);
            integrate(&f, &x0, &zero_cond(1), steps, None).unwrap();
            assert_eq!(f.calls.get(), 2 + (steps - 1));
        }
    }

    #[test]
    fn divergence_reports_step() {
        let x0 = nn::tensor2(vec![1.0; 4], 1, 4).unwrap();
        let err = integrate(&Affine::new(400.0, [0.0; 4]), &x0, &zero_cond(1), 20, None).unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step >= 1));
    }

    #[test]
    fn oracle_velocity_has_zero_loss() {
        struct Oracle {
            x1: Tensor,
        }
        impl VelocityField for Oracle {
            fn velocity(&self, xt: &Tensor, t: &Tensor, _c: &Tensor) -> Result<Tensor> {
                // x_t = t x1 + (1-t) x0  ⇒  x1 − x0 = (x1 − x_t)/(1 − t)
                let t = t.reshape((t.dim(0)?, 1))?;
                Ok((&self.x1 - xt)?.broadcast_div(&t.affine(-1.0, 1.0)?)?)
            }
        }
        let x1 = nn::tensor2(vec![0.4, 0.0, 0.0, 1.3, 2.0, 0.0, 0.0, 0.1], 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = rf_loss_tensor(&Oracle { x1: x1.clone() }, &x1, &zero_cond(2), 0.1, &mut rng).unwrap();
        assert!(nn::scalar(&loss).unwrap() < 1e-18);
    }

    #[test]
    fn zero_model_loss_is_noise_variance() {
        let x1 = Tensor::zeros((10_000, 4), nn::DTYPE, &nn::device()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        let zero = Affine::new(0.0, [0.0; 4]);
        let loss = nn::scalar(&rf_loss_tensor(&zero, &x1, &zero_cond(10_000), 0.1, &mut rng).unwrap()).unwrap();
        assert!((loss - 1.0).abs() <= 0.05, "{loss}");
    }

    #[test]
    fn rf_loss_rejects_misaligned_inputs() {
        let model = VelocityModel::new(VelocityConfig::default(), 0).unwrap();
        let s = GeometricSample {
            m: [[1.0, 0.0], [0.0, 0.5]],
            signs: [1.0, 1.0],
            paired_window_index: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(rf_loss(&model, &[s], &[], &mut rng), Err(Error::Contract(_))));
    }

    #[test]
    fn guidance_combination_arithmetic() {
        let xc = nn::tensor2(vec![1.0; 4], 1, 4).unwrap();
        let xn = nn::tensor2(vec![0.5; 4], 1, 4).unwrap();
        let out = nn::rows(&combine_guidance(&xc, &xn, 1.0).unwrap()).unwrap();
        assert_eq!(out[0], vec![1.5; 4]);
    }

    #[test]
    fn zero_guidance_equals_conditional_trajectory() {
        let model = VelocityModel::new(VelocityConfig { hidden: 16, ..Default::default() }, 5).unwrap();
        let c = Condition {
            vector: (0..COND_DIM).map(|i| (i as f64 * 0.37).sin()).collect(),
            provider_id: "p".into(),
            is_null: false,
        };
        let cfg = SamplerConfig { guidance_weight: 0.0, ..Default::default() };
        let x0 = draw_noise(1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let ct = condition_tensor(&[&c]).unwrap();
        let guided = nn::rows(&generate(&model, &x0, &ct, &cfg, None).unwrap()).unwrap();
        let plain = nn::rows(&integrate(&model, &x0, &ct, 20, None).unwrap()).unwrap();
        assert_eq!(guided, plain);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let model = VelocityModel::new(VelocityConfig { hidden: 16, ..Default::default() }, 5).unwrap();
        let c = Condition::null();
        let cfg = SamplerConfig::default();
        let a = sample_trajectory(&model, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_trajectory(&model, &c, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_gradient_matches_value() {
        let model = VelocityModel::new(VelocityConfig { hidden: 8, ..Default::default() }, 2).unwrap();
        let x0 = draw_noise(2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let c = zero_cond(2);
        let full = integrate(&model, &x0, &c, 10, None).unwrap();
        let short = integrate(&model, &x0, &c, 10, Some(2)).unwrap();
        assert_eq!(nn::rows(&full).unwrap(), nn::rows(&short).unwrap());
        let g = short.sum_all().unwrap().backward().unwrap();
        let w = model.params().get("vel.output.weight").unwrap();
        assert!(g.get(w.as_tensor()).is_some());
    }

    #[test]
    fn rf_loss_gradient_matches_finite_differences() {
        let cfg = VelocityConfig {
            hidden: 6,
            depth: 1,
            time_dim: 8,
            ..Default::default()
        };
        let model = VelocityModel::new(cfg, 21).unwrap();
        let x1 = nn::tensor2(vec![0.7, 0.0, 0.0, 0.2, 1.1, 0.0, 0.0, 0.05], 2, 4).unwrap();
        let c = condition_tensor(&[&Condition::null(), &Condition::null()]).unwrap();
        let loss_at = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            rf_loss_tensor(&model, &x1, &c, 0.0, &mut rng).unwrap()
        };
        let grads = loss_at().backward().unwrap();
        for name in ["vel.output.weight", "vel.block0.fc1.weight", "vel.input.bias"] {
            let var = model.params().get(name).unwrap();
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().shape().clone();
            for idx in [0, base.len() / 2, base.len() - 1] {
                let eps = 1e-6;
                let eval = |delta: f64| {
                    let mut v = base.clone();
                    v[idx] += delta;
                    var.set(&Tensor::from_vec(v, shape.clone(), &nn::device()).unwrap()).unwrap();
                    nn::scalar(&loss_at()).unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                eval(0.0);
                let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-8);
                assert!(rel <= 1e-4, "{name}[{idx}]: fd {fd} vs {}", analytic[idx]);
            }
        }
    }
}
