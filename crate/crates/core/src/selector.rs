//! Valuation of generated windows: a small Transformer scorer, Bernoulli
//! selection, validation reward with an EMA baseline and the REINFORCE
//! update.

use candle_core::{Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::nn::{self, EncoderLayer, Linear, Optimizer, ParamSet};

/// Guard inside logarithms and divisions.
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub temperature: f64,
    pub lr: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 4,
            layers: 2,
            ffn: 128,
            dropout: 0.1,
            head_hidden: 64,
            temperature: 0.7,
            lr: 1e-3,
        }
    }
}

/// Transformer scorer over `(x ‖ y)` value tokens plus summary statistics.
pub struct Selector {
    cfg: SelectorConfig,
    params: ParamSet,
    token: Linear,
    layers: Vec<EncoderLayer>,
    stats: Linear,
    head1: Linear,
    head2: Linear,
}

impl Selector {
    pub fn new(cfg: SelectorConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let w = cfg.width;
        let token = Linear::new(&mut p, &mut rng, "sel.token", 1, w)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::new(&mut p, &mut rng, &format!("sel.layer{i}"), w, cfg.heads, cfg.ffn)
            })
            .collect::<Result<Vec<_>>>()?;
        let stats = Linear::new(&mut p, &mut rng, "sel.stats", 3, w)?;
        let head1 = Linear::new(&mut p, &mut rng, "sel.head1", 2 * w, cfg.head_hidden)?;
        let head2 = Linear::new(&mut p, &mut rng, "sel.head2", cfg.head_hidden, 1)?;
        Ok(Self {
            cfg,
            params: p,
            token,
            layers,
            stats,
            head1,
            head2,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    /// Per-sample logits, shape (B,). Dropout is active iff `rng` is given.
    pub fn logits(&self, windows: &WindowBatch, losses: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let b = windows.len();
        if losses.len() != b || b == 0 {
            return Err(Error::contract(format!("{} windows but {} losses", b, losses.len())));
        }
        let flat: Vec<f64> = windows.windows().flat_map(|w| w.iter().copied()).collect();
        if flat.iter().chain(losses).any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite selector input"));
        }
        let t = windows.window_len();
        let w = self.cfg.width;
        let values = Tensor::from_vec(flat, (b, t, 1), &nn::device())?;
        let positions: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = nn::sinusoidal_embedding(&positions, w)?.unsqueeze(0)?;
        let mut h = self.token.forward(&values)?.broadcast_add(&pe)?;
        for layer in &self.layers {
            h = layer.forward(&h, self.cfg.dropout, rng.as_deref_mut())?;
        }
        let pooled = h.mean(1)?;
        let stats: Vec<f64> = windows
            .windows()
            .zip(losses)
            .flat_map(|(win, &l)| {
                let n = win.len() as f64;
                let mean = win.iter().sum::<f64>() / n;
                let var = win.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                [mean, var, l]
            })
            .collect();
        let stats = self.stats.forward(&nn::tensor2(stats, b, 3)?)?;
        let z = Tensor::cat(&[pooled, stats], 1)?;
        let logit = self.head2.forward(&self.head1.forward(&z)?.relu()?)?;
        Ok(logit.squeeze(D::Minus1)?)
    }

    /// `σ(logit / τ)` as a differentiable (B,) tensor.
    pub fn probs_tensor(&self, windows: &WindowBatch, losses: &[f64], rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        nn::sigmoid(&(self.logits(windows, losses, rng)? / self.cfg.temperature)?)
    }

    /// Selection probabilities in evaluation mode.
    pub fn score_samples(&self, windows: &WindowBatch, losses: &[f64]) -> Result<Vec<f64>> {
        Ok(self.probs_tensor(windows, losses, None)?.to_vec1::<f64>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub probs: Vec<f64>,
    pub mask: Vec<bool>,
    pub log_prob: Vec<f64>,
}

impl SelectionDecision {
    pub fn all_selected(probs: Vec<f64>) -> Self {
        let mask = vec![true; probs.len()];
        let log_prob = log_probs(&probs, &mask);
        Self { probs, mask, log_prob }
    }

    pub fn mask_mean(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn selected(&self) -> Vec<usize> {
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

fn log_probs(probs: &[f64], mask: &[bool]) -> Vec<f64> {
    probs
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { (p + EPS).ln() } else { (1.0 - p + EPS).ln() })
        .collect()
}

/// Independent Bernoulli draws.
pub fn draw_mask(probs: &[f64], rng: &mut impl Rng) -> SelectionDecision {
    let mask: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
    let log_prob = log_probs(probs, &mask);
    SelectionDecision {
        probs: probs.to_vec(),
        mask,
        log_prob,
    }
}

/// Differentiable `log Π(m | p)` per sample.
pub fn log_prob_tensor(probs: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let m = Tensor::from_vec(m, mask.len(), &nn::device())?;
    let on = (probs + EPS)?.log()?;
    let off = (probs.affine(-1.0, 1.0)? + EPS)?.log()?;
    Ok((on.mul(&m)? + off.mul(&m.affine(-1.0, 1.0)?)?)?)
}

/// Baseline validation loss and the EMA of normalized rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardState {
    pub l_base: f64,
    pub ema: f64,
    pub ema_decay: f64,
}

impl RewardState {
    pub fn new(l_base: f64) -> Self {
        Self {
            l_base,
            ema: 0.0,
            ema_decay: 0.9,
        }
    }

    /// Centered reward from per-batch validation losses; updates the EMA.
    pub fn compute_reward(&mut self, val_losses: &[f64], mask_mean: f64) -> Result<f64> {
        if val_losses.is_empty() {
            return Err(Error::contract("no validation losses for the reward"));
        }
        let len = val_losses.len() as f64;
        let scale = len * (mask_mean + EPS);
        let mean = val_losses.iter().map(|l| (self.l_base - l) / scale).sum::<f64>() / len;
        let r = mean - self.ema;
        self.ema = self.ema_decay * self.ema + (1.0 - self.ema_decay) * mean;
        Ok(r)
    }
}

/// `standardize(r · (−L_e))` with population std floored at `EPS`.
/// A single sample has no spread and gets quality 0.
pub fn quality(r: f64, l_e: &[f64]) -> Vec<f64> {
    if l_e.len() < 2 {
        return vec![0.0; l_e.len()];
    }
    let raw: Vec<f64> = l_e.iter().map(|l| -r * l).collect();
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(EPS);
    raw.iter().map(|v| (v - mean) / std).collect()
}

/// `mean(−Q ⊙ log Π)`.
pub fn selector_loss(log_prob: &Tensor, q: &[f64]) -> Result<Tensor> {
    let q = Tensor::from_vec(q.to_vec(), q.len(), &nn::device())?;
    Ok(q.mul(log_prob)?.neg()?.mean_all()?)
}

/// One policy-gradient step. `probs` must be the tensor the decision was
/// drawn from. Returns the loss value; no step is taken when `Q ≡ 0`.
pub fn selector_update(
    opt: &mut Optimizer,
    probs: &Tensor,
    decision: &SelectionDecision,
    r: f64,
    l_e: &[f64],
) -> Result<f64> {
    if l_e.len() != decision.mask.len() {
        return Err(Error::contract("per-sample losses and decision are misaligned"));
    }
    let q = quality(r, l_e);
    let loss = selector_loss(&log_prob_tensor(probs, &decision.mask)?, &q)?;
    let value = nn::scalar(&loss)?;
    if q.iter().all(|&v| v == 0.0) {
        return Ok(value);
    }
    let mut grads = loss.backward()?;
    opt.step(&mut grads)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SplitKind;

    fn batch(seed: u64, b: usize) -> WindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<Vec<f64>> = (0..b).map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        WindowBatch::from_windows(&w, 5, 3, SplitKind::Generated).unwrap()
    }

    fn small() -> Selector {
        Selector::new(
            SelectorConfig {
                width: 8,
                heads: 2,
                ffn: 16,
                head_hidden: 8,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn probabilities_are_open_unit_interval_and_permute() {
        let s = small();
        let b = batch(0, 5);
        let losses = [0.1, 0.5, 2.0, 0.0, 1.0];
        let p = s.score_samples(&b, &losses).unwrap();
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
        let perm = [3, 0, 4, 1, 2];
        let pb = b.select(&perm);
        let pl: Vec<f64> = perm.iter().map(|&i| losses[i]).collect();
        let pp = s.score_samples(&pb, &pl).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((pp[k] - p[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_input_is_contract_error() {
        let s = small();
        assert!(matches!(s.score_samples(&batch(0, 2), &[0.1, f64::NAN]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_logit_gives_one_half() {
        let s = small();
        for name in ["sel.head2.weight", "sel.head2.bias"] {
            let v = s.params().get(name).unwrap();
            v.set(&v.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let p = s.score_samples(&batch(1, 3), &[0.0; 3]).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }

    #[test]
    fn mask_boundaries_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        assert!(draw_mask(&[1.0 - 1e-12; 50], &mut rng).mask.iter().all(|&m| m));
        assert!(draw_mask(&[1e-12; 50], &mut rng).mask.iter().all(|&m| !m));
        let d = draw_mask(&vec![0.5; 10_000], &mut rng);
        assert!((d.mask_mean() - 0.5).abs() <= 0.02);
    }

    #[test]
    fn log_prob_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let probs: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..0.99)).collect();
        let d = draw_mask(&probs, &mut rng);
        let t = log_prob_tensor(&Tensor::new(probs.as_slice(), &nn::device()).unwrap(), &d.mask).unwrap();
        let t = t.to_vec1::<f64>().unwrap();
        for i in 0..100 {
            let m = if d.mask[i] { 1.0 } else { 0.0 };
            let expect = m * (probs[i] + EPS).ln() + (1.0 - m) * (1.0 - probs[i] + EPS).ln();
            assert_eq!(d.log_prob[i], expect);
            assert_eq!(t[i], expect);
        }
    }

    #[test]
    fn reward_examples() {
        let mut s = RewardState::new(1.0);
        let r = s.compute_reward(&[0.8, 0.8], 0.5).unwrap();
        assert!((r - 0.2).abs() < 1e-6, "{r}");
        let mut s = RewardState { ema: 0.3, ..RewardState::new(0.7) };
        let r = s.compute_reward(&[0.7, 0.7, 0.7], 0.4).unwrap();
        assert_eq!(r, -0.3);
        assert!(matches!(RewardState::new(1.0).compute_reward(&[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn reward_is_order_invariant() {
        let mut a = RewardState::new(1.0);
        let mut b = RewardState::new(1.0);
        let ra = a.compute_reward(&[0.2, 0.9, 1.4], 0.3).unwrap();
        let rb = b.compute_reward(&[1.4, 0.2, 0.9], 0.3).unwrap();
        assert!((ra - rb).abs() < 1e-12);
    }

    #[test]
    fn single_term_loss() {
        let lp = log_prob_tensor(&Tensor::new(&[0.5f64], &nn::device()).unwrap(), &[true]).unwrap();
        let l = nn::scalar(&selector_loss(&lp, &[1.0]).unwrap()).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-7);
    }

    #[test]
    fn quality_is_standardized() {
        let q = quality(0.7, &[0.1, 0.4, 0.9, 1.2]);
        let mean = q.iter().sum::<f64>() / 4.0;
        let var = q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        assert_eq!(quality(1.0, &[0.5]), vec![0.0]);
    }

    #[test]
    fn zero_quality_leaves_parameters() {
        let s = small();
        let b = batch(2, 4);
        let mut opt = Optimizer::adam(s.params().vars(), 1e-3).unwrap();
        let before = s.params().flat_values().unwrap();
        let probs = s.probs_tensor(&b, &[0.1; 4], None).unwrap();
        let d = draw_mask(&probs.to_vec1::<f64>().unwrap(), &mut ChaCha8Rng::seed_from_u64(0));
        let loss = selector_update(&mut opt, &probs, &d, 0.0, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(s.params().flat_values().unwrap(), before);
    }
}
