//! Joint training of generator, selector and forecaster.

use candle_core::Tensor;
use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioner::{EmbeddingTable, Gate, ProviderRegistry};
use crate::data::{SplitKind, WindowBatch};
use crate::error::{Error, Result};
use crate::forecast::{self, Forecaster, TrainConfig};
use crate::geometry::{decode_sample, encode_batch, value_signs, DiagDecoder, GeometricSample, Paired, PcaState, SignPolicy};
use crate::metrics::Mode;
use crate::nn::{self, Optimizer};
use crate::rectflow::{self, SamplerConfig, VelocityModel, STATE_DIM};
use crate::selector::{draw_mask, selector_update, RewardState, SelectionDecision, Selector};

use super::config::ExperimentConfig;

/// Mixes a base seed with stream coordinates (splitmix64).
pub fn stream_seed(base: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}

/// One epoch of MSE training over fixed batches, then the mean
/// validation-half batch loss; the forecaster is re-initialized afterwards.
pub fn warmup_baseline_loss(
    model: &dyn Forecaster,
    train: &[WindowBatch],
    val_half: &[WindowBatch],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    if val_half.is_empty() {
        return Err(Error::contract("validation half has no batches"));
    }
    let mut opt = cfg.optimizer(model)?;
    for b in train {
        model.train_batch(&forecast::inputs_tensor(b)?, &forecast::targets_tensor(b)?, &mut opt)?;
    }
    let l_base = val_half_losses(model, val_half, None)?.iter().sum::<f64>() / val_half.len() as f64;
    model.reinitialize(seed)?;
    Ok(l_base)
}

/// Mean MSE of each validation-half batch.
pub fn val_half_losses(model: &dyn Forecaster, val_half: &[WindowBatch], limit: Option<usize>) -> Result<Vec<f64>> {
    let n = limit.unwrap_or(val_half.len()).min(val_half.len());
    val_half[..n].iter().map(|b| forecast::mean_mse(model, b)).collect()
}

/// A fixed real training batch with everything the generator needs.
pub struct TrainBatch {
    pub real: WindowBatch,
    pub pca: PcaState,
    pub samples: Vec<GeometricSample>,
    pub decoder: DiagDecoder,
    gate_inputs: Tensor,
    embeddings: Vec<Tensor>,
    targets: Tensor,
    proj_signs: Tensor,
    value_signs: Tensor,
    /// Row of each window among all training windows.
    pub rows: Vec<usize>,
}

/// Generated windows for one training batch, aligned row by row.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub x0: Tensor,
    pub states: Vec<[f64; STATE_DIM]>,
    pub windows: WindowBatch,
    pub providers: Vec<usize>,
}

pub struct Generator {
    pub velocity: VelocityModel,
    pub gate: Gate,
    pub opt: Optimizer,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub rf_loss: f64,
    pub generated: usize,
    pub selected: usize,
    pub selected_fraction: f64,
    pub mean_prob: f64,
    pub l_e_mean: f64,
    pub l_s_mean: f64,
    pub l_train_mean: f64,
    pub reward_mean: f64,
    pub ema: f64,
    pub val_mse: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

pub struct Dvrlg {
    pub mode: Mode,
    pub forecaster: Box<dyn Forecaster>,
    pub theta_opt: Option<Optimizer>,
    pub generator: Generator,
    pub selector: Selector,
    pub phi_opt: Optimizer,
    pub reward: RewardState,
    pub batches: Vec<TrainBatch>,
    pub buffers: Vec<Buffer>,
    pub l_e: Vec<Vec<f64>>,
    pub decisions: Vec<SelectionDecision>,
    pub val_half: Vec<WindowBatch>,
    pub val_full: WindowBatch,
    pub history: Vec<EpochLog>,
    cfg: ExperimentConfig,
    input_len: usize,
    horizon: usize,
}

impl Dvrlg {
    /// Builds models and per-batch geometric state. `train` holds the fixed
    /// chronological training batches.
    pub fn new(
        cfg: &ExperimentConfig,
        mode: Mode,
        forecaster: Box<dyn Forecaster>,
        train: Vec<WindowBatch>,
        val_half: Vec<WindowBatch>,
        val_full: WindowBatch,
    ) -> Result<Self> {
        if !mode.uses_generator() {
            return Err(Error::contract(format!("mode {mode} does not use the generator")));
        }
        if train.is_empty() {
            return Err(Error::contract("no training batches"));
        }
        let input_len = forecaster.input_len();
        let horizon = forecaster.horizon();
        let registry = ProviderRegistry::from_specs(&cfg.providers)?;
        let all_inputs: Vec<&[f64]> = train.iter().flat_map(|b| (0..b.len()).map(move |i| b.input(i))).collect();
        let table = EmbeddingTable::build(&registry, &all_inputs)?;
        let mut batches = Vec::with_capacity(train.len());
        let mut offset = 0;
        for (k, real) in train.into_iter().enumerate() {
            let (pca, samples) = encode_batch(&real, k)?;
            let rows: Vec<usize> = (offset..offset + real.len()).collect();
            offset += real.len();
            let b = real.len();
            let d = real.window_len();
            let signs: Vec<f64> = samples.iter().flat_map(|s| s.signs).collect();
            let vsigns: Vec<f64> = match cfg.generator.sign_policy {
                SignPolicy::Paired => real.windows().flat_map(value_signs).collect(),
                SignPolicy::Unsigned => vec![1.0; b * d],
            };
            batches.push(TrainBatch {
                decoder: DiagDecoder::new(&pca)?,
                gate_inputs: forecast::inputs_tensor(&real)?,
                targets: forecast::targets_tensor(&real)?,
                embeddings: table.tensors(&rows)?,
                proj_signs: nn::tensor2(signs, b, 2)?,
                value_signs: nn::tensor2(vsigns, b, d)?,
                real,
                pca,
                samples,
                rows,
            });
        }
        let g = &cfg.generator;
        let velocity = VelocityModel::new(g.velocity, stream_seed(cfg.seed, &[1]))?;
        let gate = Gate::new(input_len, registry.len(), g.gate_hidden, stream_seed(cfg.seed, &[2]))?;
        let mut psi = velocity.params().vars();
        psi.extend(gate.params().vars());
        let opt = Optimizer::adamw(psi, g.lr, g.weight_decay)?.with_clip(g.grad_clip);
        let selector = Selector::new(cfg.selector.model, stream_seed(cfg.seed, &[3]))?;
        let phi_opt = Optimizer::adam(selector.params().vars(), cfg.selector.model.lr)?;
        Ok(Self {
            mode,
            forecaster,
            theta_opt: None,
            generator: Generator { velocity, gate, opt },
            selector,
            phi_opt,
            reward: RewardState::new(0.0),
            batches,
            buffers: Vec::new(),
            l_e: Vec::new(),
            decisions: Vec::new(),
            val_half,
            val_full,
            history: Vec::new(),
            cfg: cfg.clone(),
            input_len,
            horizon,
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        self.cfg.sampler
    }

    fn real_batches(&self) -> Vec<WindowBatch> {
        self.batches.iter().map(|b| b.real.clone()).collect()
    }

    /// Computes `L_base` and resets the forecaster and its optimizer.
    pub fn warmup(&mut self) -> Result<f64> {
        let l_base = warmup_baseline_loss(
            self.forecaster.as_ref(),
            &self.real_batches(),
            &self.val_half,
            &self.cfg.forecaster_train,
            self.cfg.seed,
        )?;
        self.reward = RewardState::new(l_base);
        self.theta_opt = Some(self.cfg.forecaster_train.optimizer(self.forecaster.as_ref())?);
        Ok(l_base)
    }

    fn frozen(&self, epoch: usize) -> bool {
        self.mode == Mode::Dad4tsOnce && epoch >= 2 && !self.buffers.is_empty()
    }

    fn train_generator(&mut self, epoch: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, &[epoch as u64, 10]));
        let gen = &mut self.generator;
        let mut total = 0.0;
        for tb in &self.batches {
            let (cond, _) = gen.gate.route(&tb.gate_inputs, &tb.embeddings)?;
            let x1: Vec<f64> = tb.samples.iter().flat_map(|s| s.flat()).collect();
            let x1 = nn::tensor2(x1, tb.samples.len(), STATE_DIM)?;
            let loss = rectflow::rf_loss_tensor(&gen.velocity, &x1, &cond, self.cfg.generator.uncond_prob, &mut rng)?;
            total += nn::scalar(&loss)?;
            let mut grads = loss.backward()?;
            gen.opt.step(&mut grads)?;
        }
        Ok(total / self.batches.len() as f64)
    }

    fn initial_noise(&self, epoch: usize, tb: &TrainBatch) -> Result<Tensor> {
        let mut data = Vec::with_capacity(tb.rows.len() * STATE_DIM);
        for &row in &tb.rows {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, &[epoch as u64, 20, row as u64]));
            data.extend(rectflow::draw_noise(1, &mut rng)?.flatten_all()?.to_vec1::<f64>()?);
        }
        nn::tensor2(data, tb.rows.len(), STATE_DIM)
    }

    fn regenerate(&mut self, epoch: usize) -> Result<()> {
        let mut buffers = Vec::with_capacity(self.batches.len());
        for tb in &self.batches {
            let x0 = self.initial_noise(epoch, tb)?;
            let (cond, providers) = self.generator.gate.route(&tb.gate_inputs, &tb.embeddings)?;
            let x = rectflow::generate(&self.generator.velocity, &x0, &cond.detach(), &self.cfg.sampler, None)?;
            let states: Vec<[f64; STATE_DIM]> = nn::rows(&x)?
                .into_iter()
                .map(|r| [r[0], r[1], r[2], r[3]])
                .collect();
            let windows = states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let paired = Paired {
                        window: tb.real.window(i),
                        signs: tb.samples[i].signs,
                    };
                    decode_sample(&[[s[0], s[1]], [s[2], s[3]]], &tb.pca, self.cfg.generator.sign_policy, Some(paired))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut windows = WindowBatch::from_windows(&windows, self.input_len, self.horizon, SplitKind::Generated)?;
            windows.starts = tb.real.starts.clone();
            buffers.push(Buffer {
                x0,
                states,
                windows,
                providers,
            });
        }
        self.buffers = buffers;
        Ok(())
    }

    /// Differentiable selected-sample loss for batch `k`.
    fn selected_loss(&self, k: usize, selected: &[usize], frozen: bool) -> Result<Option<Tensor>> {
        if selected.is_empty() {
            return Ok(None);
        }
        let model = self.forecaster.as_ref();
        if frozen {
            return Ok(Some(forecast::batch_loss(model, &self.buffers[k].windows.select(selected))?));
        }
        let tb = &self.batches[k];
        let (cond, _) = self.generator.gate.route(&tb.gate_inputs, &tb.embeddings)?;
        let x = rectflow::generate(
            &self.generator.velocity,
            &self.buffers[k].x0,
            &cond,
            &self.cfg.sampler,
            self.cfg.generator.grad_last_steps,
        )?;
        let windows = tb.decoder.decode(&x, &tb.proj_signs, &tb.value_signs)?;
        let idx = Tensor::new(selected.iter().map(|&i| i as u32).collect::<Vec<_>>(), &nn::device())?;
        let windows = windows.index_select(&idx, 0)?;
        let inputs = windows.narrow(1, 0, self.input_len)?;
        let targets = windows.narrow(1, self.input_len, self.horizon)?;
        Ok(Some(nn::mse(&model.forward(&inputs)?, &targets)?))
    }

    /// `L_train + L_s` on batch `k` for the given selected rows, with the
    /// two terms as plain values.
    pub fn joint_loss(&self, k: usize, selected: &[usize], frozen: bool) -> Result<(Tensor, f64, Option<f64>)> {
        let tb = &self.batches[k];
        let l_train = nn::mse(&self.forecaster.forward(&tb.gate_inputs)?, &tb.targets)?;
        let train_value = nn::scalar(&l_train)?;
        match self.selected_loss(k, selected, frozen)? {
            Some(ls) => {
                let v = nn::scalar(&ls)?;
                Ok(((&l_train + &ls)?, train_value, Some(v)))
            }
            None => Ok((l_train, train_value, None)),
        }
    }

    /// One pass of the joint loop. Divergence aborts the epoch and is
    /// recorded in the returned log.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        if self.theta_opt.is_none() {
            return Err(Error::contract("warm-up must run before the first epoch"));
        }
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        match self.epoch_body(epoch, &mut log) {
            Ok(()) => {}
            Err(Error::Divergence { step, detail }) => {
                warn!("epoch {epoch} aborted: divergence at step {step}: {detail}");
                log.aborted = Some(format!("divergence at step {step}: {detail}"));
            }
            Err(e) => return Err(e),
        }
        log.ema = self.reward.ema;
        log.val_mse = forecast::mean_mse(self.forecaster.as_ref(), &self.val_full)?;
        self.history.push(log.clone());
        Ok(log)
    }

    fn epoch_body(&mut self, epoch: usize, log: &mut EpochLog) -> Result<()> {
        let frozen = self.frozen(epoch);
        if !frozen {
            log.rf_loss = self.train_generator(epoch)?;
            self.regenerate(epoch)?;
        }
        let model = self.forecaster.as_ref();
        self.l_e = self
            .buffers
            .iter()
            .map(|b| forecast::per_sample_mse(model, &b.windows))
            .collect::<Result<_>>()?;
        let generated: usize = self.buffers.iter().map(|b| b.windows.len()).sum();
        log.generated = generated;
        log.l_e_mean = self.l_e.iter().flatten().sum::<f64>() / generated as f64;

        let mut drop_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, &[epoch as u64, 30]));
        let mut mask_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, &[epoch as u64, 31]));
        let use_selector = self.mode != Mode::Dad4tsNoSelector;
        let n = self.batches.len() as f64;
        let mut prob_sum = 0.0;
        self.decisions.clear();
        for k in 0..self.batches.len() {
            let l_e = self.l_e[k].clone();
            let (probs, decision) = if use_selector {
                let probs = self.selector.probs_tensor(&self.buffers[k].windows, &l_e, Some(&mut drop_rng))?;
                let d = draw_mask(&probs.to_vec1::<f64>()?, &mut mask_rng);
                (Some(probs), d)
            } else {
                (None, SelectionDecision::all_selected(vec![1.0; l_e.len()]))
            };
            prob_sum += decision.probs.iter().sum::<f64>();
            let selected = decision.selected();
            log.selected += selected.len();

            let (total, l_train, l_s) = self.joint_loss(k, &selected, frozen)?;
            log.l_train_mean += l_train / n;
            log.l_s_mean += l_s.unwrap_or(0.0) / n;
            let mut grads = total.backward()?;
            self.theta_opt.as_mut().expect("checked above").step(&mut grads)?;
            if l_s.is_some() && !frozen {
                self.generator.opt.step(&mut grads)?;
            }

            if let Some(probs) = probs {
                let losses = val_half_losses(self.forecaster.as_ref(), &self.val_half, self.cfg.selector.val_half_batches)?;
                let r = self.reward.compute_reward(&losses, decision.mask_mean())?;
                log.reward_mean += r / n;
                selector_update(&mut self.phi_opt, &probs, &decision, r, &l_e)?;
            }
            self.decisions.push(decision);
        }
        log.mean_prob = prob_sum / generated as f64;
        log.selected_fraction = log.selected as f64 / generated as f64;
        debug!(
            "epoch {epoch}: rf {:.4} selected {}/{} l_s {:.4} l_train {:.4}",
            log.rf_loss, log.selected, log.generated, log.l_s_mean, log.l_train_mean
        );
        Ok(())
    }

    /// Warm-up plus up to `epochs` joint epochs with early stopping on the
    /// full validation split; the best forecaster parameters are restored.
    pub fn run(&mut self, epochs: usize) -> Result<Vec<EpochLog>> {
        self.warmup()?;
        let patience = self.cfg.forecaster_train.patience;
        let mut best = (f64::INFINITY, self.forecaster.params().snapshot()?);
        let mut since_best = 0;
        for epoch in 1..=epochs {
            let log = self.epoch(epoch)?;
            if log.val_mse < best.0 {
                best = (log.val_mse, self.forecaster.params().snapshot()?);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    break;
                }
            }
        }
        self.forecaster.params().restore(&best.1)?;
        Ok(self.history.clone())
    }
}
