//! Forecaster interface, four reference models and the shared training
//! protocol with early stopping.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::Mutex;

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{self, EncoderLayer, InitKind, LayerNorm, Linear, MultiHeadAttention, Optimizer, ParamSet};

/// A trainable point forecaster mapping `(B, input_len)` to `(B, horizon)`.
pub trait Forecaster {
    fn name(&self) -> &str;
    fn input_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn params(&self) -> &ParamSet;

    /// Differentiable forward pass.
    fn forward(&self, inputs: &Tensor) -> Result<Tensor>;

    fn reinitialize(&self, seed: u64) -> Result<()> {
        self.params().reinitialize(seed)
    }

    /// One optimizer step on MSE; returns the loss before the step.
    fn train_batch(&self, inputs: &Tensor, targets: &Tensor, opt: &mut Optimizer) -> Result<f64> {
        let loss = nn::mse(&self.forward(inputs)?, targets)?;
        let value = nn::scalar(&loss)?;
        let mut grads = loss.backward()?;
        opt.step(&mut grads)?;
        Ok(value)
    }
}

/// Anything that can produce forecasts for a batch of windows.
pub trait Predictor {
    fn horizon(&self) -> usize;
    fn predict(&self, batch: &WindowBatch) -> Result<Vec<Vec<f64>>>;
}

impl<T: Forecaster + ?Sized> Predictor for T {
    fn horizon(&self) -> usize {
        Forecaster::horizon(self)
    }

    fn predict(&self, batch: &WindowBatch) -> Result<Vec<Vec<f64>>> {
        check_shape(self, batch)?;
        nn::rows(&self.forward(&inputs_tensor(batch)?)?)
    }
}

fn check_shape<F: Forecaster + ?Sized>(model: &F, batch: &WindowBatch) -> Result<()> {
    if batch.input_len() != model.input_len() || batch.forecast_len() != model.horizon() {
        return Err(Error::contract(format!(
            "model expects {}→{}, batch is {}→{}",
            model.input_len(),
            model.horizon(),
            batch.input_len(),
            batch.forecast_len()
        )));
    }
    Ok(())
}

pub fn inputs_tensor(batch: &WindowBatch) -> Result<Tensor> {
    nn::tensor2(batch.inputs_flat(), batch.len(), batch.input_len())
}

pub fn targets_tensor(batch: &WindowBatch) -> Result<Tensor> {
    nn::tensor2(batch.targets_flat(), batch.len(), batch.forecast_len())
}

/// Differentiable mean MSE of the model over a batch.
pub fn batch_loss<F: Forecaster + ?Sized>(model: &F, batch: &WindowBatch) -> Result<Tensor> {
    check_shape(model, batch)?;
    nn::mse(&model.forward(&inputs_tensor(batch)?)?, &targets_tensor(batch)?)
}

/// Per-window MSE values.
pub fn per_sample_mse<F: Forecaster + ?Sized>(model: &F, batch: &WindowBatch) -> Result<Vec<f64>> {
    check_shape(model, batch)?;
    let pred = model.forward(&inputs_tensor(batch)?)?.detach();
    Ok(nn::mse_rows(&pred, &targets_tensor(batch)?)?.to_vec1::<f64>()?)
}

/// Mean MSE over every window (each window weighted equally).
pub fn mean_mse<P: Predictor + ?Sized>(model: &P, batch: &WindowBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty evaluation batch"));
    }
    let pred = model.predict(batch)?;
    let mut total = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let t = batch.target(i);
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// `x Wᵀ + b` from inputs straight to the horizon.
pub struct LinearForecaster {
    params: ParamSet,
    layer: Linear,
    input_len: usize,
    horizon: usize,
}

impl LinearForecaster {
    pub fn new(input_len: usize, horizon: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layer = Linear::new(&mut params, &mut rng, "linear", input_len, horizon)?;
        Ok(Self {
            params,
            layer,
            input_len,
            horizon,
        })
    }
}

impl Forecaster for LinearForecaster {
    fn name(&self) -> &str {
        "linear"
    }
    fn input_len(&self) -> usize {
        self.input_len
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        self.layer.forward(inputs)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Tanh,
    Gru,
}

struct RecurrentLayer {
    ih: Linear,
    hh: Linear,
}

/// Stacked Elman or GRU network read out from the last hidden state.
pub struct RecurrentForecaster {
    params: ParamSet,
    cell: Cell,
    layers: Vec<RecurrentLayer>,
    head: Linear,
    hidden: usize,
    input_len: usize,
    horizon: usize,
}

impl RecurrentForecaster {
    fn build(cell: Cell, input_len: usize, horizon: usize, hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gates = if cell == Cell::Gru { 3 } else { 1 };
        let layers = (0..depth)
            .map(|l| {
                let fan_in = if l == 0 { 1 } else { hidden };
                let bound = InitKind::Uniform(1.0 / (hidden as f64).sqrt());
                Ok(RecurrentLayer {
                    ih: Linear::with_init(&mut params, &mut rng, &format!("rnn{l}.ih"), fan_in, gates * hidden, bound, true)?,
                    hh: Linear::with_init(&mut params, &mut rng, &format!("rnn{l}.hh"), hidden, gates * hidden, bound, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut params, &mut rng, "rnn.head", hidden, horizon)?;
        Ok(Self {
            params,
            cell,
            layers,
            head,
            hidden,
            input_len,
            horizon,
        })
    }

    pub fn rnn(input_len: usize, horizon: usize, hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        Self::build(Cell::Tanh, input_len, horizon, hidden, depth, seed)
    }

    pub fn gru(input_len: usize, horizon: usize, hidden: usize, depth: usize, seed: u64) -> Result<Self> {
        Self::build(Cell::Gru, input_len, horizon, hidden, depth, seed)
    }

    fn step(&self, layer: &RecurrentLayer, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = layer.ih.forward(x)?;
        let gh = layer.hh.forward(h)?;
        match self.cell {
            Cell::Tanh => Ok((gi + gh)?.tanh()?),
            Cell::Gru => {
                let n = self.hidden;
                let r = nn::sigmoid(&(gi.narrow(1, 0, n)? + gh.narrow(1, 0, n)?)?)?;
                let z = nn::sigmoid(&(gi.narrow(1, n, n)? + gh.narrow(1, n, n)?)?)?;
                let cand = (gi.narrow(1, 2 * n, n)? + r.mul(&gh.narrow(1, 2 * n, n)?)?)?.tanh()?;
                Ok((cand.mul(&z.affine(-1.0, 1.0)?)? + z.mul(h)?)?)
            }
        }
    }
}

impl Forecaster for RecurrentForecaster {
    fn name(&self) -> &str {
        match self.cell {
            Cell::Tanh => "rnn",
            Cell::Gru => "gru",
        }
    }
    fn input_len(&self) -> usize {
        self.input_len
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let (b, len) = inputs.dims2()?;
        let zero = Tensor::zeros((b, self.hidden), nn::DTYPE, inputs.device())?;
        let mut state = vec![zero; self.layers.len()];
        for t in 0..len {
            let mut x = inputs.narrow(1, t, 1)?;
            for (l, layer) in self.layers.iter().enumerate() {
                state[l] = self.step(layer, &x, &state[l])?;
                x = state[l].clone();
            }
        }
        self.head.forward(state.last().expect("at least one layer"))
    }
}

/// Transformer encoder over input values, decoded by learned horizon
/// queries with cross-attention.
pub struct AttentionForecaster {
    params: ParamSet,
    token: Linear,
    encoder: Vec<EncoderLayer>,
    queries: candle_core::Var,
    cross: MultiHeadAttention,
    norm: LayerNorm,
    out: Linear,
    width: usize,
    input_len: usize,
    horizon: usize,
}

impl AttentionForecaster {
    pub fn new(input_len: usize, horizon: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        let heads = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let token = Linear::new(&mut p, &mut rng, "attn.token", 1, width)?;
        let encoder = (0..depth)
            .map(|i| EncoderLayer::new(&mut p, &mut rng, &format!("attn.enc{i}"), width, heads, 2 * width))
            .collect::<Result<Vec<_>>>()?;
        let queries = p.add("attn.queries", &[horizon, width], InitKind::Normal(0.02), &mut rng)?;
        let cross = MultiHeadAttention::new(&mut p, &mut rng, "attn.cross", width, heads)?;
        let norm = LayerNorm::new(&mut p, &mut rng, "attn.norm", width)?;
        let out = Linear::new(&mut p, &mut rng, "attn.out", width, 1)?;
        Ok(Self {
            params: p,
            token,
            encoder,
            queries,
            cross,
            norm,
            out,
            width,
            input_len,
            horizon,
        })
    }
}

impl Forecaster for AttentionForecaster {
    fn name(&self) -> &str {
        "attention"
    }
    fn input_len(&self) -> usize {
        self.input_len
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let (b, len) = inputs.dims2()?;
        let positions: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let pe = nn::sinusoidal_embedding(&positions, self.width)?.unsqueeze(0)?;
        let mut h = self.token.forward(&inputs.unsqueeze(2)?)?.broadcast_add(&pe)?;
        for layer in &self.encoder {
            h = layer.forward(&h, 0.0, None)?;
        }
        let q = self
            .queries
            .as_tensor()
            .unsqueeze(0)?
            .broadcast_as((b, self.horizon, self.width))?
            .contiguous()?;
        let d = self.norm.forward(&(&q + self.cross.forward(&q, &h)?)?)?;
        Ok(self.out.forward(&d)?.squeeze(D::Minus1)?)
    }
}

/// Built-in forecaster architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    Linear,
    Rnn,
    Gru,
    Attention,
}

impl ForecasterKind {
    pub const ALL: [ForecasterKind; 4] = [Self::Linear, Self::Rnn, Self::Gru, Self::Attention];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Rnn => "rnn",
            Self::Gru => "gru",
            Self::Attention => "attention",
        }
    }

    pub fn build(self, input_len: usize, horizon: usize, seed: u64) -> Result<Box<dyn Forecaster>> {
        Ok(match self {
            Self::Linear => Box::new(LinearForecaster::new(input_len, horizon, seed)?),
            Self::Rnn => Box::new(RecurrentForecaster::rnn(input_len, horizon, 64, 2, seed)?),
            Self::Gru => Box::new(RecurrentForecaster::gru(input_len, horizon, 64, 2, seed)?),
            Self::Attention => Box::new(AttentionForecaster::new(input_len, horizon, 64, 2, seed)?),
        })
    }
}

impl FromStr for ForecasterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Registry(format!("unknown forecaster '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.1,
            max_epochs: 100,
            patience: 10,
            batch_size: 4,
            seed: 2025,
        }
    }
}

impl TrainConfig {
    pub fn optimizer<F: Forecaster + ?Sized>(&self, model: &F) -> Result<Optimizer> {
        Optimizer::adamw(model.params().vars(), self.lr, self.weight_decay)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// One-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }
}

/// Shuffled mini-batches of `batch` row indices for one epoch.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

/// One pass over `train` in shuffled mini-batches; returns the mean batch loss.
pub fn train_epoch<F: Forecaster + ?Sized>(
    model: &F,
    train: &WindowBatch,
    opt: &mut Optimizer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_shape(model, train)?;
    let mut total = 0.0;
    let batches = shuffled_batches(train.len(), batch_size, rng);
    for rows in &batches {
        let b = train.select(rows);
        total += model.train_batch(&inputs_tensor(&b)?, &targets_tensor(&b)?, opt)?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains until the full-validation MSE stops improving for `patience`
/// epochs, then restores the best parameters.
pub fn train_with_early_stopping<F: Forecaster + ?Sized>(
    model: &F,
    train: &WindowBatch,
    val: &WindowBatch,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs non-empty train and val windows"));
    }
    let mut opt = cfg.optimizer(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut hist = TrainHistory {
        best_val: f64::INFINITY,
        ..Default::default()
    };
    let mut best = model.params().snapshot()?;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        hist.train_loss.push(train_epoch(model, train, &mut opt, cfg.batch_size, &mut rng)?);
        let v = mean_mse(model, val)?;
        hist.val_loss.push(v);
        if v < hist.best_val {
            hist.best_val = v;
            hist.best_epoch = epoch;
            best = model.params().snapshot()?;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.params().restore(&best)?;
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rmse: Vec<f64>,
    pub dtw: Vec<f64>,
    pub mean_rmse: f64,
    pub mean_dtw: f64,
}

/// Per-window RMSE and DTW of forecasts against targets, on the scale the
/// windows are given in.
pub fn evaluate_split<P: Predictor + ?Sized>(model: &P, windows: &WindowBatch, horizon: usize) -> Result<Evaluation> {
    if windows.forecast_len() != horizon || model.horizon() != horizon {
        return Err(Error::contract(format!(
            "horizon {horizon} does not match windows ({}) or model ({})",
            windows.forecast_len(),
            model.horizon()
        )));
    }
    if windows.is_empty() {
        return Err(Error::contract("no windows to evaluate"));
    }
    let pred = model.predict(windows)?;
    let mut rmse = Vec::with_capacity(pred.len());
    let mut dtw = Vec::with_capacity(pred.len());
    for (i, p) in pred.iter().enumerate() {
        rmse.push(metrics::rmse(windows.target(i), p)?);
        dtw.push(metrics::dtw(windows.target(i), p)?);
    }
    let n = pred.len() as f64;
    Ok(Evaluation {
        mean_rmse: rmse.iter().sum::<f64>() / n,
        mean_dtw: dtw.iter().sum::<f64>() / n,
        rmse,
        dtw,
    })
}

struct ExternalIo {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

#[derive(Serialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
enum Request<'a> {
    Fit {
        input_len: usize,
        horizon: usize,
        seed: u64,
        train: &'a [Vec<f64>],
        val: &'a [Vec<f64>],
    },
    Predict {
        inputs: &'a [Vec<f64>],
    },
}

#[derive(Deserialize)]
struct Reply {
    #[serde(default)]
    error: Option<String>,
    #[serde(default)]
    predictions: Option<Vec<Vec<f64>>>,
}

/// Forecaster living in a separate process that trains itself.
///
/// One JSON object per line in each direction. Requests are
/// `{"cmd":"fit","input_len":..,"horizon":..,"seed":..,"train":[[..]],"val":[[..]]}`
/// (windows are full input‖target rows) and `{"cmd":"predict","inputs":[[..]]}`.
/// Replies carry `predictions` for predict, and `error` on failure.
pub struct ExternalForecaster {
    name: String,
    command: Vec<String>,
    horizon: usize,
    io: Mutex<Option<ExternalIo>>,
}

impl ExternalForecaster {
    pub fn new(name: impl Into<String>, command: Vec<String>, horizon: usize) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::config("external forecaster needs a command"));
        }
        Ok(Self {
            name: name.into(),
            command,
            horizon,
            io: Mutex::new(None),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn call(&self, req: &Request<'_>) -> Result<Reply> {
        let mut guard = self.io.lock().expect("forecaster lock poisoned");
        if guard.is_none() {
            let mut child = Command::new(&self.command[0])
                .args(&self.command[1..])
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()
                .map_err(|e| Error::External(format!("cannot start '{}': {e}", self.command[0])))?;
            *guard = Some(ExternalIo {
                stdin: child.stdin.take().expect("piped stdin"),
                stdout: BufReader::new(child.stdout.take().expect("piped stdout")),
                _child: child,
            });
        }
        let io = guard.as_mut().expect("spawned");
        let wire = |e: std::io::Error| Error::External(format!("forecaster '{}': {e}", self.name));
        writeln!(io.stdin, "{}", serde_json::to_string(req)?).map_err(wire)?;
        io.stdin.flush().map_err(wire)?;
        let mut line = String::new();
        io.stdout.read_line(&mut line).map_err(wire)?;
        let reply: Reply = serde_json::from_str(&line)
            .map_err(|e| Error::External(format!("forecaster '{}' sent bad reply: {e}", self.name)))?;
        if let Some(msg) = reply.error {
            return Err(Error::External(format!("forecaster '{}': {msg}", self.name)));
        }
        Ok(reply)
    }

    pub fn fit(&self, train: &WindowBatch, val: &WindowBatch, seed: u64) -> Result<()> {
        let rows = |b: &WindowBatch| b.windows().map(|w| w.to_vec()).collect::<Vec<_>>();
        self.call(&Request::Fit {
            input_len: train.input_len(),
            horizon: self.horizon,
            seed,
            train: &rows(train),
            val: &rows(val),
        })?;
        Ok(())
    }
}

impl Predictor for ExternalForecaster {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict(&self, batch: &WindowBatch) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<Vec<f64>> = (0..batch.len()).map(|i| batch.input(i).to_vec()).collect();
        let pred = self
            .call(&Request::Predict { inputs: &inputs })?
            .predictions
            .ok_or_else(|| Error::External(format!("forecaster '{}' returned no predictions", self.name)))?;
        if pred.len() != batch.len() || pred.iter().any(|p| p.len() != self.horizon || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::External(format!("forecaster '{}' returned malformed predictions", self.name)));
        }
        Ok(pred)
    }
}
