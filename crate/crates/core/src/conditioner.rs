//! Conditioning vectors: embedding providers, a Top-1 mixture-of-experts
//! gate over them, and dropout to the null condition for guidance.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Arc, Mutex};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, Linear, ParamSet};

/// Width of every conditioning vector.
pub const COND_DIM: usize = 512;

/// Environment variable naming a directory where external provider outputs
/// are cached.
pub const PROVIDER_CACHE_ENV: &str = "DAD4TS_PROVIDER_CACHE";

pub const NULL_PROVIDER: &str = "null";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub vector: Vec<f64>,
    pub provider_id: String,
    pub is_null: bool,
}

impl Condition {
    pub fn null() -> Self {
        Self {
            vector: vec![0.0; COND_DIM],
            provider_id: NULL_PROVIDER.into(),
            is_null: true,
        }
    }
}

pub fn null_condition() -> Condition {
    Condition::null()
}

/// Maps a normalized input segment to a `COND_DIM` embedding.
pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, window: &[f64]) -> Result<Vec<f64>>;
}

/// Fixed seeded random projection of (window, lag-1 differences, mean, std).
pub struct BuiltinProvider {
    id: String,
    projection: Vec<f64>,
}

impl BuiltinProvider {
    pub fn new(id: impl Into<String>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (COND_DIM as f64).sqrt()).expect("valid std");
        let projection = (0..COND_DIM * COND_DIM).map(|_| normal.sample(&mut rng)).collect();
        Self {
            id: id.into(),
            projection,
        }
    }

    fn features(window: &[f64]) -> Vec<f64> {
        let n = window.len().max(1) as f64;
        let mean = window.iter().sum::<f64>() / n;
        let std = (window.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let mut f: Vec<f64> = window.to_vec();
        f.extend(window.windows(2).map(|w| w[1] - w[0]));
        f.push(mean);
        f.push(std);
        f.resize(COND_DIM, 0.0);
        f
    }
}

impl EmbeddingProvider for BuiltinProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, window: &[f64]) -> Result<Vec<f64>> {
        let f = Self::features(window);
        Ok(self
            .projection
            .chunks_exact(COND_DIM)
            .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect())
    }
}

struct ChildIo {
    _child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Embedding computed by a long-running external process.
///
/// Wire format, one request per line: the window values separated by
/// spaces; the process answers with one line of `COND_DIM` numbers.
pub struct ExternalProvider {
    id: String,
    command: Vec<String>,
    io: Mutex<Option<ChildIo>>,
    cache_dir: Option<PathBuf>,
}

impl ExternalProvider {
    pub fn new(id: impl Into<String>, command: Vec<String>) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::config("external provider needs a command"));
        }
        let cache_dir = std::env::var_os(PROVIDER_CACHE_ENV).map(PathBuf::from);
        Ok(Self {
            id: id.into(),
            command,
            io: Mutex::new(None),
            cache_dir,
        })
    }

    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    fn cache_path(&self, window: &[f64]) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        for x in window {
            h.update(x.to_le_bytes());
        }
        Some(dir.join(format!("{}.txt", hex::encode(h.finalize()))))
    }

    fn spawn(&self) -> Result<ChildIo> {
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::External(format!("cannot start '{}': {e}", self.command[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ChildIo {
            _child: child,
            stdin,
            stdout,
        })
    }

    fn request(&self, window: &[f64]) -> Result<Vec<f64>> {
        let mut guard = self.io.lock().expect("provider lock poisoned");
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let io = guard.as_mut().expect("spawned");
        let line: Vec<String> = window.iter().map(|x| format!("{x:e}")).collect();
        writeln!(io.stdin, "{}", line.join(" "))
            .and_then(|_| io.stdin.flush())
            .map_err(|e| Error::External(format!("provider '{}': {e}", self.id)))?;
        let mut reply = String::new();
        io.stdout
            .read_line(&mut reply)
            .map_err(|e| Error::External(format!("provider '{}': {e}", self.id)))?;
        parse_vector(&reply, COND_DIM)
            .map_err(|e| Error::External(format!("provider '{}': {e}", self.id)))
    }
}

pub(crate) fn parse_vector(line: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number '{t}'")))
        .collect::<std::result::Result<_, _>>()?;
    if v.len() != expected {
        return Err(format!("expected {expected} numbers, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err("non-finite value in reply".into());
    }
    Ok(v)
}

impl EmbeddingProvider for ExternalProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, window: &[f64]) -> Result<Vec<f64>> {
        let cache = self.cache_path(window);
        if let Some(path) = &cache {
            if let Ok(text) = std::fs::read_to_string(path) {
                if let Ok(v) = parse_vector(&text, COND_DIM) {
                    return Ok(v);
                }
            }
        }
        let v = self.request(window)?;
        if let Some(path) = &cache {
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            let text: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            std::fs::write(path, text.join(" "))?;
        }
        Ok(v)
    }
}

/// How a provider is declared in an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Builtin { id: String, seed: u64 },
    External { id: String, command: Vec<String> },
}

impl ProviderSpec {
    pub fn id(&self) -> &str {
        match self {
            ProviderSpec::Builtin { id, .. } | ProviderSpec::External { id, .. } => id,
        }
    }

    /// Three built-in experts standing in for the pretrained embedders.
    pub fn defaults() -> Vec<ProviderSpec> {
        (0..3)
            .map(|i| ProviderSpec::Builtin {
                id: format!("builtin-{i}"),
                seed: 0xC0DE + i,
            })
            .collect()
    }
}

/// Ordered registry of embedding providers keyed by id.
#[derive(Clone, Default)]
pub struct ProviderRegistry {
    providers: Vec<Arc<dyn EmbeddingProvider>>,
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[ProviderSpec]) -> Result<Self> {
        let mut reg = Self::new();
        for s in specs {
            let p: Arc<dyn EmbeddingProvider> = match s {
                ProviderSpec::Builtin { id, seed } => Arc::new(BuiltinProvider::new(id.clone(), *seed)),
                ProviderSpec::External { id, command } => {
                    Arc::new(ExternalProvider::new(id.clone(), command.clone())?)
                }
            };
            reg.register(p)?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, provider: Arc<dyn EmbeddingProvider>) -> Result<()> {
        if self.index_of(provider.id()).is_some() {
            return Err(Error::Registry(format!("provider '{}' registered twice", provider.id())));
        }
        self.providers.push(provider);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.providers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.providers.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.providers.iter().map(|p| p.id().to_string()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.providers.iter().position(|p| p.id() == id)
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn EmbeddingProvider>> {
        self.providers
            .iter()
            .find(|p| p.id() == id)
            .ok_or_else(|| Error::Registry(format!("unknown embedding provider '{id}'")))
    }

    pub fn embed(&self, window: &[f64], provider: &str) -> Result<Vec<f64>> {
        let v = self.get(provider)?.embed(window)?;
        if v.len() != COND_DIM || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Registry(format!(
                "provider '{provider}' returned an invalid embedding"
            )));
        }
        Ok(v)
    }

    pub fn provider(&self, index: usize) -> &Arc<dyn EmbeddingProvider> {
        &self.providers[index]
    }
}

/// Top-1 gate: Linear → ReLU → Linear over the normalized input segment.
pub struct Gate {
    hidden: Linear,
    out: Linear,
    params: ParamSet,
    n_providers: usize,
}

impl Gate {
    pub fn new(input_len: usize, n_providers: usize, hidden: usize, seed: u64) -> Result<Self> {
        if n_providers == 0 {
            return Err(Error::config("gate needs at least one provider"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = Linear::new(&mut params, &mut rng, "gate.hidden", input_len, hidden)?;
        let o = Linear::new(&mut params, &mut rng, "gate.out", hidden, n_providers)?;
        Ok(Self {
            hidden: h,
            out: o,
            params,
            n_providers,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn n_providers(&self) -> usize {
        self.n_providers
    }

    /// Pre-softmax scores, (B, L) → (B, n_providers).
    pub fn logits(&self, windows: &Tensor) -> Result<Tensor> {
        self.out.forward(&self.hidden.forward(windows)?.relu()?)
    }

    /// Softmax scores for one window.
    pub fn scores(&self, window: &[f64]) -> Result<Vec<f64>> {
        let x = nn::tensor2(window.to_vec(), 1, window.len())?;
        let s = nn::softmax_last(&self.logits(&x)?)?;
        Ok(nn::rows(&s)?.remove(0))
    }

    /// Conditioning vectors for a batch with a hard Top-1 route.
    ///
    /// `embeddings[k]` is the (B, COND_DIM) output of provider `k`. The
    /// selected embedding is multiplied by `p_k / stopgrad(p_k)`, which is
    /// exactly 1 in value and carries the gate gradient (straight-through).
    pub fn route(&self, windows: &Tensor, embeddings: &[Tensor]) -> Result<(Tensor, Vec<usize>)> {
        if embeddings.len() != self.n_providers {
            return Err(Error::contract("one embedding table per provider expected"));
        }
        let probs = nn::softmax_last(&self.logits(windows)?)?;
        let rows = nn::rows(&probs)?;
        let chosen: Vec<usize> = rows.iter().map(|r| argmax_first(r)).collect();
        let b = rows.len();
        let mut onehot = vec![0.0; b * self.n_providers];
        for (i, &k) in chosen.iter().enumerate() {
            onehot[i * self.n_providers + k] = 1.0;
        }
        let onehot = nn::tensor2(onehot, b, self.n_providers)?;
        let p_sel = probs.mul(&onehot)?.sum_keepdim(1)?;
        let scale = p_sel.div(&p_sel.detach())?;
        let mut selected = embeddings[0].broadcast_mul(&onehot.narrow(1, 0, 1)?)?;
        for (k, e) in embeddings.iter().enumerate().skip(1) {
            selected = (selected + e.broadcast_mul(&onehot.narrow(1, k, 1)?)?)?;
        }
        Ok((selected.broadcast_mul(&scale)?, chosen))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Top-1 routing of one window through the gate.
pub fn moe_gate(window: &[f64], gate: &Gate, providers: &ProviderRegistry) -> Result<Condition> {
    if providers.is_empty() {
        return Err(Error::config("no embedding providers registered"));
    }
    if providers.len() != gate.n_providers() {
        return Err(Error::config(format!(
            "gate routes over {} providers but {} are registered",
            gate.n_providers(),
            providers.len()
        )));
    }
    let k = argmax_first(&gate.scores(window)?);
    let id = providers.provider(k).id().to_string();
    Ok(Condition {
        vector: providers.embed(window, &id)?,
        provider_id: id,
        is_null: false,
    })
}

/// Replaces `c` with the null condition with probability `p`.
pub fn cfg_dropout(c: &Condition, p: f64, rng: &mut impl Rng) -> Condition {
    if p > 0.0 && rng.random::<f64>() < p {
        Condition::null()
    } else {
        c.clone()
    }
}

/// Embeddings of every window under every provider, computed once per run.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    /// `[provider][window]` → embedding.
    pub vectors: Vec<Vec<Vec<f64>>>,
}

impl EmbeddingTable {
    pub fn build(registry: &ProviderRegistry, inputs: &[&[f64]]) -> Result<Self> {
        let vectors = registry
            .ids()
            .iter()
            .map(|id| inputs.iter().map(|w| registry.embed(w, id)).collect())
            .collect::<Result<_>>()?;
        Ok(Self { vectors })
    }

    /// (B, COND_DIM) tensors of the given windows, one per provider.
    pub fn tensors(&self, rows: &[usize]) -> Result<Vec<Tensor>> {
        self.vectors
            .iter()
            .map(|table| {
                let data: Vec<f64> = rows.iter().flat_map(|&r| table[r].iter().copied()).collect();
                nn::tensor2(data, rows.len(), COND_DIM)
            })
            .collect()
    }
}
