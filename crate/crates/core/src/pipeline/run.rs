//! Experiment driver and on-disk artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{all_windows, split_normalize, stl_gaussian_augment, window_batches, SplitDataset, SplitKind, WindowBatch};
use crate::error::{Error, Result};
use crate::forecast::{self, evaluate_split, ExternalForecaster, ForecasterKind, TrainConfig};
use crate::geometry::flat_gram;
use crate::metrics::{Mode, ResultCell};
use crate::rectflow::{SamplerConfig, VelocityConfig};
use crate::selector::SelectorConfig;

use super::config::{ExperimentConfig, ForecasterSpec};
use super::dvrlg::{stream_seed, Dvrlg, EpochLog};
use super::results::ResultTable;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const SAMPLES_FILE: &str = "samples.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Base for relative dataset and output paths.
    pub base_dir: PathBuf,
    /// Replace an existing run directory.
    pub force: bool,
}

/// Real and generated windows of the final epoch with selector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub real: Vec<Vec<f64>>,
    pub generated: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub selected: Vec<bool>,
    /// Gram projections onto each batch's two principal components.
    pub real_z: Vec<[f64; 2]>,
    pub generated_z: Vec<[f64; 2]>,
}

impl SampleDump {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::contract(format!("cannot read sample dump {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub sampler: SamplerConfig,
    pub velocity: VelocityConfig,
    pub selector: SelectorConfig,
    /// Archive file per component, relative to the manifest.
    pub files: Vec<(String, String)>,
}

/// Windows of every split at one horizon.
pub struct CellData {
    pub train: WindowBatch,
    pub train_batches: Vec<WindowBatch>,
    pub val: WindowBatch,
    pub val_half: Vec<WindowBatch>,
    pub test: WindowBatch,
}

impl CellData {
    pub fn new(split: &SplitDataset, horizon: usize, batch_size: usize) -> Result<Self> {
        let l = split.input_len;
        Ok(Self {
            train: all_windows(&split.train, l, horizon, SplitKind::Train)?,
            train_batches: window_batches(&split.train, l, horizon, batch_size, SplitKind::Train)?,
            val: all_windows(&split.val, l, horizon, SplitKind::Val)?,
            val_half: window_batches(split.val_half(), l, horizon, batch_size, SplitKind::ValHalf)?,
            test: all_windows(&split.test, l, horizon, SplitKind::Test)?,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs every (forecaster, horizon, mode) cell and writes the run
/// directory. Configuration and data problems surface before anything is
/// written.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ResultTable> {
    cfg.validate()?;
    let ds = cfg.dataset.load(&opts.base_dir)?;
    let split = split_normalize(&ds, cfg.input_len)?;
    let data: Vec<CellData> = cfg
        .horizons
        .iter()
        .map(|&h| CellData::new(&split, h, cfg.batch_size))
        .collect::<Result<_>>()?;

    let dir = resolve(&opts.base_dir, &cfg.run_dir());
    if dir.exists() {
        if !opts.force {
            return Err(Error::config(format!(
                "run directory {} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(dir.join("runs"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut cells = Vec::new();
    for (fi, spec) in cfg.forecasters.iter().enumerate() {
        for (&h, d) in cfg.horizons.iter().zip(&data) {
            let seed = stream_seed(cfg.seed, &[fi as u64, h as u64]);
            for &mode in &cfg.modes {
                let cell_dir = dir.join("runs").join(format!("{}_h{h}_{mode}", spec.name()));
                fs::create_dir_all(&cell_dir)?;
                info!("{} h={h} {mode}", spec.name());
                let eval = run_cell(cfg, spec, mode, h, seed, d, &split, &cell_dir)?;
                cells.push(ResultCell {
                    dataset: cfg.dataset.name.clone(),
                    forecaster: spec.name().to_string(),
                    horizon: h,
                    mode,
                    rmse: eval.mean_rmse,
                    dtw: eval.mean_dtw,
                });
            }
        }
    }
    let table = ResultTable::from_cells(cells)?;
    table.write(&dir)?;
    Ok(table)
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
        ..cfg.forecaster_train
    }
}

/// Training windows for the real-data modes.
fn real_mode_train(cfg: &ExperimentConfig, mode: Mode, seed: u64, d: &CellData, split: &SplitDataset) -> Result<WindowBatch> {
    match mode {
        Mode::Baseline => Ok(d.train.clone()),
        Mode::Gaussian => {
            let aug = stl_gaussian_augment(&split.train, cfg.dataset.period, cfg.gaussian.noise_scale, seed)?;
            let aug = all_windows(&aug, split.input_len, d.train.forecast_len(), SplitKind::Augmented)?;
            d.train.concat(&aug)
        }
        _ => Err(Error::contract(format!("mode {mode} trains through the generator"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    spec: &ForecasterSpec,
    mode: Mode,
    horizon: usize,
    seed: u64,
    d: &CellData,
    split: &SplitDataset,
    dir: &Path,
) -> Result<forecast::Evaluation> {
    let kind: ForecasterKind = match spec {
        ForecasterSpec::Builtin(k) => *k,
        ForecasterSpec::External { name, command } => {
            let model = ExternalForecaster::new(name.clone(), command.clone(), horizon)?;
            model.fit(&real_mode_train(cfg, mode, seed, d, split)?, &d.val, seed)?;
            return evaluate_split(&model, &d.test, horizon);
        }
    };
    let model = kind.build(cfg.input_len, horizon, seed)?;
    if !mode.uses_generator() {
        let train = real_mode_train(cfg, mode, seed, d, split)?;
        let hist = forecast::train_with_early_stopping(model.as_ref(), &train, &d.val, &train_config(cfg, seed))?;
        write_json(&dir.join("history.json"), &hist)?;
        model.params().save(dir.join("forecaster.safetensors"))?;
        return evaluate_split(model.as_ref(), &d.test, horizon);
    }
    let mut cell_cfg = cfg.clone();
    cell_cfg.seed = seed;
    cell_cfg.forecaster_train = train_config(cfg, seed);
    let mut run = Dvrlg::new(&cell_cfg, mode, model, d.train_batches.clone(), d.val_half.clone(), d.val.clone())?;
    let logs = run.run(cfg.epochs)?;
    write_dvrlg_artifacts(&run, &logs, dir)?;
    evaluate_split(run.forecaster.as_ref(), &d.test, horizon)
}

/// Epoch log, checkpoints with manifest and the sample dump.
pub fn write_dvrlg_artifacts(run: &Dvrlg, logs: &[EpochLog], dir: &Path) -> Result<()> {
    write_json(&dir.join("epochs.json"), &logs)?;
    let parts = [
        ("forecaster", run.forecaster.params()),
        ("velocity", run.generator.velocity.params()),
        ("gate", run.generator.gate.params()),
        ("selector", run.selector.params()),
    ];
    let mut files = Vec::new();
    for (name, params) in parts {
        let file = format!("{name}.safetensors");
        params.save(dir.join(&file))?;
        files.push((name.to_string(), file));
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        sampler: run.sampler(),
        velocity: *run.generator.velocity.config(),
        selector: *run.selector.config(),
        files,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    write_json(&dir.join(SAMPLES_FILE), &sample_dump(run))
}

pub fn sample_dump(run: &Dvrlg) -> SampleDump {
    let mut dump = SampleDump {
        real: Vec::new(),
        generated: Vec::new(),
        probs: Vec::new(),
        selected: Vec::new(),
        real_z: Vec::new(),
        generated_z: Vec::new(),
    };
    for (k, tb) in run.batches.iter().enumerate() {
        for w in tb.real.windows() {
            dump.real.push(w.to_vec());
            dump.real_z.push(tb.pca.project(&flat_gram(w)));
        }
        if let Some(buf) = run.buffers.get(k) {
            for w in buf.windows.windows() {
                dump.generated.push(w.to_vec());
                dump.generated_z.push(tb.pca.project(&flat_gram(w)));
            }
        }
        if let Some(dec) = run.decisions.get(k) {
            dump.probs.extend(&dec.probs);
            dump.selected.extend(&dec.mask);
        }
    }
    dump
}

/// Reads a manifest and fills the given models' parameters from it.
pub fn load_checkpoint(dir: &Path, run: &Dvrlg) -> Result<CheckpointManifest> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::contract(format!("unsupported checkpoint version {}", manifest.version)));
    }
    for (name, file) in &manifest.files {
        let params = match name.as_str() {
            "forecaster" => run.forecaster.params(),
            "velocity" => run.generator.velocity.params(),
            "gate" => run.generator.gate.params(),
            "selector" => run.selector.params(),
            other => return Err(Error::contract(format!("unknown checkpoint component '{other}'"))),
        };
        params.load(dir.join(file))?;
    }
    Ok(manifest)
}
