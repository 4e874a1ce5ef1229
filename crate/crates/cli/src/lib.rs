//! Command implementations behind the `dad4ts` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dad4ts_core::metrics::{Mode, ResultCell};
use dad4ts_core::pipeline::run::SAMPLES_FILE;
use dad4ts_core::pipeline::{run_experiment, ExperimentConfig, ResultTable, RunOptions, SampleDump};
use log::info;

mod plot;

#[derive(Debug, Parser)]
#[command(name = "dad4ts", version, about = "Geometry-aware rectified-flow augmentation for short time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Sampler step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Guidance weight.
        #[arg(long = "guidance-w")]
        guidance_w: Option<f64>,
        /// Run only this mode.
        #[arg(long)]
        mode: Option<Mode>,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Merge result tables and recompute improvement statistics.
    Aggregate {
        /// Run directories, or results.csv / results.json files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// A .csv or .json file, or a directory receiving both.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Render diagnostic plots of a run's sample dump as SVG.
    Plot {
        /// Run directory or a cell directory holding samples.json.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    Kde,
    PcaScatter,
    SeriesOverlay,
}

pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Run {
            config,
            steps,
            guidance_w,
            mode,
            force,
        } => cmd_run(&config, steps, guidance_w, mode, force),
        Command::Aggregate { inputs, out, force } => cmd_aggregate(&inputs, &out, force),
        Command::Plot { run, kind, out, force } => cmd_plot(&run, kind, &out, force).map(|p| p.display().to_string()),
    }
}

/// Loads the config, applies overrides and runs it. Relative paths in the
/// config resolve against the config's directory.
pub fn cmd_run(config: &Path, steps: Option<usize>, guidance_w: Option<f64>, mode: Option<Mode>, force: bool) -> Result<String> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = steps {
        cfg.sampler.steps = s;
    }
    if let Some(w) = guidance_w {
        cfg.sampler.guidance_weight = w;
    }
    if let Some(m) = mode {
        cfg.modes = vec![m];
    }
    cfg.validate()?;
    let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
    let table = run_experiment(&cfg, &RunOptions { base_dir: base.clone(), force })?;
    let dir = if cfg.run_dir().is_absolute() { cfg.run_dir() } else { base.join(cfg.run_dir()) };
    info!("wrote {}", dir.display());
    Ok(format!("results in {}\n{}", dir.display(), summary(&table)))
}

fn read_cells(path: &Path) -> Result<Vec<ResultCell>> {
    let cells = if path.is_dir() {
        ResultTable::read(path).with_context(|| format!("no result table in {}", path.display()))?.cells
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ResultTable::from_csv(&text)?,
            Some("json") => serde_json::from_str::<ResultTable>(&text)?.cells,
            _ => bail!("{}: expected a run directory, .csv or .json", path.display()),
        }
    };
    Ok(cells)
}

pub fn cmd_aggregate(inputs: &[PathBuf], out: &Path, force: bool) -> Result<String> {
    let mut cells = Vec::new();
    for p in inputs {
        cells.extend(read_cells(p)?);
    }
    let table = ResultTable::with_required_baseline(cells)?;
    let ext = out.extension().and_then(|e| e.to_str());
    let targets: Vec<PathBuf> = match ext {
        Some("csv") | Some("json") => vec![out.to_path_buf()],
        _ => vec![out.join("results.csv"), out.join("results.json")],
    };
    if !force {
        if let Some(t) = targets.iter().find(|t| t.exists()) {
            bail!("{} already exists; pass --force to overwrite", t.display());
        }
    }
    match ext {
        Some("csv") => fs::write(out, table.to_csv()?)?,
        Some("json") => fs::write(out, serde_json::to_string_pretty(&table)? + "\n")?,
        _ => {
            fs::create_dir_all(out)?;
            table.write(out)?;
        }
    }
    Ok(summary(&table))
}

/// One line per mode with RMSE, DTW and pooled improvement statistics.
pub fn summary(table: &ResultTable) -> String {
    let mut s = String::new();
    for c in &table.comparisons {
        let _ = writeln!(
            s,
            "{:<20} rmse imp_rate {:6.2}% imp_mean {:+.2}% | dtw imp_rate {:6.2}% imp_mean {:+.2}% | avg imp_rate {:6.2}% imp_mean {:+.2}%",
            c.mode.as_str(),
            c.rmse.imp_rate,
            c.rmse.imp_mean,
            c.dtw.imp_rate,
            c.dtw.imp_mean,
            c.pooled.imp_rate,
            c.pooled.imp_mean
        );
    }
    s
}

/// Sample dump of a cell directory, or of the first cell of a run
/// directory (by name) that has one.
pub fn find_samples(run: &Path) -> Result<PathBuf> {
    let direct = run.join(SAMPLES_FILE);
    if direct.is_file() {
        return Ok(direct);
    }
    let cells = run.join("runs");
    let mut found: Vec<PathBuf> = match fs::read_dir(&cells) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path().join(SAMPLES_FILE)))
            .filter(|p| p.is_file())
            .collect(),
        Err(_) => Vec::new(),
    };
    found.sort();
    found
        .into_iter()
        .next()
        .with_context(|| format!("no sample dumps under {}; run a generator mode first", run.display()))
}

pub fn cmd_plot(run: &Path, kind: PlotKind, out: &Path, force: bool) -> Result<PathBuf> {
    let dump = SampleDump::read(&find_samples(run)?)?;
    if out.exists() && !force {
        bail!("{} already exists; pass --force to overwrite", out.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    match kind {
        PlotKind::Kde => plot::kde(&dump, out)?,
        PlotKind::PcaScatter => plot::pca_scatter(&dump, out)?,
        PlotKind::SeriesOverlay => plot::series_overlay(&dump, out)?,
    }
    Ok(out.to_path_buf())
}
