//! Series ingestion, chronological splitting, sliding windows and the
//! STL + Gaussian baseline augmentation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A raw univariate series in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub frequency: String,
    /// Seasonal period, when known.
    pub period: Option<usize>,
    values: Vec<f64>,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        values: Vec<f64>,
        frequency: impl Into<String>,
        period: Option<usize>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("time series must not be empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            name: name.into(),
            frequency: frequency.into(),
            period,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Metadata accompanying a series file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    #[serde(default)]
    pub frequency: String,
    #[serde(default)]
    pub period: Option<usize>,
    /// Column holding the values. When absent the last column is used and a
    /// non-numeric first record is treated as a header.
    #[serde(default)]
    pub column: Option<String>,
}

/// Reads one numeric column from a CSV file, in file order.
pub fn load_series(path: impl AsRef<Path>, meta: &DatasetMeta) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let ingest = |line: usize, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingest(0, e.to_string()))?;

    let mut values = Vec::new();
    let mut column: Option<usize> = None;
    let mut first = true;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            ingest(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if first {
            first = false;
            match &meta.column {
                Some(name) => {
                    let idx = record.iter().position(|f| f == name).ok_or_else(|| {
                        ingest(line, format!("header does not contain column '{name}'"))
                    })?;
                    column = Some(idx);
                    continue;
                }
                None => {
                    let idx = record.len() - 1;
                    column = Some(idx);
                    if record[idx].parse::<f64>().is_err() {
                        continue;
                    }
                }
            }
        }
        let idx = column.expect("column resolved on first record");
        let field = record
            .get(idx)
            .ok_or_else(|| ingest(line, format!("record has no field {idx}")))?;
        let value: f64 = field
            .parse()
            .map_err(|_| ingest(line, format!("non-numeric value '{field}'")))?;
        if !value.is_finite() {
            return Err(ingest(line, format!("non-finite value '{field}'")));
        }
        values.push(value);
    }
    if values.is_empty() {
        return Err(ingest(0, "file contains no numeric records".into()));
    }
    TimeSeriesDataset::new(meta.name.clone(), values, meta.frequency.clone(), meta.period)
}

/// Chronological 6:2:2 split normalized with train statistics.
///
/// `val` and `test` carry an `input_len`-point prefix copied from the
/// points immediately preceding them, so the first window of each split can
/// be formed without reaching into the future. Metrics never see the prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
    pub input_len: usize,
}

impl SplitDataset {
    /// Validation points without the backward prefix.
    pub fn val_points(&self) -> &[f64] {
        &self.val[self.input_len..]
    }

    pub fn test_points(&self) -> &[f64] {
        &self.test[self.input_len..]
    }

    /// Latter half of the validation split, extended backward by `input_len`.
    pub fn val_half(&self) -> &[f64] {
        let n = self.val.len() - self.input_len;
        let start = n / 2;
        &self.val[start..]
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.norm_std + self.norm_mean
    }
}

/// Sizes of the train/val/test partitions for a series of length `n`.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 6 / 10;
    let val = n * 2 / 10;
    (train, val, n - train - val)
}

pub(crate) fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn split_normalize(ds: &TimeSeriesDataset, input_len: usize) -> Result<SplitDataset> {
    if input_len == 0 {
        return Err(Error::config("input_len must be positive"));
    }
    let n = ds.len();
    let (n_train, n_val, n_test) = split_sizes(n);
    if n_train < input_len + 1 || n_val == 0 || n_test == 0 {
        return Err(Error::config(format!(
            "series of length {n} is too short for input_len {input_len} (split {n_train}/{n_val}/{n_test})"
        )));
    }
    let values = ds.values();
    let (mean, std) = mean_std(&values[..n_train]);
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Err(Error::DegenerateSeries(format!(
            "train split of '{}' has zero standard deviation",
            ds.name
        )));
    }
    let norm: Vec<f64> = values.iter().map(|v| (v - mean) / std).collect();
    let val_start = n_train;
    let test_start = n_train + n_val;
    if val_start < input_len || test_start < input_len {
        return Err(Error::config("not enough history for the backward prefix"));
    }
    Ok(SplitDataset {
        train: norm[..n_train].to_vec(),
        val: norm[val_start - input_len..test_start].to_vec(),
        test: norm[test_start - input_len..].to_vec(),
        norm_mean: mean,
        norm_std: std,
        input_len,
    })
}

/// Which split a window was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    ValHalf,
    Test,
    Augmented,
    Generated,
}

/// A set of equal-length windows stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    data: Vec<f64>,
    input_len: usize,
    forecast_len: usize,
    pub split: SplitKind,
    /// Start index of each window within its source split.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    /// Builds a batch from explicit windows of length `input_len + forecast_len`.
    pub fn from_windows(
        windows: &[Vec<f64>],
        input_len: usize,
        forecast_len: usize,
        split: SplitKind,
    ) -> Result<Self> {
        let d = input_len + forecast_len;
        let mut data = Vec::with_capacity(windows.len() * d);
        for (i, w) in windows.iter().enumerate() {
            if w.len() != d {
                return Err(Error::contract(format!(
                    "window {i} has length {}, expected {d}",
                    w.len()
                )));
            }
            data.extend_from_slice(w);
        }
        Ok(Self {
            data,
            input_len,
            forecast_len,
            split,
            starts: (0..windows.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn forecast_len(&self) -> usize {
        self.forecast_len
    }

    pub fn window_len(&self) -> usize {
        self.input_len + self.forecast_len
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let d = self.window_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.window(i)[..self.input_len]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.window(i)[self.input_len..]
    }

    pub fn windows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.window_len())
    }

    /// All input segments, row-major `B × input_len`.
    pub fn inputs_flat(&self) -> Vec<f64> {
        self.windows()
            .flat_map(|w| w[..self.input_len].iter().copied())
            .collect()
    }

    /// All target segments, row-major `B × forecast_len`.
    pub fn targets_flat(&self) -> Vec<f64> {
        self.windows()
            .flat_map(|w| w[self.input_len..].iter().copied())
            .collect()
    }

    /// Sub-batch made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.window_len());
        for &r in rows {
            data.extend_from_slice(self.window(r));
        }
        Self {
            data,
            input_len: self.input_len,
            forecast_len: self.forecast_len,
            split: self.split,
            starts: rows.iter().map(|&r| self.starts[r]).collect(),
        }
    }

    /// Concatenates two batches with identical geometry.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.input_len != other.input_len || self.forecast_len != other.forecast_len {
            return Err(Error::contract("cannot concatenate windows of different shape"));
        }
        let mut out = self.clone();
        out.data.extend_from_slice(&other.data);
        out.starts.extend_from_slice(&other.starts);
        Ok(out)
    }
}

/// Every stride-1 window of `split` as one batch.
pub fn all_windows(
    split: &[f64],
    input_len: usize,
    forecast_len: usize,
    kind: SplitKind,
) -> Result<WindowBatch> {
    let d = input_len + forecast_len;
    if forecast_len == 0 || input_len == 0 {
        return Err(Error::config("input and forecast lengths must be positive"));
    }
    if split.len() < d {
        return Err(Error::EmptyStream(format!(
            "{kind:?} split of length {} is shorter than window length {d}",
            split.len()
        )));
    }
    let count = split.len() - d + 1;
    let mut data = Vec::with_capacity(count * d);
    for start in 0..count {
        data.extend_from_slice(&split[start..start + d]);
    }
    Ok(WindowBatch {
        data,
        input_len,
        forecast_len,
        split: kind,
        starts: (0..count).collect(),
    })
}

/// Stride-1 windows grouped into batches of `batch`.
///
/// A trailing batch with a single window is merged into the previous batch,
/// so every emitted batch holds at least two windows.
pub fn window_batches(
    split: &[f64],
    input_len: usize,
    forecast_len: usize,
    batch: usize,
    kind: SplitKind,
) -> Result<Vec<WindowBatch>> {
    if batch < 2 {
        return Err(Error::config("batch size must be at least 2"));
    }
    let all = all_windows(split, input_len, forecast_len, kind)?;
    let n = all.len();
    if n < 2 {
        return Err(Error::EmptyStream(format!(
            "{kind:?} split yields {n} window(s); at least 2 are needed per batch"
        )));
    }
    let mut bounds: Vec<(usize, usize)> = (0..n)
        .step_by(batch)
        .map(|s| (s, (s + batch).min(n)))
        .collect();
    if let Some(&(s, e)) = bounds.last() {
        if e - s < 2 {
            bounds.pop();
            bounds.last_mut().expect("n >= 2 implies an earlier batch").1 = e;
        }
    }
    Ok(bounds
        .into_iter()
        .map(|(s, e)| all.select(&(s..e).collect::<Vec<_>>()))
        .collect())
}

/// Additive seasonal-trend decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
}

/// Moving-average trend plus periodic-mean seasonal component.
///
/// The trend is a centered moving average (2×m for even periods); near the
/// ends the kernel is truncated and renormalized.
pub fn decompose(series: &[f64], period: usize) -> Result<Decomposition> {
    if period < 2 {
        return Err(Error::config("seasonal period must be at least 2"));
    }
    let n = series.len();
    if n < 2 * period {
        return Err(Error::config(format!(
            "series of length {n} is shorter than two periods ({period})"
        )));
    }
    let kernel: Vec<f64> = if period.is_multiple_of(2) {
        let mut k = vec![1.0; period + 1];
        k[0] = 0.5;
        k[period] = 0.5;
        k
    } else {
        vec![1.0; period]
    };
    let half = kernel.len() / 2;
    let trend: Vec<f64> = (0..n)
        .map(|i| {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (k, w) in kernel.iter().enumerate() {
                let j = i as isize + k as isize - half as isize;
                if j >= 0 && (j as usize) < n {
                    acc += w * series[j as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect();

    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for i in 0..n {
        sums[i % period] += series[i] - trend[i];
        counts[i % period] += 1;
    }
    let mut profile: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let centre = profile.iter().sum::<f64>() / period as f64;
    profile.iter_mut().for_each(|p| *p -= centre);

    let seasonal: Vec<f64> = (0..n).map(|i| profile[i % period]).collect();
    let residual = (0..n).map(|i| series[i] - trend[i] - seasonal[i]).collect();
    Ok(Decomposition {
        trend,
        seasonal,
        residual,
    })
}

/// Recombines trend and seasonal with Gaussian-perturbed residuals.
///
/// The noise standard deviation is `noise_scale` times the population
/// standard deviation of the residual.
pub fn stl_gaussian_augment(
    series: &[f64],
    period: Option<usize>,
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let period = period.ok_or_else(|| {
        Error::config("seasonal period is unknown for this dataset and was not supplied")
    })?;
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::config("noise_scale must be finite and non-negative"));
    }
    let dec = decompose(series, period)?;
    let (_, resid_std) = mean_std(&dec.residual);
    let sigma = noise_scale * resid_std;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Ok((0..series.len())
        .map(|i| {
            let eps = if sigma > 0.0 {
                sigma * normal.sample(&mut rng)
            } else {
                0.0
            };
            dec.trend[i] + dec.seasonal[i] + (dec.residual[i] + eps)
        })
        .collect())
}
