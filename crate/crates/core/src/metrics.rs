//! RMSE, DTW and improvement aggregation over result grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn rmse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::contract(format!(
            "rmse length mismatch: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    if y.is_empty() {
        return Err(Error::contract("rmse of empty sequences"));
    }
    let sse: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// Dynamic time warping with absolute-difference cost and unit steps
/// (diagonal, left, up). Returns the cumulative cost `D(n, m)`.
pub fn dtw(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    let (n, m) = (y.len(), y_hat.len());
    if n == 0 || m == 0 {
        return Err(Error::contract("dtw of empty sequence"));
    }
    // Two rolling rows of the cumulative cost matrix.
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    prev[0] = (y[0] - y_hat[0]).abs();
    for j in 1..m {
        prev[j] = (y[0] - y_hat[j]).abs() + prev[j - 1];
    }
    for yi in &y[1..] {
        cur[0] = (yi - y_hat[0]).abs() + prev[0];
        for j in 1..m {
            let best = prev[j - 1].min(cur[j - 1]).min(prev[j]);
            cur[j] = (yi - y_hat[j]).abs() + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Training regime a result was produced under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Gaussian,
    Dad4ts,
    Dad4tsOnce,
    Dad4tsNoSelector,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::Gaussian,
        Mode::Dad4ts,
        Mode::Dad4tsOnce,
        Mode::Dad4tsNoSelector,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Gaussian => "gaussian",
            Mode::Dad4ts => "dad4ts",
            Mode::Dad4tsOnce => "dad4ts_once",
            Mode::Dad4tsNoSelector => "dad4ts_no_selector",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Mode::Dad4ts | Mode::Dad4tsOnce | Mode::Dad4tsNoSelector)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown mode '{s}'")))
    }
}

/// One cell of the result grid. `horizon == 0` marks a horizon-averaged row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub dataset: String,
    pub forecaster: String,
    pub horizon: usize,
    pub mode: Mode,
    pub rmse: f64,
    pub dtw: f64,
}

impl ResultCell {
    fn key(&self) -> (&str, &str, usize) {
        (&self.dataset, &self.forecaster, self.horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub dataset: String,
    pub forecaster: String,
    pub horizon: usize,
    pub metric: String,
    pub baseline: f64,
    pub method: f64,
    pub delta_pct: f64,
}

/// Relative change of a method over a baseline across grid cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStats {
    /// Percentage of cells with a strictly negative change.
    pub imp_rate: f64,
    /// Mean change in percent across all cells.
    pub imp_mean: f64,
    pub cells: Vec<f64>,
}

pub fn delta_pct(baseline: f64, method: f64) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::contract("baseline cell is zero; relative change undefined"));
    }
    Ok(100.0 * (method - baseline) / baseline)
}

/// Per-cell Δ% = 100·(method − baseline)/baseline plus the improvement rate
/// (share of cells with Δ% < 0) and mean Δ%.
pub fn improvement_stats(baseline: &[f64], method: &[f64]) -> Result<ImprovementStats> {
    if baseline.len() != method.len() {
        return Err(Error::contract(format!(
            "grid shapes differ: {} vs {}",
            baseline.len(),
            method.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::contract("empty result grid"));
    }
    let cells = baseline
        .iter()
        .zip(method)
        .map(|(&b, &m)| delta_pct(b, m))
        .collect::<Result<Vec<_>>>()?;
    let n = cells.len() as f64;
    let improved = cells.iter().filter(|d| **d < 0.0).count() as f64;
    Ok(ImprovementStats {
        imp_rate: 100.0 * improved / n,
        imp_mean: cells.iter().sum::<f64>() / n,
        cells,
    })
}

/// Improvement of `mode` over baseline rows, matched by (dataset,
/// forecaster, horizon). Both RMSE and DTW cells are pooled in `pooled`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub mode: Mode,
    pub rmse: ImprovementStats,
    pub dtw: ImprovementStats,
    pub pooled: ImprovementStats,
    pub deltas: Vec<CellDelta>,
}

pub fn compare_to_baseline(cells: &[ResultCell], mode: Mode) -> Result<ModeComparison> {
    let mut method: Vec<&ResultCell> = cells
        .iter()
        .filter(|c| c.mode == mode && c.horizon != 0)
        .collect();
    method.sort_by(|a, b| a.key().cmp(&b.key()));
    if method.is_empty() {
        return Err(Error::contract(format!("no result cells for mode {mode}")));
    }
    let mut pairs = Vec::with_capacity(method.len());
    for m in method {
        let base = cells
            .iter()
            .find(|c| c.mode == Mode::Baseline && c.key() == m.key())
            .ok_or_else(|| {
                Error::contract(format!(
                    "missing baseline row for {}/{}/h{}",
                    m.dataset, m.forecaster, m.horizon
                ))
            })?;
        pairs.push((base, m));
    }
    let b_rmse: Vec<f64> = pairs.iter().map(|(b, _)| b.rmse).collect();
    let m_rmse: Vec<f64> = pairs.iter().map(|(_, m)| m.rmse).collect();
    let b_dtw: Vec<f64> = pairs.iter().map(|(b, _)| b.dtw).collect();
    let m_dtw: Vec<f64> = pairs.iter().map(|(_, m)| m.dtw).collect();
    let rmse = improvement_stats(&b_rmse, &m_rmse)?;
    let dtw = improvement_stats(&b_dtw, &m_dtw)?;
    let pooled = improvement_stats(
        &[b_rmse.clone(), b_dtw.clone()].concat(),
        &[m_rmse.clone(), m_dtw.clone()].concat(),
    )?;
    let mut deltas = Vec::with_capacity(pairs.len() * 2);
    for (i, (b, m)) in pairs.iter().enumerate() {
        for (metric, base, meth, d) in [
            ("rmse", b.rmse, m.rmse, rmse.cells[i]),
            ("dtw", b.dtw, m.dtw, dtw.cells[i]),
        ] {
            deltas.push(CellDelta {
                dataset: m.dataset.clone(),
                forecaster: m.forecaster.clone(),
                horizon: m.horizon,
                metric: metric.into(),
                baseline: base,
                method: meth,
                delta_pct: d,
            });
        }
    }
    Ok(ModeComparison {
        mode,
        rmse,
        dtw,
        pooled,
        deltas,
    })
}
