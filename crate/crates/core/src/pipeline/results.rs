//! Result grid with horizon-averaged rows and improvement statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{compare_to_baseline, Mode, ModeComparison, ResultCell};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Per-horizon cells followed by horizon-averaged rows (`horizon == 0`).
    pub cells: Vec<ResultCell>,
    /// One entry per mode present, baseline included, when baseline rows
    /// are present.
    pub comparisons: Vec<ModeComparison>,
}

fn sort_key(c: &ResultCell) -> (String, String, usize, usize) {
    let mode_rank = Mode::ALL.iter().position(|m| *m == c.mode).unwrap_or(usize::MAX);
    (c.dataset.clone(), c.forecaster.clone(), mode_rank, c.horizon)
}

impl ResultTable {
    /// Builds the table from per-horizon cells (averaged rows are
    /// recomputed; any given averaged rows are ignored).
    pub fn from_cells(cells: impl IntoIterator<Item = ResultCell>) -> Result<Self> {
        let mut cells: Vec<ResultCell> = cells.into_iter().filter(|c| c.horizon != 0).collect();
        cells.sort_by_key(sort_key);
        for w in cells.windows(2) {
            if sort_key(&w[0]) == sort_key(&w[1]) {
                return Err(Error::contract(format!(
                    "duplicate result cell {}/{}/{}/h{}",
                    w[0].dataset, w[0].forecaster, w[0].mode, w[0].horizon
                )));
            }
        }
        let mut averages: Vec<ResultCell> = Vec::new();
        for c in &cells {
            match averages
                .iter_mut()
                .find(|a| a.dataset == c.dataset && a.forecaster == c.forecaster && a.mode == c.mode)
            {
                Some(a) => {
                    a.rmse += c.rmse;
                    a.dtw += c.dtw;
                    a.horizon += 1;
                }
                None => averages.push(ResultCell { horizon: 1, ..c.clone() }),
            }
        }
        for a in &mut averages {
            a.rmse /= a.horizon as f64;
            a.dtw /= a.horizon as f64;
            a.horizon = 0;
        }
        let has_baseline = cells.iter().any(|c| c.mode == Mode::Baseline);
        let mut comparisons = Vec::new();
        if has_baseline {
            for mode in Mode::ALL {
                if cells.iter().any(|c| c.mode == mode) {
                    comparisons.push(compare_to_baseline(&cells, mode)?);
                }
            }
        }
        cells.extend(averages);
        Ok(Self { cells, comparisons })
    }

    /// Like [`ResultTable::from_cells`] but every non-baseline mode must
    /// have baseline rows.
    pub fn with_required_baseline(cells: impl IntoIterator<Item = ResultCell>) -> Result<Self> {
        let cells: Vec<ResultCell> = cells.into_iter().collect();
        if !cells.iter().any(|c| c.mode == Mode::Baseline && c.horizon != 0) {
            return Err(Error::contract("no baseline rows to compare against"));
        }
        Self::from_cells(cells)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.cells {
            w.serialize(c).map_err(|e| Error::contract(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<ResultCell>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize()
            .map(|row| row.map_err(|e| Error::contract(format!("bad result row: {e}"))))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("results.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("results.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("results.json"))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn comparison(&self, mode: Mode) -> Option<&ModeComparison> {
        self.comparisons.iter().find(|c| c.mode == mode)
    }
}
