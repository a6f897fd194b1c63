//! Consistency experiment on the linear-Gaussian toy.

use std::path::Path;

use cdiff_core::oracle::{consistency_experiment, median_by_n, ConsistencyConfig, ConsistencyRow, LinearGaussianToy};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct Row {
    n: usize,
    seed: u64,
    mse: f64,
    holdout_loss: f64,
    floor: f64,
}

impl From<&ConsistencyRow> for Row {
    fn from(r: &ConsistencyRow) -> Self {
        Row {
            n: r.n,
            seed: r.seed,
            mse: r.mse,
            holdout_loss: r.holdout_loss,
            floor: r.floor,
        }
    }
}

/// Run the experiment, write one row per `(n, seed)` to `out` and return
/// the median mse for each `n`.
pub fn run(cfg: &ConsistencyConfig, out: &Path) -> anyhow::Result<Vec<(usize, f64)>> {
    let rows = consistency_experiment(&LinearGaussianToy::default_2d(), cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let flat: Vec<Row> = rows.iter().map(Row::from).collect();
    crate::record::write_csv(out, &flat)?;
    Ok(median_by_n(&rows))
}
