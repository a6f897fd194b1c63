//! Grid evaluation of a trained checkpoint.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use cdiff_core::channel::{sigma2_from_snr, sinr_db};
use cdiff_core::config::ExperimentConfig;
use cdiff_core::data::{Dataset, Split};
use cdiff_core::trainer::{EvalSettings, Model, WeightSet};
use cdiff_core::{Error, Result};

use crate::record::{format_coefficients, write_csv, ExperimentRecord};
use crate::{pipeline_name, source_name};

pub const SWEEP_CSV: &str = "sweep.csv";

/// One grid point. Cells are ordered seed, cbr, interference, snr.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub seed: u64,
    pub cbr: f64,
    pub interference: Vec<f64>,
    pub snr_db: f64,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let links: Vec<Vec<f64>> = std::iter::once(Vec::new())
        .chain(cfg.sweep.interference.iter().cloned())
        .collect();
    let mut out = Vec::new();
    for &seed in &cfg.sweep.seeds {
        for cbr in cfg.sweep_cbrs() {
            for link in &links {
                for &snr_db in &cfg.sweep.snr_db {
                    out.push(Cell {
                        seed,
                        cbr,
                        interference: link.clone(),
                        snr_db,
                    });
                }
            }
        }
    }
    out
}

fn cell_sinr(cell: &Cell, power: f64) -> Result<Option<f64>> {
    if cell.interference.is_empty() {
        return Ok(None);
    }
    sinr_db(&cell.interference, power, sigma2_from_snr(cell.snr_db, power)).map(Some)
}

/// Reject the grid before any evaluation runs.
pub fn validate(cfg: &ExperimentConfig, model: &Model) -> Result<Vec<Cell>> {
    let grid = cells(cfg);
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    for cbr in cfg.sweep_cbrs() {
        model.serving_head(cbr)?;
    }
    for cell in &grid {
        cell_sinr(cell, cfg.channel.power)?;
    }
    Ok(grid)
}

/// Build the checkpoint's model with its EMA weights.
pub fn load_model(cfg: &ExperimentConfig, dir: &Path) -> Result<Model> {
    let model = Model::new(cfg.model_spec(), &cfg.trainer.regime.cbrs(), cfg.trainer.seed)?;
    model.load_weights(dir, WeightSet::Ema)?;
    Ok(model)
}

pub fn test_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = cfg.load_split(Split::Test)?;
    match cfg.sweep.max_samples {
        Some(n) => data.take(n),
        None => Ok(data),
    }
}

fn evaluate_cell(cfg: &ExperimentConfig, model: &Model, data: &Dataset, cell: &Cell) -> Result<ExperimentRecord> {
    let started = Instant::now();
    let settings = EvalSettings {
        snr_db: cell.snr_db,
        cbr: cell.cbr,
        batch_size: cfg.sweep.batch_size,
        seed: cell.seed,
        sampler: cfg.sweep.sampler,
        interference: cell.interference.clone(),
    };
    let out = model.evaluate(data, &settings)?;
    let rec = ExperimentRecord {
        seed: cell.seed,
        dataset: source_name(data.source).into(),
        pipeline: pipeline_name(cfg.pipeline).into(),
        regime: cfg.regime_name().into(),
        cbr: cell.cbr,
        interference: format_coefficients(&cell.interference),
        snr_db: cell.snr_db,
        sinr_db: cell_sinr(cell, cfg.channel.power)?,
        psnr_mean: out.report.psnr.mean,
        psnr_std: out.report.psnr.std,
        ssim_mean: out.report.ssim.mean,
        ssim_std: out.report.ssim.std,
        samples: out.report.count,
        wall_ms: if cfg.sweep.record_wall_time {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    };
    if !rec.is_finite() {
        return Err(Error::DegenerateInput(format!("non-finite metrics in cell {cell:?}")));
    }
    Ok(rec)
}

/// Evaluate every cell on up to `sweep.workers` threads. Results come back
/// in cell order regardless of scheduling.
pub fn evaluate(cfg: &ExperimentConfig, model: &Model, data: &Dataset, grid: &[Cell]) -> Result<Vec<ExperimentRecord>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ExperimentRecord>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let workers = cfg.sweep.workers.min(grid.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= grid.len() {
                    break;
                }
                let rec = evaluate_cell(cfg, model, data, &grid[i]);
                let failed = rec.is_err();
                slots.lock().expect("worker panicked")[i] = Some(rec);
                if failed {
                    next.store(grid.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(grid.len());
    for slot in slots.into_inner().expect("worker panicked") {
        match slot {
            Some(rec) => out.push(rec?),
            None => return Err(Error::InvalidArgument("sweep stopped before every cell ran".into())),
        }
    }
    Ok(out)
}

/// Evaluate the grid of `cfg` on the checkpoint in `dir` and write `out`.
pub fn run(cfg: &ExperimentConfig, dir: &Path, out: &Path) -> anyhow::Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let model = load_model(cfg, dir)?;
    let grid = validate(cfg, &model)?;
    let data = test_split(cfg)?;
    let rows = evaluate(cfg, &model, &data, &grid)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(out, &rows)?;
    Ok(rows)
}
