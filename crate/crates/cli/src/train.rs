use std::path::{Path, PathBuf};

use cdiff_core::config::ExperimentConfig;
use cdiff_core::data::Split;
use cdiff_core::trainer::{LogRow, Trainer};

use crate::record::RowWriter;
use crate::CONFIG_ECHO;

pub const TRAIN_LOG: &str = "train_log.csv";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Train the configured pipeline and write the config echo, the log and
/// weights into `cfg.output.dir`.
pub fn run(cfg: &ExperimentConfig) -> anyhow::Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    let data = cfg.load_split(Split::Train)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_ECHO), cfg.to_toml_string()?)?;

    let mut trainer = Trainer::new(cfg.trainer.clone(), cfg.model_spec())?;
    let mut log = RowWriter::create(&dir.join(TRAIN_LOG))?;
    let mut last: Option<LogRow> = None;
    while trainer.has_work() {
        trainer.run_epoch(&data, &mut |row| {
            last = Some(*row);
            log.push(row).map_err(|e| cdiff_core::Error::Checkpoint(e.to_string()))
        })?;
        let epoch = trainer.epochs_done();
        if let Some(every) = cfg.output.checkpoint_every.filter(|&k| k > 0) {
            if epoch % every == 0 {
                let sub = checkpoint_dir(&dir, epoch);
                trainer.save_weights(&sub)?;
                std::fs::copy(dir.join(CONFIG_ECHO), sub.join(CONFIG_ECHO))?;
            }
        }
    }
    trainer.save_weights(&dir)?;
    Ok(TrainSummary {
        dir,
        steps: trainer.steps_taken(),
        epochs: trainer.epochs_done(),
        final_loss: last.map(|r| r.loss),
    })
}

pub fn checkpoint_dir(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch:04}"))
}
