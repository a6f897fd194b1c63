//! TOML experiment configuration with named presets and dotted-key
//! overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, synthetic_toy, Dataset, Split};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::SampleOptions;
use crate::encoder::EncoderConfig;
use crate::random::substream;
use crate::schedules::ScheduleConfig;
use crate::trainer::{CbrRegime, ModelSpec, Pipeline, Precision, TrainConfig};
use crate::{Error, Result};

pub const PRESETS: [&str; 5] = ["smoke", "mnist-fixed", "mnist-adaptive", "cifar", "mnist-ae"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory. Falls back to the `CDIFF_DATA_ROOT` variable.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Cap on training images; `None` uses the whole split.
    #[serde(default)]
    pub train_samples: Option<usize>,
    #[serde(default)]
    pub test_samples: Option<usize>,
    /// Use the procedural corpus when dataset files are missing.
    #[serde(default)]
    pub synthetic_fallback: bool,
    /// Seed of the procedural corpus.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    /// Average transmit power per symbol.
    #[serde(default = "unit")]
    pub power: f64,
    /// Test SNR used after training.
    #[serde(default = "default_eval_snr")]
    pub eval_snr_db: f64,
}

fn unit() -> f64 {
    1.0
}

fn default_eval_snr() -> f64 {
    10.0
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            power: 1.0,
            eval_snr_db: default_eval_snr(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub snr_db: Vec<f64>,
    /// Test CBRs; empty means the trained heads.
    #[serde(default)]
    pub cbr: Vec<f64>,
    /// Mixing-coefficient cells in addition to the clean link.
    #[serde(default)]
    pub interference: Vec<Vec<f64>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub max_samples: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default)]
    pub sampler: SampleOptions,
    /// Fill the `wall_ms` column; off by default so reruns are byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eval_batch() -> usize {
    32
}

fn one() -> usize {
    1
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            snr_db: vec![-10.0, 0.0, 10.0, 20.0, 30.0],
            cbr: Vec::new(),
            interference: Vec::new(),
            seeds: default_seeds(),
            max_samples: Some(256),
            batch_size: default_eval_batch(),
            workers: 1,
            sampler: SampleOptions::default(),
            record_wall_time: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Save weights every this many epochs in addition to the end of
    /// training.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    pub trainer: TrainConfig,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub sweep: SweepConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let mnist = |trainer: TrainConfig, spec: ModelSpec, dir: &str| ExperimentConfig {
            pipeline: spec.pipeline,
            precision: spec.precision,
            schedule: spec.schedule,
            encoder: spec.encoder,
            denoiser: spec.denoiser,
            trainer,
            channel: ChannelSection::default(),
            sweep: SweepConfig::default(),
            data: DataConfig {
                source: DataSource::Mnist,
                root: None,
                train_samples: None,
                test_samples: None,
                synthetic_fallback: false,
                seed: 0,
            },
            output: OutputConfig {
                dir: PathBuf::from(dir),
                checkpoint_every: None,
            },
        };
        let cfg = match name {
            "smoke" => {
                let mut c = mnist(TrainConfig::smoke(0.3), ModelSpec::smoke(), "runs/smoke");
                c.data.train_samples = Some(2000);
                c.data.test_samples = Some(32);
                c.data.synthetic_fallback = true;
                c.trainer.batch_size = 32;
                c.trainer.max_steps = Some(200);
                c.sweep.max_samples = Some(32);
                c
            }
            "mnist-fixed" => mnist(TrainConfig::mnist_fixed(0.3), ModelSpec::mnist(), "runs/mnist-fixed"),
            "mnist-adaptive" => mnist(TrainConfig::mnist_adaptive(), ModelSpec::mnist(), "runs/mnist-adaptive"),
            "mnist-ae" => mnist(
                TrainConfig::mnist_fixed(0.3),
                ModelSpec {
                    pipeline: Pipeline::Ae,
                    ..ModelSpec::mnist()
                },
                "runs/mnist-ae",
            ),
            "cifar" => {
                let mut c = mnist(TrainConfig::cifar(0.4), ModelSpec::cifar(), "runs/cifar");
                c.data.source = DataSource::Cifar10;
                c
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key.path=value` overrides. Values are parsed as TOML, falling
    /// back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: ExperimentConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut encoder = self.encoder.clone();
        encoder.power = self.channel.power;
        ModelSpec {
            pipeline: self.pipeline,
            schedule: self.schedule,
            encoder,
            denoiser: self.denoiser.clone(),
            precision: self.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        let mut spec = self.model_spec();
        spec.encoder.cbrs = self.trainer.regime.cbrs();
        spec.validate()?;
        self.schedule.build()?;
        if !(self.channel.power > 0.0) {
            return Err(Error::Config("channel.power must be positive".into()));
        }
        if self.sweep.snr_db.is_empty() {
            return Err(Error::Config("sweep.snr_db grid is empty".into()));
        }
        if self.sweep.seeds.is_empty() || self.sweep.batch_size == 0 || self.sweep.workers == 0 {
            return Err(Error::Config("sweep needs seeds, a positive batch size and workers".into()));
        }
        Ok(())
    }

    fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(data::data_root)
    }

    /// Load a split, applying sample caps, the model's image size and
    /// channel count.
    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let cap = match split {
            Split::Train => self.data.train_samples,
            Split::Test => self.data.test_samples,
        };
        let loaded = match (self.data.source, self.data_root()) {
            (DataSource::Synthetic, _) => None,
            (DataSource::Mnist, Some(root)) => Some(data::load_mnist(&root, split)),
            (DataSource::Cifar10, Some(root)) => Some(data::load_cifar10(&root, split)),
            (_, None) => Some(Err(Error::Dataset(format!(
                "no dataset root: set data.root or {}",
                data::DATA_ROOT_ENV
            )))),
        };
        let ds = match loaded {
            Some(Ok(ds)) => ds,
            Some(Err(e)) if !(self.data.synthetic_fallback && e.is_data_error()) => return Err(e),
            _ => {
                let n = cap.unwrap_or(match split {
                    Split::Train => 2000,
                    Split::Test => 256,
                });
                let stream = match split {
                    Split::Train => 0,
                    Split::Test => 1,
                };
                synthetic_toy(n, split, &mut substream(self.data.seed, stream))?
            }
        };
        let ds = match cap {
            Some(n) => ds.take(n)?,
            None => ds,
        };
        let ds = ds.resized(self.encoder.image_size)?;
        match (ds.channels(), self.encoder.input_channels) {
            (a, b) if a == b => Ok(ds),
            (1, b) => Ok(Dataset {
                images: ds.images.repeat((1, b, 1, 1))?,
                ..ds
            }),
            (a, b) => Err(Error::Dataset(format!("dataset has {a} channels, model expects {b}"))),
        }
    }

    /// CBRs evaluated by the sweep.
    pub fn sweep_cbrs(&self) -> Vec<f64> {
        if self.sweep.cbr.is_empty() {
            self.trainer.regime.cbrs()
        } else {
            self.sweep.cbr.clone()
        }
    }

    pub fn regime_name(&self) -> &'static str {
        match self.trainer.regime {
            CbrRegime::Fixed { .. } => "fixed",
            CbrRegime::Adaptive { .. } => "adaptive",
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?}: {part} is not a section")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key {key:?} does not name a field")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn full_size_presets() {
        let fixed = ExperimentConfig::preset("mnist-fixed").unwrap();
        assert_eq!(fixed.trainer.regime, CbrRegime::Fixed { cbr: 0.3 });
        assert_eq!(fixed.trainer.epochs, 10);
        assert_eq!(fixed.trainer.lr, 1e-3);
        assert_eq!(fixed.schedule.steps, 200);
        let adaptive = ExperimentConfig::preset("mnist-adaptive").unwrap();
        assert_eq!(adaptive.trainer.regime.cbrs(), vec![0.2, 0.25, 0.3, 0.35, 0.4, 0.45]);
        assert_eq!(adaptive.trainer.epochs, 20);
        assert_eq!(ExperimentConfig::preset("cifar").unwrap().trainer.epochs, 50);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::preset("smoke").unwrap();
        let o = cfg
            .with_overrides(&["trainer.seed=7".into(), "output.dir=/tmp/x".into(), "sweep.snr_db=[0, 5]".into()])
            .unwrap();
        assert_eq!(o.trainer.seed, 7);
        assert_eq!(o.output.dir, PathBuf::from("/tmp/x"));
        assert_eq!(o.sweep.snr_db, vec![0.0, 5.0]);
        let err = cfg.with_overrides(&["trainer.sede=7".into()]).unwrap_err();
        assert!(err.to_string().contains("sede"), "{err}");
        assert!(cfg.with_overrides(&["sweep.snr_db=[]".into()]).is_err());
        assert!(cfg.with_overrides(&["noequals".into()]).is_err());
    }

    #[test]
    fn unknown_toml_keys_are_named() {
        let mut text = ExperimentConfig::preset("smoke").unwrap().to_toml_string().unwrap();
        text = text.replace("[encoder]", "[encoder]\nwidth = 3");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn synthetic_fallback_loads_resized_data() {
        let cfg = ExperimentConfig::preset("smoke")
            .unwrap()
            .with_overrides(&["data.root=\"/nonexistent\"".into(), "data.train_samples=10".into()])
            .unwrap();
        let ds = cfg.load_split(Split::Train).unwrap();
        assert_eq!(ds.images.dims(), &[10, 1, 16, 16]);
        let strict = cfg.with_overrides(&["data.synthetic_fallback=false".into()]).unwrap();
        assert!(strict.load_split(Split::Train).unwrap_err().is_data_error());
    }
}
