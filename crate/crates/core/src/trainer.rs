//! End-to-end training of the semantic encoder with the conditional denoiser
//! (and of the benchmark pipelines), evaluation through a simulated channel,
//! and EMA weight tracking.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{vae_loss_tensor, Autoencoder, Vae};
use crate::channel::{
    awgn, awgn_tensor, mix_interference, normalize_power_tensor, sigma2_from_snr, stochastic_mask, ChannelConfig,
    SemanticLatent,
};
use crate::data::{epoch_batches, Dataset};
use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::{forward_diffuse, sample, SampleOptions};
use crate::encoder::{adaptive_head_select, pad_and_reshape_tensor, Encoder, EncoderConfig};
use crate::metrics::{to_unit_range, BatchReport, MetricReport};
use crate::params::ParamStore;
use crate::random::{substream, SeededRng};
use crate::schedules::{DiffusionSchedule, ScheduleConfig};
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

pub const LIVE_WEIGHTS_FILE: &str = "model.safetensors";
pub const EMA_WEIGHTS_FILE: &str = "ema.safetensors";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Semantic encoder with the conditional diffusion decoder.
    #[default]
    Cdiff,
    /// Encoder with a matched transposed-convolution decoder.
    Ae,
    /// Variational encoder with a matched decoder.
    Vae,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Which CBR heads are trained and how the per-epoch head is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CbrRegime {
    Fixed { cbr: f64 },
    /// A uniformly drawn head per epoch.
    Adaptive { cbrs: Vec<f64> },
}

impl CbrRegime {
    pub fn cbrs(&self) -> Vec<f64> {
        match self {
            CbrRegime::Fixed { cbr } => vec![*cbr],
            CbrRegime::Adaptive { cbrs } => cbrs.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_snr_range")]
    pub snr_range_db: [f64; 2],
    pub regime: CbrRegime,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Fill the `wall_ms` log column with elapsed time. Off by default so logs
    /// are byte-identical across reruns.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Ramp the EMA decay as `min(decay, (1 + n) / (10 + n))` over the first
    /// updates so short runs are not dominated by the initial weights.
    #[serde(default = "default_true")]
    pub ema_warmup: bool,
}

fn default_true() -> bool {
    true
}

fn default_lr() -> f64 {
    1e-3
}

fn default_snr_range() -> [f64; 2] {
    [-10.0, 10.0]
}

fn default_ema_decay() -> f64 {
    0.995
}

impl TrainConfig {
    fn base(epochs: usize, batch_size: usize, regime: CbrRegime) -> Self {
        TrainConfig {
            lr: default_lr(),
            epochs,
            batch_size,
            snr_range_db: default_snr_range(),
            regime,
            ema_decay: default_ema_decay(),
            seed: 0,
            max_steps: None,
            record_wall_time: false,
            ema_warmup: true,
        }
    }

    pub fn mnist_fixed(cbr: f64) -> Self {
        Self::base(10, 64, CbrRegime::Fixed { cbr })
    }

    pub fn mnist_adaptive() -> Self {
        Self::base(
            20,
            64,
            CbrRegime::Adaptive {
                cbrs: crate::encoder::ADAPTIVE_CBRS.to_vec(),
            },
        )
    }

    pub fn cifar(cbr: f64) -> Self {
        Self::base(50, 64, CbrRegime::Fixed { cbr })
    }

    /// A few epochs of small batches for quick checks.
    pub fn smoke(cbr: f64) -> Self {
        Self::base(3, 16, CbrRegime::Fixed { cbr })
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("empty snr range [{lo}, {hi}]")));
        }
        let cbrs = self.regime.cbrs();
        if cbrs.is_empty() {
            return Err(Error::Config("regime lists no cbr".into()));
        }
        if let Some(c) = cbrs.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(Error::Config(format!("cbr {c} outside (0, 1)")));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("lr, epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }
}

/// Exponential moving average of the trainable parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(initial: BTreeMap<String, Tensor>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0, 1]")));
        }
        Ok(EmaState { decay, shadow: initial })
    }

    pub fn from_store(store: &ParamStore, decay: f64) -> Result<Self> {
        Self::new(store.trainable_snapshot()?, decay)
    }
}

/// `shadow ← decay · shadow + (1 − decay) · live`, per parameter.
pub fn ema_update(mut state: EmaState, live: &BTreeMap<String, Tensor>) -> Result<EmaState> {
    if live.len() != state.shadow.len() {
        return Err(Error::Shape(format!(
            "{} live tensors for {} shadow tensors",
            live.len(),
            state.shadow.len()
        )));
    }
    let d = state.decay;
    for (name, shadow) in state.shadow.iter_mut() {
        let cur = live
            .get(name)
            .ok_or_else(|| Error::Shape(format!("live parameters lack {name}")))?;
        if cur.dims() != shadow.dims() {
            return Err(Error::Shape(format!(
                "{name}: live {:?} vs shadow {:?}",
                cur.dims(),
                shadow.dims()
            )));
        }
        *shadow = shadow.affine(d, 0.0)?.add(&cur.detach().affine(1.0 - d, 0.0)?)?;
    }
    Ok(state)
}

/// Everything needed to rebuild a model: saved next to its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelSpec {
    /// MNIST-shaped model with the desk-scale denoiser.
    pub fn mnist() -> Self {
        ModelSpec {
            pipeline: Pipeline::Cdiff,
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::mnist(Vec::new()),
            denoiser: DenoiserConfig::desk(1),
            precision: Precision::F32,
        }
    }

    pub fn cifar() -> Self {
        ModelSpec {
            pipeline: Pipeline::Cdiff,
            schedule: ScheduleConfig::default(),
            encoder: EncoderConfig::cifar(Vec::new()),
            denoiser: DenoiserConfig::full(3),
            precision: Precision::F32,
        }
    }

    /// Narrow networks that train in minutes on one CPU core.
    pub fn tiny() -> Self {
        ModelSpec {
            denoiser: DenoiserConfig {
                base_dim: 8,
                dim_mults: vec![1, 2],
                ..DenoiserConfig::desk(1)
            },
            ..Self::mnist()
        }
    }

    /// Quick-run model: the tiny networks on 16 × 16 images.
    pub fn smoke() -> Self {
        Self::tiny().with_image_size(16)
    }

    pub fn with_image_size(mut self, size: usize) -> Self {
        self.encoder.image_size = size;
        self.denoiser.image_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.denoiser.validate()?;
        if self.encoder.image_dims()
            != (
                self.denoiser.image_channels,
                self.denoiser.image_size,
                self.denoiser.image_size,
            )
        {
            return Err(Error::Config("encoder and denoiser image shapes differ".into()));
        }
        let slots = self.encoder.input_dim();
        if let Some(c) = self.encoder.cbrs.iter().find(|&&c| self.encoder.latent_dim(c) > slots) {
            return Err(Error::Config(format!(
                "cbr {c} gives a latent longer than the {slots}-entry conditioning grid"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Networks {
    Cdiff { encoder: Encoder, denoiser: UNet },
    Ae(Autoencoder),
    Vae(Vae),
}

/// Test-time channel and decoding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub snr_db: f64,
    pub cbr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub sampler: SampleOptions,
    /// Mixing coefficients `[c_1, c_2, …]`; the primary latent is weighted by
    /// `c_1` and each interferer is another image of the same batch. Empty
    /// for a clean link.
    #[serde(default)]
    pub interference: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: BatchReport,
    pub per_sample: Vec<MetricReport>,
    /// Originals and reconstructions in `[0, 1]`.
    pub originals: Tensor,
    pub reconstructions: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    nets: Networks,
    schedule: DiffusionSchedule,
}

impl Model {
    /// Build with the given heads. Parameters are drawn from a stream of
    /// `seed` reserved for initialization.
    pub fn new(mut spec: ModelSpec, cbrs: &[f64], seed: u64) -> Result<Self> {
        spec.encoder.cbrs = cbrs.to_vec();
        spec.validate()?;
        let schedule = spec.schedule.build()?;
        let mut rng = substream(seed, INIT_STREAM);
        let mut store = ParamStore::new(spec.precision.dtype(), Device::Cpu);
        let nets = match spec.pipeline {
            Pipeline::Cdiff => Networks::Cdiff {
                encoder: Encoder::new(spec.encoder.clone(), &mut store, "encoder", &mut rng)?,
                denoiser: UNet::new(spec.denoiser.clone(), &mut store, "denoiser", &mut rng)?,
            },
            Pipeline::Ae => Networks::Ae(Autoencoder::new(spec.encoder.clone(), &mut store, &mut rng)?),
            Pipeline::Vae => Networks::Vae(Vae::new(spec.encoder.clone(), &mut store, &mut rng)?),
        };
        Ok(Model {
            spec,
            store,
            nets,
            schedule,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn cbrs(&self) -> &[f64] {
        &self.spec.encoder.cbrs
    }

    /// Training loss for a batch, with per-sample diffusion steps and
    /// channel SNRs. The AE and VAE pipelines ignore `steps`.
    pub fn loss<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        cbr: f64,
        steps: &[usize],
        snr_db: &[f64],
        rng: &mut R,
    ) -> Result<Tensor> {
        let power = self.spec.encoder.power;
        let sigma2: Vec<f64> = snr_db.iter().map(|s| sigma2_from_snr(*s, power)).collect();
        match &self.nets {
            Networks::Cdiff { encoder, denoiser } => {
                let latents = encoder.encode_tensor(x0, cbr, true)?;
                let received = awgn_tensor(&latents, &sigma2, rng)?;
                let cond = pad_and_reshape_tensor(&received, self.spec.encoder.image_dims())?;
                let diffused = forward_diffuse(x0, &cond, steps, &self.schedule, rng)?;
                let pred = denoiser.forward(&diffused.x_t, cond.data(), &diffused.steps)?;
                Ok(pred.sub(x0)?.sqr()?.mean_all()?)
            }
            Networks::Ae(ae) => {
                let latents = ae.encode_tensor(x0, cbr, true)?;
                let received = awgn_tensor(&latents, &sigma2, rng)?;
                let x_hat = ae.decoder.forward(&received, cbr, true)?;
                Ok(x_hat.sub(x0)?.sqr()?.mean_all()?)
            }
            Networks::Vae(vae) => {
                let (mu, log_var) = vae.heads(x0, cbr, true)?;
                let z = vae.sample_latents(&mu, &log_var, rng)?;
                let received = awgn_tensor(&z, &sigma2, rng)?;
                let x_hat = vae.decoder.forward(&received, cbr, true)?;
                vae_loss_tensor(x0, &x_hat, &mu, &log_var)
            }
        }
    }

    /// Power-normalized latents in evaluation mode. The VAE transmits its
    /// normalized mean.
    pub fn encode(&self, x0: &Tensor, cbr: f64) -> Result<Tensor> {
        match &self.nets {
            Networks::Cdiff { encoder, .. } => encoder.encode_tensor(x0, cbr, false),
            Networks::Ae(ae) => ae.encode_tensor(x0, cbr, false),
            Networks::Vae(vae) => {
                let (mu, _) = vae.heads(x0, cbr, false)?;
                normalize_power_tensor(&mu, self.spec.encoder.power)
            }
        }
    }

    /// The head used to serve a test CBR and the symbol keep-probability.
    /// Unregistered ratios are served by the smallest larger head with
    /// stochastic symbol dropping.
    pub fn serving_head(&self, cbr: f64) -> Result<(f64, Option<f64>)> {
        if self.spec.encoder.head_index(cbr).is_ok() {
            return Ok((cbr, None));
        }
        let trained = self.cbrs().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if cbr > trained {
            return Err(Error::CbrExceedsTrained {
                requested: cbr,
                trained,
            });
        }
        let head = self
            .cbrs()
            .iter()
            .copied()
            .filter(|&c| c >= cbr)
            .fold(f64::INFINITY, f64::min);
        Ok((head, Some(cbr)))
    }

    /// Encode, transmit over AWGN at `snr_db`, and decode a batch in
    /// `[-1, 1]`.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        x0: &Tensor,
        snr_db: f64,
        cbr: f64,
        sampler: SampleOptions,
        interference: &[f64],
        rng: &mut R,
    ) -> Result<Tensor> {
        let (head, masked_cbr) = self.serving_head(cbr)?;
        let power = self.spec.encoder.power;
        let channel = ChannelConfig::new(snr_db, power)?;
        let latents = self.encode(x0, head)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let len = latents.first().map_or(0, Vec::len);
        let batch = latents.len();
        let mut sent = Vec::with_capacity(batch);
        for values in latents {
            let mut latent = SemanticLatent::from_raw(values, head, power)?;
            if let Some(test_cbr) = masked_cbr {
                latent = stochastic_mask(&latent, test_cbr, head, rng)?;
            }
            sent.push(latent);
        }
        if interference.len() > batch {
            return Err(Error::InvalidArgument(format!(
                "{} mixing coefficients need at least as many images per batch, got {batch}",
                interference.len()
            )));
        }
        let mut received = Vec::with_capacity(batch * len);
        for i in 0..batch {
            let mut latent = sent[i].clone();
            if !interference.is_empty() {
                let others: Vec<SemanticLatent> =
                    (1..interference.len()).map(|k| sent[(i + k) % batch].clone()).collect();
                latent = mix_interference(&sent[i], &others, interference)?;
            }
            let dropped: Vec<bool> = sent[i].values().chunks_exact(2).map(|p| p[0] == 0.0 && p[1] == 0.0).collect();
            let noisy = awgn(&latent, &channel, rng).into_values();
            for (pair, drop) in noisy.chunks_exact(2).zip(&dropped) {
                if *drop {
                    received.extend([0.0, 0.0]);
                } else {
                    received.extend_from_slice(pair);
                }
            }
        }
        let received = Tensor::from_vec(received, (batch, len), x0.device())?.to_dtype(self.dtype())?;
        match &self.nets {
            Networks::Cdiff { denoiser, .. } => {
                let cond = pad_and_reshape_tensor(&received, self.spec.encoder.image_dims())?;
                sample(&cond, denoiser, &self.schedule, sampler, rng)
            }
            Networks::Ae(ae) => ae.decoder.forward(&received, head, false),
            Networks::Vae(vae) => vae.decoder.forward(&received, head, false),
        }
    }

    /// Reconstruct every image of `data` and score it in `[0, 1]`.
    pub fn evaluate(&self, data: &Dataset, settings: &EvalSettings) -> Result<EvalOutput> {
        if settings.batch_size == 0 || data.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs images and a positive batch size".into()));
        }
        let mut rng = crate::random::seeded(settings.seed);
        let mut originals = Vec::new();
        let mut recons = Vec::new();
        let n = data.len();
        for start in (0..n).step_by(settings.batch_size) {
            let len = settings.batch_size.min(n - start);
            let x0 = data.images.narrow(0, start, len)?.to_dtype(self.dtype())?;
            let x_hat = self.reconstruct(
                &x0,
                settings.snr_db,
                settings.cbr,
                settings.sampler,
                &settings.interference,
                &mut rng,
            )?;
            originals.push(to_unit_range(&x0)?.to_dtype(DType::F64)?);
            recons.push(to_unit_range(&x_hat)?.to_dtype(DType::F64)?);
        }
        let originals = Tensor::cat(&originals, 0)?;
        let reconstructions = Tensor::cat(&recons, 0)?;
        let (report, per_sample) = BatchReport::compute(&originals, &reconstructions)?;
        Ok(EvalOutput {
            report,
            per_sample,
            originals,
            reconstructions,
        })
    }

    /// Load weights saved by [`Trainer::save_weights`].
    pub fn load_weights(&self, dir: &Path, weights: WeightSet) -> Result<()> {
        let file = match weights {
            WeightSet::Live => LIVE_WEIGHTS_FILE,
            WeightSet::Ema => EMA_WEIGHTS_FILE,
        };
        self.store.load(dir.join(file))
    }
}

/// Which parameter values are loaded into the networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightSet {
    Live,
    Ema,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Mean SNR of the batch.
    pub snr_db: f64,
    pub cbr: f64,
    pub wall_ms: u64,
}

/// Weight sets observed by the most recent training step and evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Instrumentation {
    pub last_train: Option<WeightSet>,
    pub last_eval: Option<WeightSet>,
}

/// Per-sample diffusion steps, uniform over `1..=steps`.
pub fn draw_steps<R: Rng + ?Sized>(batch: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(1..=steps)).collect()
}

/// Per-sample training SNRs, uniform over `[lo, hi)` dB.
pub fn draw_snrs<R: Rng + ?Sized>(batch: usize, [lo, hi]: [f64; 2], rng: &mut R) -> Vec<f64> {
    (0..batch)
        .map(|_| if lo < hi { rng.random_range(lo..hi) } else { lo })
        .collect()
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: AdamW,
    ema: EmaState,
    rng: SeededRng,
    step: usize,
    epoch: usize,
    epoch_cbr: f64,
    active: WeightSet,
    instrumentation: Instrumentation,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, spec: ModelSpec) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(spec, &cfg.regime.cbrs(), cfg.seed)?;
        let opt = AdamW::new(
            model.store.trainable(),
            ParamsAdamW {
                lr: cfg.lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        let ema = EmaState::from_store(&model.store, cfg.ema_decay)?;
        let rng = substream(cfg.seed, TRAIN_STREAM);
        let epoch_cbr = cfg.regime.cbrs()[0];
        Ok(Trainer {
            cfg,
            model,
            opt,
            ema,
            rng,
            step: 0,
            epoch: 0,
            epoch_cbr,
            active: WeightSet::Live,
            instrumentation: Instrumentation::default(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn instrumentation(&self) -> Instrumentation {
        self.instrumentation
    }

    pub fn current_cbr(&self) -> f64 {
        self.epoch_cbr
    }

    /// Start a new epoch, drawing its CBR under the adaptive regime.
    pub fn begin_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        if let CbrRegime::Adaptive { cbrs } = &self.cfg.regime {
            self.epoch_cbr = adaptive_head_select(cbrs, &mut self.rng)?;
        }
        Ok(())
    }

    /// One optimizer step on a `(batch, C, H, W)` tensor in `[-1, 1]`.
    pub fn train_step(&mut self, batch: &Tensor) -> Result<LogRow> {
        debug_assert_eq!(self.active, WeightSet::Live);
        self.instrumentation.last_train = Some(self.active);
        let x0 = batch.to_dtype(self.model.dtype())?;
        let b = x0.dim(0)?;
        let steps_max = self.model.schedule.steps();
        let steps = draw_steps(b, steps_max, &mut self.rng);
        let snrs = draw_snrs(b, self.cfg.snr_range_db, &mut self.rng);
        let loss = self.model.loss(&x0, self.epoch_cbr, &steps, &snrs, &mut self.rng)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                loss: value,
                step: self.step + 1,
                t: steps[0],
                snr_db: snrs[0],
            });
        }
        self.opt.backward_step(&loss)?;
        let live = self.model.store.trainable_snapshot()?;
        let mut ema = std::mem::replace(&mut self.ema, EmaState::new(BTreeMap::new(), 0.0)?);
        ema.decay = self.ema_decay_now();
        self.ema = ema_update(ema, &live)?;
        self.step += 1;
        Ok(LogRow {
            step: self.step,
            epoch: self.epoch.max(1),
            loss: value,
            snr_db: snrs.iter().sum::<f64>() / b as f64,
            cbr: self.epoch_cbr,
            wall_ms: if self.cfg.record_wall_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Decay applied at the next update.
    pub fn ema_decay_now(&self) -> f64 {
        let n = self.step as f64;
        if self.cfg.ema_warmup {
            self.cfg.ema_decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.cfg.ema_decay
        }
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.step < m)
    }

    /// One pass over `data` in shuffled batches. Stops early if the step
    /// budget runs out.
    pub fn run_epoch(&mut self, data: &Dataset, on_row: &mut impl FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        self.begin_epoch()?;
        let mut rows = Vec::new();
        for idx in epoch_batches(data.len(), self.cfg.batch_size, &mut self.rng)? {
            if !self.budget_left() {
                break;
            }
            let row = self.train_step(&data.batch(&idx)?)?;
            on_row(&row)?;
            rows.push(row);
        }
        Ok(rows)
    }

    /// True while epochs and the step budget remain.
    pub fn has_work(&self) -> bool {
        self.epoch < self.cfg.epochs && self.budget_left()
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Train for the configured epochs, passing each log row to `on_row`.
    pub fn fit(&mut self, data: &Dataset, mut on_row: impl FnMut(&LogRow) -> Result<()>) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.has_work() {
            rows.extend(self.run_epoch(data, &mut on_row)?);
        }
        Ok(rows)
    }

    /// Run `f` with the EMA weights loaded, restoring live weights after.
    pub fn with_ema<T>(&mut self, f: impl FnOnce(&Model, WeightSet) -> Result<T>) -> Result<T> {
        let live = self.model.store.trainable_snapshot()?;
        self.model.store.load_trainable(&self.ema.shadow)?;
        self.active = WeightSet::Ema;
        let out = f(&self.model, self.active);
        self.model.store.load_trainable(&live)?;
        self.active = WeightSet::Live;
        out
    }

    /// Evaluate with EMA weights.
    pub fn evaluate(&mut self, data: &Dataset, settings: &EvalSettings) -> Result<EvalOutput> {
        let (out, used) = self.with_ema(|m, w| Ok((m.evaluate(data, settings)?, w)))?;
        self.instrumentation.last_eval = Some(used);
        Ok(out)
    }

    /// Write live and EMA weights (each with the live buffers) into `dir`.
    pub fn save_weights(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.store.save(dir.join(LIVE_WEIGHTS_FILE))?;
        let mut ema: HashMap<String, Tensor> = self.model.store.snapshot()?.into_iter().collect();
        for (k, v) in &self.ema.shadow {
            ema.insert(k.clone(), v.clone());
        }
        candle_core::safetensors::save(&ema, dir.join(EMA_WEIGHTS_FILE))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_toy, Split};
    use crate::random::seeded;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            batch_size: 4,
            epochs: 1,
            ..TrainConfig::smoke(0.3)
        }
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn ema_extremes_and_geometric_convergence() {
        let dev = Device::Cpu;
        let live: BTreeMap<String, Tensor> = [("p".to_string(), Tensor::new(&[2.0f64], &dev).unwrap())].into();
        let s0: BTreeMap<String, Tensor> = [("p".to_string(), Tensor::new(&[-1.0f64], &dev).unwrap())].into();
        let zero = ema_update(EmaState::new(s0.clone(), 0.0).unwrap(), &live).unwrap();
        assert_eq!(zero.shadow["p"].to_vec1::<f64>().unwrap(), vec![2.0]);
        let one = ema_update(EmaState::new(s0.clone(), 1.0).unwrap(), &live).unwrap();
        assert_eq!(one.shadow["p"].to_vec1::<f64>().unwrap(), vec![-1.0]);
        let mut st = EmaState::new(s0, 0.99).unwrap();
        for n in 1..=300 {
            st = ema_update(st, &live).unwrap();
            let err = (st.shadow["p"].to_vec1::<f64>().unwrap()[0] - 2.0).abs();
            assert!((err - 0.99f64.powi(n) * 3.0).abs() < 1e-12);
        }
        let bad: BTreeMap<String, Tensor> = [("p".to_string(), Tensor::new(&[1.0f64, 2.0], &dev).unwrap())].into();
        assert!(ema_update(st, &bad).is_err());
    }

    #[test]
    fn first_loss_is_zero_prediction_baseline() {
        let data = synthetic_toy(4, Split::Train, &mut seeded(0)).unwrap();
        let mut trainer = Trainer::new(tiny_cfg(1), ModelSpec::tiny()).unwrap();
        let row = trainer.train_step(&data.images).unwrap();
        let baseline = scalar(&data.images.sqr().unwrap().mean_all().unwrap());
        assert!((row.loss - baseline).abs() < 1e-5, "{} vs {baseline}", row.loss);
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let data = synthetic_toy(12, Split::Train, &mut seeded(0)).unwrap();
        let run = |seed| {
            let mut t = Trainer::new(tiny_cfg(seed), ModelSpec::tiny()).unwrap();
            t.fit(&data, |_| Ok(())).unwrap()
        };
        let a = run(3);
        assert_eq!(a.len(), 3);
        assert_eq!(a, run(3));
        assert_ne!(a, run(4));
    }

    #[test]
    fn eval_uses_ema_and_training_uses_live() {
        let data = synthetic_toy(4, Split::Test, &mut seeded(0)).unwrap();
        let spec = ModelSpec {
            pipeline: Pipeline::Ae,
            ..ModelSpec::tiny()
        };
        let mut trainer = Trainer::new(tiny_cfg(2), spec).unwrap();
        trainer.train_step(&data.images).unwrap();
        let before = trainer.model().store().trainable_snapshot().unwrap();
        let settings = EvalSettings {
            snr_db: 10.0,
            cbr: 0.3,
            batch_size: 4,
            seed: 0,
            sampler: SampleOptions::default(),
            interference: Vec::new(),
        };
        let out = trainer.evaluate(&data, &settings).unwrap();
        assert_eq!(out.per_sample.len(), 4);
        let inst = trainer.instrumentation();
        assert_eq!(inst.last_train, Some(WeightSet::Live));
        assert_eq!(inst.last_eval, Some(WeightSet::Ema));
        let after = trainer.model().store().trainable_snapshot().unwrap();
        for (k, v) in &before {
            assert_eq!(
                v.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
                after[k].flatten_all().unwrap().to_vec1::<f32>().unwrap()
            );
        }
    }

    #[test]
    fn adaptive_regime_draws_listed_heads() {
        let cfg = TrainConfig {
            regime: CbrRegime::Adaptive {
                cbrs: vec![0.2, 0.3],
            },
            ..tiny_cfg(0)
        };
        let mut trainer = Trainer::new(cfg, ModelSpec::tiny()).unwrap();
        let mut seen = Vec::new();
        for _ in 0..20 {
            trainer.begin_epoch().unwrap();
            seen.push(trainer.current_cbr());
        }
        assert!(seen.contains(&0.2) && seen.contains(&0.3));
        assert!(seen.iter().all(|c| *c == 0.2 || *c == 0.3));
    }

    #[test]
    fn serving_head_rules() {
        let model = Model::new(ModelSpec::tiny(), &[0.3, 0.45], 0).unwrap();
        assert_eq!(model.serving_head(0.3).unwrap(), (0.3, None));
        assert_eq!(model.serving_head(0.35).unwrap(), (0.45, Some(0.35)));
        assert!(matches!(model.serving_head(0.5), Err(Error::CbrExceedsTrained { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(tiny_cfg(0).validate().is_ok());
        let bad = TrainConfig {
            snr_range_db: [5.0, -5.0],
            ..tiny_cfg(0)
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            regime: CbrRegime::Fixed { cbr: 1.2 },
            ..tiny_cfg(0)
        };
        assert!(bad.validate().is_err());
        assert!(Model::new(ModelSpec::tiny(), &[0.6], 0).is_err());
    }

    #[test]
    fn pipelines_produce_finite_losses() {
        let x = synthetic_toy(2, Split::Train, &mut seeded(0)).unwrap().images;
        for pipeline in [Pipeline::Cdiff, Pipeline::Ae, Pipeline::Vae] {
            let spec = ModelSpec {
                pipeline,
                precision: Precision::F64,
                ..ModelSpec::tiny()
            };
            let model = Model::new(spec, &[0.25], 0).unwrap();
            let x0 = x.to_dtype(DType::F64).unwrap();
            let loss = model.loss(&x0, 0.25, &[10, 150], &[0.0, 5.0], &mut seeded(1)).unwrap();
            assert!(scalar(&loss).is_finite());
            let recon = model
                .reconstruct(&x0, 10.0, 0.2, SampleOptions::default(), &[0.8, 0.2], &mut seeded(2))
                .unwrap();
            assert_eq!(recon.dims(), x0.dims());
        }
    }
}
