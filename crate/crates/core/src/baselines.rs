//! Benchmark pipelines: an autoencoder whose decoder mirrors the encoder, and
//! a VAE variant with Gaussian latent heads.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::channel::{normalize_power, normalize_power_tensor, SemanticLatent};
use crate::encoder::{ConvTrunk, EncoderConfig};
use crate::nn::{BatchNorm2d, ConvTranspose2d, Linear};
use crate::params::ParamStore;
use crate::random::{gaussian_tensor, gaussian_vec};
use crate::{Error, Result};

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Transposed-convolution mirror of [`ConvTrunk`] with one input projection
/// per registered CBR.
#[derive(Debug, Clone)]
pub struct MatchedDecoder {
    cfg: EncoderConfig,
    inputs: Vec<Linear>,
    layers: Vec<ConvTranspose2d>,
    norms: Vec<Option<BatchNorm2d>>,
    device: Device,
}

impl MatchedDecoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let inputs = cfg
            .cbrs
            .iter()
            .enumerate()
            .map(|(i, &cbr)| {
                Linear::new(store, &format!("{prefix}.input.{i}"), cfg.latent_dim(cbr), cfg.feature_dim(), rng)
            })
            .collect::<Result<_>>()?;
        let n = cfg.conv_channels.len();
        let mut layers = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for (j, i) in (0..n).rev().enumerate() {
            let in_ch = cfg.conv_channels[i];
            let out_ch = if i == 0 { cfg.input_channels } else { cfg.conv_channels[i - 1] };
            let stride = cfg.conv_strides[i];
            layers.push(ConvTranspose2d::new(
                store,
                &format!("{prefix}.deconv.{j}"),
                in_ch,
                out_ch,
                3,
                stride,
                1,
                stride - 1,
                rng,
            )?);
            norms.push(if cfg.batch_norm && i > 0 {
                Some(BatchNorm2d::new(store, &format!("{prefix}.bn.{j}"), out_ch)?)
            } else {
                None
            });
        }
        Ok(MatchedDecoder {
            cfg,
            inputs,
            layers,
            norms,
            device: store.device().clone(),
        })
    }

    /// Decode `(batch, 2N_c)` latents produced by the `cbr` head into images
    /// in `[-1, 1]`.
    pub fn forward(&self, latents: &Tensor, cbr: f64, train: bool) -> Result<Tensor> {
        let idx = self.cfg.head_index(cbr)?;
        let (batch, len) = latents.dims2()?;
        let want = self.cfg.latent_dim(cbr);
        if len != want {
            return Err(Error::Shape(format!(
                "latent length {len} does not match the cbr {cbr} head ({want})"
            )));
        }
        let fs = self.cfg.feature_size();
        let top = *self.cfg.conv_channels.last().expect("validated nonempty");
        let mut h = self.inputs[idx].forward(latents)?.reshape((batch, top, fs, fs))?;
        let last = self.layers.len() - 1;
        for (j, (layer, norm)) in self.layers.iter().zip(&self.norms).enumerate() {
            h = layer.forward(&h)?;
            if j == last {
                h = h.tanh()?;
            } else {
                if let Some(bn) = norm {
                    h = bn.forward(&h, train)?;
                }
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Decode a single received latent to a `(C, H, W)` image.
    pub fn matched_decode(&self, latent: &SemanticLatent, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_vec(latent.values().to_vec(), (1, latent.len()), &self.device)?.to_dtype(dtype)?;
        Ok(self.forward(&t, latent.cbr(), false)?.squeeze(0)?)
    }
}

/// Deterministic encoder + matched decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub trunk: ConvTrunk,
    pub heads: Vec<Linear>,
    pub decoder: MatchedDecoder,
    cfg: EncoderConfig,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = ConvTrunk::new(&cfg, store, "encoder", rng)?;
        let heads = cfg
            .cbrs
            .iter()
            .enumerate()
            .map(|(i, &cbr)| Linear::new(store, &format!("encoder.head.{i}"), cfg.feature_dim(), cfg.latent_dim(cbr), rng))
            .collect::<Result<_>>()?;
        let decoder = MatchedDecoder::new(cfg.clone(), store, "decoder", rng)?;
        Ok(Autoencoder {
            trunk,
            heads,
            decoder,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encode_tensor(&self, x: &Tensor, cbr: f64, train: bool) -> Result<Tensor> {
        let raw = self.heads[self.cfg.head_index(cbr)?].forward(&self.trunk.forward(x, train)?)?;
        normalize_power_tensor(&raw, self.cfg.power)
    }
}

/// Mean and log-variance of a diagonal Gaussian latent.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeHead {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl VaeHead {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "mu has {} entries, log_var {}",
                mu.len(),
                log_var.len()
            )));
        }
        if log_var.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("log_var contains NaN".into()));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(VaeHead { mu, log_var })
    }

    /// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² - log σ² - 1)`.
    pub fn kl(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
            .sum::<f64>()
    }
}

/// `z = μ + exp(log σ² / 2) ⊙ ε`, then power-normalized.
pub fn vae_reparameterize<R: Rng + ?Sized>(
    head: &VaeHead,
    cbr: f64,
    power: f64,
    rng: &mut R,
) -> Result<SemanticLatent> {
    normalize_power(reparameterize_raw(head, rng), cbr, power)
}

/// The unnormalized reparameterized draw.
pub fn reparameterize_raw<R: Rng + ?Sized>(head: &VaeHead, rng: &mut R) -> Vec<f64> {
    let eps = gaussian_vec(head.mu.len(), rng);
    head.mu
        .iter()
        .zip(&head.log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect()
}

/// Batched KL term, summed over latent entries and averaged over the batch.
pub fn kl_tensor(mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let per = mu
        .sqr()?
        .add(&log_var.exp()?)?
        .sub(log_var)?
        .affine(0.5, -0.5)?
        .sum(1)?;
    Ok(per.mean_all()?)
}

/// Pixel MSE plus KL with equal weights.
pub fn vae_loss_tensor(x0: &Tensor, x_hat: &Tensor, mu: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    if x0.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x0.dims(), x_hat.dims())));
    }
    let mse = x0.sub(x_hat)?.sqr()?.mean_all()?;
    Ok(mse.add(&kl_tensor(mu, log_var)?)?)
}

pub fn vae_loss(x0: &Tensor, x_hat: &Tensor, head: &VaeHead) -> Result<f64> {
    if x0.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x0.dims(), x_hat.dims())));
    }
    let mse = x0
        .sub(x_hat)?
        .sqr()?
        .mean_all()?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    Ok(mse + head.kl())
}

/// VAE benchmark: shared trunk, parallel μ / log σ² heads per CBR, and a
/// matched decoder.
#[derive(Debug, Clone)]
pub struct Vae {
    pub trunk: ConvTrunk,
    mu_heads: Vec<Linear>,
    log_var_heads: Vec<Linear>,
    pub decoder: MatchedDecoder,
    cfg: EncoderConfig,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = ConvTrunk::new(&cfg, store, "encoder", rng)?;
        let mut mu_heads = Vec::new();
        let mut log_var_heads = Vec::new();
        for (i, &cbr) in cfg.cbrs.iter().enumerate() {
            let len = cfg.latent_dim(cbr);
            mu_heads.push(Linear::new(store, &format!("encoder.mu.{i}"), cfg.feature_dim(), len, rng)?);
            log_var_heads.push(Linear::new(store, &format!("encoder.log_var.{i}"), cfg.feature_dim(), len, rng)?);
        }
        let decoder = MatchedDecoder::new(cfg.clone(), store, "decoder", rng)?;
        Ok(Vae {
            trunk,
            mu_heads,
            log_var_heads,
            decoder,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `(μ, log σ²)` tensors, log-variance clamped to the safe range.
    pub fn heads(&self, x: &Tensor, cbr: f64, train: bool) -> Result<(Tensor, Tensor)> {
        let idx = self.cfg.head_index(cbr)?;
        let f = self.trunk.forward(x, train)?;
        let mu = self.mu_heads[idx].forward(&f)?;
        let log_var = self.log_var_heads[idx].forward(&f)?.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok((mu, log_var))
    }

    /// Reparameterized, power-normalized latents for a batch.
    pub fn sample_latents<R: Rng + ?Sized>(
        &self,
        mu: &Tensor,
        log_var: &Tensor,
        rng: &mut R,
    ) -> Result<Tensor> {
        let eps = gaussian_tensor(mu.dims(), mu.dtype(), mu.device(), rng)?;
        let z = mu.add(&log_var.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?;
        normalize_power_tensor(&z, self.cfg.power)
    }
}
