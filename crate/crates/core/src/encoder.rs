//! Semantic encoder: a strided convolutional trunk shared by every channel
//! bandwidth ratio, a linear projection head per registered ratio, and the
//! pad-and-reshape that turns a received latent into decoder conditioning.

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{normalize_power_tensor, SemanticLatent};
use crate::diffusion::ConditionTensor;
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::params::ParamStore;
use crate::{Error, Result};

/// CBR values closer than this are treated as the same head.
const CBR_TOL: f64 = 1e-9;

/// The adaptive-training CBR set.
pub const ADAPTIVE_CBRS: [f64; 6] = [0.2, 0.25, 0.3, 0.35, 0.4, 0.45];

/// Latent length for a source of `input_dim` values: `2 * int(input_dim * cbr)`.
pub fn latent_dim(input_dim: usize, cbr: f64) -> usize {
    2 * (input_dim as f64 * cbr) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    /// Registered heads. Left empty in config files, where the training
    /// regime supplies them.
    #[serde(default)]
    pub cbrs: Vec<f64>,
    #[serde(default = "default_power")]
    pub power: f64,
}

fn default_image_size() -> usize {
    32
}

fn default_power() -> f64 {
    1.0
}

impl EncoderConfig {
    /// Three stride-2 convolutions (8, 16, 32 channels) with ReLU.
    pub fn mnist(cbrs: Vec<f64>) -> Self {
        EncoderConfig {
            input_channels: 1,
            image_size: 32,
            conv_channels: vec![8, 16, 32],
            conv_strides: vec![2, 2, 2],
            batch_norm: false,
            cbrs,
            power: 1.0,
        }
    }

    /// Four convolutions (64, 128, 256, 256) with batch norm and ReLU. The
    /// first keeps resolution so the trunk ends on a 4×4 map.
    pub fn cifar(cbrs: Vec<f64>) -> Self {
        EncoderConfig {
            input_channels: 3,
            image_size: 32,
            conv_channels: vec![64, 128, 256, 256],
            conv_strides: vec![1, 2, 2, 2],
            batch_norm: true,
            cbrs,
            power: 1.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_channels * self.image_size * self.image_size
    }

    pub fn latent_dim(&self, cbr: f64) -> usize {
        latent_dim(self.input_dim(), cbr)
    }

    /// Side length of the trunk's output map.
    pub fn feature_size(&self) -> usize {
        self.conv_strides
            .iter()
            .fold(self.image_size, |s, stride| (s + stride - 1) / stride)
    }

    pub fn feature_dim(&self) -> usize {
        let fs = self.feature_size();
        self.conv_channels.last().copied().unwrap_or(self.input_channels) * fs * fs
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.input_channels, self.image_size, self.image_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::Config(
                "encoder conv_channels and conv_strides must be nonempty and equal length".into(),
            ));
        }
        if self.cbrs.is_empty() {
            return Err(Error::Config("encoder needs at least one cbr head".into()));
        }
        if let Some(c) = self.cbrs.iter().find(|c| !(**c > 0.0 && **c < 1.0)) {
            return Err(Error::Config(format!("cbr {c} outside (0, 1)")));
        }
        if self.cbrs.iter().any(|c| self.latent_dim(*c) == 0) {
            return Err(Error::Config("a cbr head has an empty latent".into()));
        }
        Ok(())
    }

    pub fn head_index(&self, cbr: f64) -> Result<usize> {
        self.cbrs
            .iter()
            .position(|c| (c - cbr).abs() < CBR_TOL)
            .ok_or_else(|| Error::UnregisteredCbr {
                cbr,
                available: self.cbrs.clone(),
            })
    }
}

/// Convolutional trunk, shared by the semantic encoder and the baselines.
#[derive(Debug, Clone)]
pub struct ConvTrunk {
    convs: Vec<Conv2d>,
    norms: Vec<Option<BatchNorm2d>>,
    dims: (usize, usize, usize),
}

impl ConvTrunk {
    pub fn new<R: Rng + ?Sized>(
        cfg: &EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_ch = cfg.input_channels;
        for (i, (&out_ch, &stride)) in cfg.conv_channels.iter().zip(&cfg.conv_strides).enumerate() {
            convs.push(Conv2d::new(store, &format!("{prefix}.conv.{i}"), in_ch, out_ch, 3, stride, 1, rng)?);
            norms.push(if cfg.batch_norm {
                Some(BatchNorm2d::new(store, &format!("{prefix}.bn.{i}"), out_ch)?)
            } else {
                None
            });
            in_ch = out_ch;
        }
        Ok(ConvTrunk {
            convs,
            norms,
            dims: cfg.image_dims(),
        })
    }

    /// `(batch, C, H, W)` images to flattened `(batch, features)`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != self.dims {
            return Err(Error::Shape(format!(
                "encoder expects {:?}, got {:?}",
                self.dims,
                (c, h, w)
            )));
        }
        let mut h = x.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(&h)?;
            if let Some(bn) = norm {
                h = bn.forward(&h, train)?;
            }
            h = h.relu()?;
        }
        Ok(h.flatten_from(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    trunk: ConvTrunk,
    heads: Vec<Linear>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        cfg: EncoderConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let trunk = ConvTrunk::new(&cfg, store, prefix, rng)?;
        let heads = cfg
            .cbrs
            .iter()
            .enumerate()
            .map(|(i, &cbr)| {
                Linear::new(
                    store,
                    &format!("{prefix}.head.{i}"),
                    cfg.feature_dim(),
                    cfg.latent_dim(cbr),
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { cfg, trunk, heads })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Power-normalized latents, `(batch, 2N_c)`. Differentiable.
    pub fn encode_tensor(&self, x: &Tensor, cbr: f64, train: bool) -> Result<Tensor> {
        let head = &self.heads[self.cfg.head_index(cbr)?];
        let raw = head.forward(&self.trunk.forward(x, train)?)?;
        normalize_power_tensor(&raw, self.cfg.power)
    }

    /// Encode a batch `(batch, C, H, W)` or a single image `(C, H, W)`.
    pub fn encode(&self, x0: &Tensor, cbr: f64) -> Result<Vec<SemanticLatent>> {
        let x = if x0.rank() == 3 { x0.unsqueeze(0)? } else { x0.clone() };
        let latents = self.encode_tensor(&x, cbr, false)?;
        latents
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|v| SemanticLatent::from_raw(v, cbr, self.cfg.power))
            .collect()
    }
}

/// Place latent values row-major into a `(C, H, W)` grid, zero-padding the
/// rest. Returns a batch of one.
pub fn pad_and_reshape(
    latent: &SemanticLatent,
    target: (usize, usize, usize),
    dtype: DType,
    device: &candle_core::Device,
) -> Result<ConditionTensor> {
    let t = Tensor::from_vec(latent.values().to_vec(), (1, latent.len()), device)?.to_dtype(dtype)?;
    pad_and_reshape_tensor(&t, target)
}

/// Batched, differentiable form of [`pad_and_reshape`] for `(batch, L)`.
pub fn pad_and_reshape_tensor(
    latents: &Tensor,
    target: (usize, usize, usize),
) -> Result<ConditionTensor> {
    let (batch, len) = latents.dims2()?;
    let (c, h, w) = target;
    let slots = c * h * w;
    if len > slots {
        return Err(Error::Shape(format!(
            "latent of length {len} does not fit {slots} slots of {target:?}"
        )));
    }
    let pad = slots - len;
    let (data, mask) = if pad == 0 {
        (latents.clone(), latents.ones_like()?)
    } else {
        let ones = Tensor::ones((batch, len), latents.dtype(), latents.device())?;
        (
            latents.pad_with_zeros(1, 0, pad)?,
            ones.pad_with_zeros(1, 0, pad)?,
        )
    };
    ConditionTensor::new(data.reshape((batch, c, h, w))?, mask.reshape((batch, c, h, w))?, len)
}

/// Uniform draw of the CBR used for one adaptive-training epoch.
pub fn adaptive_head_select<R: Rng + ?Sized>(cbrs: &[f64], rng: &mut R) -> Result<f64> {
    if cbrs.is_empty() {
        return Err(Error::InvalidArgument("empty cbr list".into()));
    }
    Ok(cbrs[rng.random_range(0..cbrs.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_tensor, gaussian_vec, seeded};
    use crate::channel::normalize_power;
    use candle_core::Device;

    #[test]
    fn latent_dim_formula() {
        assert_eq!(latent_dim(1024, 0.3), 614);
        assert_eq!(EncoderConfig::mnist(vec![0.3]).latent_dim(0.3), 614);
        // Truncation, as Python's int().
        let grid: [(usize, f64, usize); 6] = [
            (1024, 0.2, 408),
            (1024, 0.45, 920),
            (3072, 0.25, 1536),
            (3072, 0.35, 2150),
            (3072, 0.4, 2456),
            (100, 0.57, 112),
        ];
        for (dim, cbr, want) in grid {
            assert_eq!(latent_dim(dim, cbr), want, "{dim} {cbr}");
        }
    }

    #[test]
    fn trunk_reaches_four_by_four() {
        assert_eq!(EncoderConfig::mnist(vec![0.3]).feature_size(), 4);
        assert_eq!(EncoderConfig::mnist(vec![0.3]).feature_dim(), 512);
        assert_eq!(EncoderConfig::cifar(vec![0.4]).feature_dim(), 4096);
    }

    fn mnist_encoder(dtype: DType) -> Encoder {
        let mut store = ParamStore::new(dtype, Device::Cpu);
        Encoder::new(EncoderConfig::mnist(vec![0.3, 0.45]), &mut store, "enc", &mut seeded(0)).unwrap()
    }

    #[test]
    fn encode_length_power_and_determinism() {
        let enc = mnist_encoder(DType::F64);
        let x = gaussian_tensor((3, 1, 32, 32), DType::F64, &Device::Cpu, &mut seeded(1))
            .unwrap()
            .clamp(-1.0, 1.0)
            .unwrap();
        let a = enc.encode(&x, 0.3).unwrap();
        let b = enc.encode(&x, 0.3).unwrap();
        assert_eq!(a, b);
        for l in &a {
            assert_eq!(l.len(), 614);
            assert_eq!(l.symbols(), 307);
            assert!((l.average_power() - 1.0).abs() < 1e-9);
        }
        let single = enc.encode(&x.get(0).unwrap(), 0.45).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), 920);
    }

    #[test]
    fn unregistered_cbr_lists_heads() {
        let enc = mnist_encoder(DType::F32);
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        match enc.encode(&x, 0.25) {
            Err(Error::UnregisteredCbr { available, .. }) => assert_eq!(available, vec![0.3, 0.45]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encoder_rejects_wrong_shape() {
        let enc = mnist_encoder(DType::F32);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.encode(&x, 0.3), Err(Error::Shape(_))));
    }

    #[test]
    fn pad_and_reshape_layout() {
        let l = normalize_power(gaussian_vec(614, &mut seeded(2)), 0.3, 1.0).unwrap();
        let c = pad_and_reshape(&l, (1, 32, 32), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(c.data().dims(), &[1, 1, 32, 32]);
        assert_eq!(c.mask().sum_all().unwrap().to_scalar::<f64>().unwrap(), 614.0);
        let flat = c.data().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(&flat[..614], l.values());
        assert!(flat[614..].iter().all(|v| *v == 0.0));
        assert_eq!(c.extract().unwrap()[0], l.values());
    }

    #[test]
    fn full_latent_has_dense_mask() {
        let l = normalize_power(gaussian_vec(48, &mut seeded(3)), 0.5, 1.0).unwrap();
        let c = pad_and_reshape(&l, (3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(c.mask().sum_all().unwrap().to_scalar::<f64>().unwrap(), 48.0);
        let too_long = normalize_power(gaussian_vec(50, &mut seeded(3)), 0.5, 1.0).unwrap();
        assert!(pad_and_reshape(&too_long, (3, 4, 4), DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn adaptive_selection() {
        let mut rng = seeded(4);
        assert!(adaptive_head_select(&[], &mut rng).is_err());
        for _ in 0..20 {
            assert_eq!(adaptive_head_select(&[0.3], &mut rng).unwrap(), 0.3);
        }
        let n = 6000;
        let mut counts = [0usize; 6];
        for _ in 0..n {
            let c = adaptive_head_select(&ADAPTIVE_CBRS, &mut rng).unwrap();
            let i = ADAPTIVE_CBRS.iter().position(|x| *x == c).expect("drawn from list");
            counts[i] += 1;
        }
        let p = 1.0 / 6.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se, "{counts:?}");
        }
    }
}
