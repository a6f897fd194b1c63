//! Time-conditioned U-Net predicting the clean sample `x̂_0` from a diffused
//! sample concatenated channel-wise with the conditioning tensor.
//!
//! Layout: initial 3×3 convolution, then per stage residual blocks with
//! time-embedding injection and a strided 4×4 downsampling convolution,
//! a two-block bottleneck, a mirrored decoder that concatenates the skip
//! connections and upsamples with transposed convolutions, and a
//! zero-initialized 1×1 output convolution.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionTensor, Denoiser};
use crate::nn::{gelu, time_embedding_tensor, Conv2d, ConvTranspose2d, GroupNorm, Linear, LinearAttention};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_channels: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    pub base_dim: usize,
    pub dim_mults: Vec<usize>,
    #[serde(default = "default_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default)]
    pub attention: bool,
}

fn default_image_size() -> usize {
    32
}

fn default_blocks() -> usize {
    1
}

impl DenoiserConfig {
    /// Desk-scale network: width 32, three stages.
    pub fn desk(image_channels: usize) -> Self {
        DenoiserConfig {
            image_channels,
            image_size: 32,
            base_dim: 32,
            dim_mults: vec![1, 2, 4],
            blocks_per_stage: 1,
            attention: false,
        }
    }

    /// Full-size network: width 32, four stages, two blocks per stage,
    /// attention on.
    pub fn full(image_channels: usize) -> Self {
        DenoiserConfig {
            image_channels,
            image_size: 32,
            base_dim: 32,
            dim_mults: vec![1, 2, 4, 8],
            blocks_per_stage: 2,
            attention: true,
        }
    }

    pub fn time_dim(&self) -> usize {
        self.base_dim * 4
    }

    pub fn in_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn out_channels(&self) -> usize {
        self.image_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_mults.is_empty() || self.base_dim == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config(
                "denoiser needs a nonzero width, at least one stage and one block".into(),
            ));
        }
        if self.base_dim % 2 != 0 {
            return Err(Error::Config("denoiser base_dim must be even".into()));
        }
        let factor = 1usize << (self.dim_mults.len() - 1);
        if self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size,
                self.dim_mults.len() - 1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    time: Linear,
    conv2: Conv2d,
    norm2: GroupNorm,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ResBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, 1, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), out_ch, 1)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, out_ch, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_ch, 1)?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, 1, 0, rng)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = gelu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let t = self.time.forward(&gelu(temb)?)?.unsqueeze(D::Minus1)?.unsqueeze(D::Minus1)?;
        let h = h.broadcast_add(&t)?;
        let h = gelu(&self.norm2.forward(&self.conv2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok(h.add(&skip)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    blocks: Vec<ResBlock>,
    attention: Option<LinearAttention>,
}

impl Stage {
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(&h, temb)?;
        }
        if let Some(attn) = &self.attention {
            h = attn.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: DenoiserConfig,
    init: Conv2d,
    time1: Linear,
    time2: Linear,
    down: Vec<Stage>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attention: Option<LinearAttention>,
    mid2: ResBlock,
    up: Vec<Stage>,
    upsample: Vec<ConvTranspose2d>,
    out: Conv2d,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        cfg: DenoiserConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let base = cfg.base_dim;
        let tdim = cfg.time_dim();
        let dims: Vec<usize> = cfg.dim_mults.iter().map(|m| base * m).collect();
        let n = dims.len();

        let init = Conv2d::new(store, &format!("{prefix}.init"), cfg.in_channels(), base, 3, 1, 1, rng)?;
        let time1 = Linear::new(store, &format!("{prefix}.time.0"), base, tdim, rng)?;
        let time2 = Linear::new(store, &format!("{prefix}.time.1"), tdim, tdim, rng)?;

        let stage = |store: &mut ParamStore, name: String, in_ch: usize, out_ch: usize, rng: &mut R| -> Result<Stage> {
            let mut blocks = Vec::new();
            let mut c = in_ch;
            for b in 0..cfg.blocks_per_stage {
                blocks.push(ResBlock::new(store, &format!("{name}.block.{b}"), c, out_ch, tdim, rng)?);
                c = out_ch;
            }
            let attention = if cfg.attention {
                Some(LinearAttention::new(store, &format!("{name}.attn"), out_ch, rng)?)
            } else {
                None
            };
            Ok(Stage { blocks, attention })
        };

        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut ch = base;
        for (i, &d) in dims.iter().enumerate() {
            down.push(stage(store, format!("{prefix}.down.{i}"), ch, d, rng)?);
            ch = d;
            if i + 1 < n {
                downsample.push(Conv2d::new(store, &format!("{prefix}.downsample.{i}"), d, d, 4, 2, 1, rng)?);
            }
        }
        let mid1 = ResBlock::new(store, &format!("{prefix}.mid.0"), ch, ch, tdim, rng)?;
        let mid_attention = if cfg.attention {
            Some(LinearAttention::new(store, &format!("{prefix}.mid.attn"), ch, rng)?)
        } else {
            None
        };
        let mid2 = ResBlock::new(store, &format!("{prefix}.mid.1"), ch, ch, tdim, rng)?;

        // up[j] mirrors down[n - 1 - j]
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for (j, &d) in dims.iter().rev().enumerate() {
            up.push(stage(store, format!("{prefix}.up.{j}"), ch + d, d, rng)?);
            ch = d;
            if j + 1 < n {
                upsample.push(ConvTranspose2d::new(store, &format!("{prefix}.upsample.{j}"), d, d, 4, 2, 1, 0, rng)?);
            }
        }
        let out = Conv2d::zeroed(store, &format!("{prefix}.out"), base, cfg.out_channels(), 1, 0)?;
        Ok(UNet {
            cfg,
            init,
            time1,
            time2,
            down,
            downsample,
            mid1,
            mid_attention,
            mid2,
            up,
            upsample,
            out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `x̂_θ(x_t, ỹ; t)` for a batch.
    pub fn forward(&self, x_t: &Tensor, cond: &Tensor, steps: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        let want = (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size);
        if (c, h, w) != want || cond.dims() != x_t.dims() {
            return Err(Error::Shape(format!(
                "denoiser expects {want:?} inputs, got x_t {:?} and cond {:?}",
                x_t.dims(),
                cond.dims()
            )));
        }
        let steps: Vec<usize> = match steps.len() {
            1 => vec![steps[0]; b],
            n if n == b => steps.to_vec(),
            n => return Err(Error::Shape(format!("{n} timesteps for a batch of {b}"))),
        };
        let temb = time_embedding_tensor(&steps, self.cfg.base_dim, x_t.dtype(), x_t.device())?;
        let temb = self.time2.forward(&gelu(&self.time1.forward(&temb)?)?)?;

        let mut h = self.init.forward(&Tensor::cat(&[x_t, cond], 1)?)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, stage) in self.down.iter().enumerate() {
            h = stage.forward(&h, &temb)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, &temb)?;
        if let Some(attn) = &self.mid_attention {
            h = attn.forward(&h)?;
        }
        h = self.mid2.forward(&h, &temb)?;
        for (j, stage) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per stage");
            h = stage.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
            if let Some(us) = self.upsample.get(j) {
                h = us.forward(&h)?;
            }
        }
        self.out.forward(&h)
    }
}

impl Denoiser for UNet {
    fn predict_x0(&self, x_t: &Tensor, cond: &ConditionTensor, steps: &[usize]) -> Result<Tensor> {
        self.forward(x_t, cond.data(), steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_tensor, seeded};
    use candle_core::{DType, Device};

    fn tiny(channels: usize, attention: bool) -> (ParamStore, UNet) {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let cfg = DenoiserConfig {
            image_channels: channels,
            image_size: 32,
            base_dim: 4,
            dim_mults: vec![1, 2],
            blocks_per_stage: 1,
            attention,
        };
        let net = UNet::new(cfg, &mut store, "den", &mut seeded(0)).unwrap();
        (store, net)
    }

    fn randn(dims: &[usize], seed: u64) -> Tensor {
        gaussian_tensor(dims, DType::F64, &Device::Cpu, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn output_shape_matches_image() {
        for (c, attn) in [(1, false), (3, false), (1, true)] {
            let (_, net) = tiny(c, attn);
            let x = randn(&[2, c, 32, 32], 1);
            let y = net.forward(&x, &randn(&[2, c, 32, 32], 2), &[5, 150]).unwrap();
            assert_eq!(y.dims(), &[2, c, 32, 32]);
        }
    }

    #[test]
    fn untrained_network_predicts_zero() {
        let (_, net) = tiny(1, false);
        let y = net.forward(&randn(&[1, 1, 32, 32], 1), &randn(&[1, 1, 32, 32], 2), &[7]).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let (_, net) = tiny(1, false);
        assert!(net.forward(&randn(&[1, 1, 16, 16], 1), &randn(&[1, 1, 16, 16], 2), &[1]).is_err());
        assert!(net.forward(&randn(&[2, 1, 32, 32], 1), &randn(&[2, 1, 32, 32], 2), &[1, 2, 3]).is_err());
        let bad = DenoiserConfig {
            image_size: 30,
            ..DenoiserConfig::desk(1)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_contract() {
        let c = DenoiserConfig::full(3);
        assert_eq!(c.time_dim(), 128);
        assert_eq!(c.in_channels(), 6);
        assert_eq!(c.out_channels(), 3);
    }
}
