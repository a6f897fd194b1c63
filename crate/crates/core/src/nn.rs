//! Layers over [`ParamStore`] parameters.
//!
//! Weights are fan-in scaled Gaussians (`std = 1/√fan_in`), biases start at
//! zero.

use candle_core::{DType, Tensor, Var, D};
use rand::Rng;

use crate::params::ParamStore;
use crate::Result;

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (inputs as f64).sqrt();
        Ok(Linear {
            weight: store.normal(format!("{name}.weight"), (outputs, inputs), std, rng)?,
            bias: store.zeros(format!("{name}.bias"), outputs)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            weight: store.normal(
                format!("{name}.weight"),
                (out_channels, in_channels, kernel, kernel),
                std,
                rng,
            )?,
            bias: store.zeros(format!("{name}.bias"), out_channels)?,
            stride,
            padding,
        })
    }

    /// A convolution whose weights and bias start at zero.
    pub fn zeroed(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    ) -> Result<Self> {
        Ok(Conv2d {
            weight: store.zeros(
                format!("{name}.weight"),
                (out_channels, in_channels, kernel, kernel),
            )?,
            bias: store.zeros(format!("{name}.bias"), out_channels)?,
            stride: 1,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((in_channels * kernel * kernel) as f64 / (stride * stride) as f64).sqrt();
        Ok(ConvTranspose2d {
            weight: store.normal(
                format!("{name}.weight"),
                (in_channels, out_channels, kernel, kernel),
                std,
                rng,
            )?,
            bias: store.zeros(format!("{name}.bias"), out_channels)?,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    inner: candle_nn::GroupNorm,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let weight = store.ones(format!("{name}.weight"), channels)?;
        let bias = store.zeros(format!("{name}.bias"), channels)?;
        Ok(GroupNorm {
            inner: candle_nn::GroupNorm::new(weight, bias, channels, groups, 1e-5)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_core::Module::forward(&self.inner, x)?)
    }
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running estimates (momentum 0.1, unbiased variance); evaluation mode uses
/// the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let (dtype, device) = (store.dtype(), store.device().clone());
        Ok(BatchNorm2d {
            weight: store.ones(format!("{name}.weight"), channels)?,
            bias: store.zeros(format!("{name}.bias"), channels)?,
            running_mean: store.buffer(
                format!("{name}.running_mean"),
                Tensor::zeros(channels, dtype, &device)?,
            )?,
            running_var: store.buffer(
                format!("{name}.running_var"),
                Tensor::ones(channels, dtype, &device)?,
            )?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
            let mean = flat.mean(1)?;
            let centered = flat.broadcast_sub(&mean.unsqueeze(1)?)?;
            let var = centered.sqr()?.mean(1)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                var.detach().affine(count / (count - 1.0), 0.0)?
            } else {
                var.detach()
            };
            let m = self.momentum;
            self.running_mean.set(
                &self
                    .running_mean
                    .as_tensor()
                    .affine(1.0 - m, 0.0)?
                    .add(&mean.detach().affine(m, 0.0)?)?,
            )?;
            self.running_var.set(
                &self
                    .running_var
                    .as_tensor()
                    .affine(1.0 - m, 0.0)?
                    .add(&unbiased.affine(m, 0.0)?)?,
            )?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach(),
                self.running_var.as_tensor().detach(),
            )
        };
        let shape = (1, c, 1, 1);
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let y = x
            .broadcast_sub(&mean.reshape(shape)?)?
            .broadcast_mul(&inv.reshape(shape)?)?;
        Ok(y
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Pre-norm residual linear attention with a single head.
///
/// Queries are softmax-normalized over features and keys over positions, so
/// the cost is linear in the number of pixels.
#[derive(Debug, Clone)]
pub struct LinearAttention {
    norm: GroupNorm,
    qkv: Conv2d,
    out: Conv2d,
    width: usize,
}

impl LinearAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = channels;
        Ok(LinearAttention {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, 1)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), channels, 3 * width, 1, 1, 0, rng)?,
            out: Conv2d::new(store, &format!("{name}.out"), width, channels, 1, 1, 0, rng)?,
            width,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, self.width, h * w))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?;
        let q = candle_nn::ops::softmax(&q, 1)?.affine(1.0 / (self.width as f64).sqrt(), 0.0)?;
        let k = candle_nn::ops::softmax(&k, D::Minus1)?;
        // context[d, e] = Σ_n k[d, n] v[e, n]
        let context = k.matmul(&v.t()?)?;
        let attended = context.t()?.matmul(&q)?.reshape((b, self.width, h, w))?;
        Ok(self.out.forward(&attended)?.add(x)?)
    }
}

/// Interleaved sinusoidal embedding: `[sin(t f₀), cos(t f₀), sin(t f₁), ...]`
/// with frequencies log-spaced from 1 down to 1/10000.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(crate::Error::InvalidArgument(format!(
            "embedding width {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let scale = if half > 1 {
        10000f64.ln() / (half - 1) as f64
    } else {
        0.0
    };
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let arg = t * (-scale * i as f64).exp();
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Embeddings for a batch of timesteps as a `(batch, dim)` tensor.
pub fn time_embedding_tensor(
    steps: &[usize],
    dim: usize,
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        data.extend(sinusoidal_embedding(t as f64, dim)?);
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?.to_dtype(dtype)?)
}
