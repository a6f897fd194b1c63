//! Conditional forward diffusion and the reverse sampler.
//!
//! All tensors are batched along dimension 0. Per-sample timesteps are given
//! as a slice whose length is either the batch size or 1 (broadcast).

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::random::gaussian_tensor;
use crate::schedules::DiffusionSchedule;
use crate::{Error, Result};

/// The received latent padded and reshaped to image dimensions.
///
/// `mask` is 1 on positions carrying latent values and 0 on padding; padded
/// entries of `data` are exactly zero.
#[derive(Debug, Clone)]
pub struct ConditionTensor {
    data: Tensor,
    mask: Tensor,
    source_len: usize,
}

impl ConditionTensor {
    pub fn new(data: Tensor, mask: Tensor, source_len: usize) -> Result<Self> {
        if data.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "condition data {:?} and mask {:?} differ",
                data.dims(),
                mask.dims()
            )));
        }
        let per_sample = data.dims().iter().skip(1).product::<usize>();
        if source_len > per_sample {
            return Err(Error::Shape(format!(
                "source length {source_len} exceeds {per_sample} slots"
            )));
        }
        let leaked = data
            .broadcast_mul(&mask.ones_like()?.sub(&mask)?)?
            .abs()?
            .flatten_all()?
            .max(0)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        if leaked != 0.0 {
            return Err(Error::Shape("condition has nonzero padded entries".into()));
        }
        Ok(ConditionTensor {
            data,
            mask,
            source_len,
        })
    }

    /// An all-zero, all-padding condition: the unconditional case.
    pub fn zeros(dims: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let data = Tensor::zeros(dims, dtype, device)?;
        Ok(ConditionTensor {
            mask: data.clone(),
            data,
            source_len: 0,
        })
    }

    /// Condition with every position valid.
    pub fn dense(data: Tensor) -> Result<Self> {
        let source_len = data.dims().iter().skip(1).product();
        let mask = data.ones_like()?;
        Ok(ConditionTensor {
            data,
            mask,
            source_len,
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn source_len(&self) -> usize {
        self.source_len
    }

    pub fn batch_size(&self) -> usize {
        self.data.dims().first().copied().unwrap_or(0)
    }

    /// Recover the latent entries of each sample (row-major, first
    /// `source_len` slots).
    pub fn extract(&self) -> Result<Vec<Vec<f64>>> {
        let rows = self
            .data
            .flatten_from(1)?
            .narrow(1, 0, self.source_len)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?;
        Ok(rows)
    }
}

/// One draw from the conditional forward kernel, with everything needed to
/// replay it.
#[derive(Debug, Clone)]
pub struct DiffusedSample {
    pub x_t: Tensor,
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub x0: Tensor,
    pub cond: ConditionTensor,
}

impl DiffusedSample {
    /// Recompute `x_t` from the stored pieces.
    pub fn replay(&self, schedule: &DiffusionSchedule) -> Result<Tensor> {
        Ok(forward_diffuse_with_noise(
            &self.x0,
            &self.cond,
            &self.steps,
            schedule,
            self.eps.clone(),
        )?
        .x_t)
    }
}

fn expand_steps(steps: &[usize], batch: usize) -> Result<Vec<usize>> {
    match steps.len() {
        1 => Ok(vec![steps[0]; batch]),
        n if n == batch => Ok(steps.to_vec()),
        n => Err(Error::Shape(format!(
            "{n} timesteps for a batch of {batch}"
        ))),
    }
}

/// Per-sample scalars as a tensor broadcastable against `like`.
fn per_sample(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let mut dims = vec![1usize; like.rank()];
    dims[0] = values.len();
    Ok(Tensor::from_vec(values, dims, like.device())?.to_dtype(like.dtype())?)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Forward kernel with a caller-supplied Gaussian draw:
/// `x_t = (1 - w_t)√ᾱ_t x_0 + w_t√ᾱ_t ỹ + √δ_t ε`.
pub fn forward_diffuse_with_noise(
    x0: &Tensor,
    cond: &ConditionTensor,
    steps: &[usize],
    schedule: &DiffusionSchedule,
    eps: Tensor,
) -> Result<DiffusedSample> {
    check_same_shape(x0, cond.data(), "x0 vs condition")?;
    check_same_shape(x0, &eps, "x0 vs noise")?;
    let batch = x0.dims()[0];
    let steps = expand_steps(steps, batch)?;
    for &t in &steps {
        schedule.check_step(t)?;
    }
    let x0_coef: Vec<f64> = steps
        .iter()
        .map(|&t| (1.0 - schedule.w(t)) * schedule.alpha_bar(t).sqrt())
        .collect();
    let y_coef: Vec<f64> = steps
        .iter()
        .map(|&t| schedule.w(t) * schedule.alpha_bar(t).sqrt())
        .collect();
    let noise_coef: Vec<f64> = steps.iter().map(|&t| schedule.delta(t).sqrt()).collect();

    let x_t = x0
        .broadcast_mul(&per_sample(x0_coef, x0)?)?
        .add(&cond.data().broadcast_mul(&per_sample(y_coef, x0)?)?)?
        .add(&eps.broadcast_mul(&per_sample(noise_coef, x0)?)?)?;
    Ok(DiffusedSample {
        x_t,
        steps,
        eps,
        x0: x0.clone(),
        cond: cond.clone(),
    })
}

pub fn forward_diffuse<R: Rng + ?Sized>(
    x0: &Tensor,
    cond: &ConditionTensor,
    steps: &[usize],
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<DiffusedSample> {
    let eps = gaussian_tensor(x0.dims(), x0.dtype(), x0.device(), rng)?;
    forward_diffuse_with_noise(x0, cond, steps, schedule, eps)
}

/// Noise implied by a clean-sample prediction:
/// `ε = (x_t - √ᾱ_t x̂_0) / √(1 - ᾱ_t)`.
pub fn predict_eps(
    x_t: &Tensor,
    x0_hat: &Tensor,
    steps: &[usize],
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    check_same_shape(x_t, x0_hat, "x_t vs x0_hat")?;
    let steps = expand_steps(steps, x_t.dims()[0])?;
    for &t in &steps {
        schedule.check_step(t)?;
    }
    let sab: Vec<f64> = steps.iter().map(|&t| schedule.alpha_bar(t).sqrt()).collect();
    let inv: Vec<f64> = steps
        .iter()
        .map(|&t| 1.0 / (1.0 - schedule.alpha_bar(t)).sqrt())
        .collect();
    Ok(x_t
        .sub(&x0_hat.broadcast_mul(&per_sample(sab, x_t)?)?)?
        .broadcast_mul(&per_sample(inv, x_t)?)?)
}

/// Standard deviation of the noise injected by each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerNoise {
    /// `√δ_t`, as written in the sampler update.
    #[default]
    Literal,
    /// `√(δ_{t|t-1} δ_{t-1} / δ_t)`, the variance of the Gaussian posterior.
    Posterior,
}

impl SamplerNoise {
    pub fn std(self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        match self {
            SamplerNoise::Literal => schedule.delta(t).sqrt(),
            SamplerNoise::Posterior => schedule.posterior_variance(t).max(0.0).sqrt(),
        }
    }
}

/// `x_{t-1} = ψ_x x_t + ψ_y ỹ - ψ_ε ε̂ + σ_t z` with a caller-supplied `z`.
/// The noise term is dropped at `t = 1`.
pub fn reverse_step_with_noise(
    x_t: &Tensor,
    cond: &ConditionTensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: SamplerNoise,
    z: &Tensor,
) -> Result<Tensor> {
    check_same_shape(x_t, eps_hat, "x_t vs eps_hat")?;
    check_same_shape(x_t, cond.data(), "x_t vs condition")?;
    let (psi_x, psi_y, psi_eps) = schedule.sampler_coefficients(t)?;
    let mut out = x_t
        .affine(psi_x, 0.0)?
        .sub(&eps_hat.affine(psi_eps, 0.0)?)?;
    if psi_y != 0.0 {
        out = out.add(&cond.data().affine(psi_y, 0.0)?)?;
    }
    let sigma = noise.std(schedule, t);
    if sigma > 0.0 {
        check_same_shape(x_t, z, "x_t vs z")?;
        out = out.add(&z.affine(sigma, 0.0)?)?;
    }
    Ok(out)
}

pub fn reverse_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    cond: &ConditionTensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: SamplerNoise,
    rng: &mut R,
) -> Result<Tensor> {
    let z = if noise.std(schedule, t) > 0.0 {
        gaussian_tensor(x_t.dims(), x_t.dtype(), x_t.device(), rng)?
    } else {
        x_t.zeros_like()?
    };
    reverse_step_with_noise(x_t, cond, eps_hat, t, schedule, noise, &z)
}

/// Anything that predicts the clean sample from a diffused one.
pub trait Denoiser {
    fn predict_x0(&self, x_t: &Tensor, cond: &ConditionTensor, steps: &[usize]) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub noise: SamplerNoise,
    /// Output is clamped to `[-clamp, clamp]`; `None` disables the clamp.
    pub clamp: Option<f64>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            noise: SamplerNoise::Literal,
            clamp: Some(1.0),
        }
    }
}

/// Run the reverse chain from `x_T ~ N(0, I)` down to `x̂_0`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    cond: &ConditionTensor,
    denoiser: &D,
    schedule: &DiffusionSchedule,
    options: SampleOptions,
    rng: &mut R,
) -> Result<Tensor> {
    let data = cond.data();
    let mut x = gaussian_tensor(data.dims(), data.dtype(), data.device(), rng)?;
    for t in (1..=schedule.steps()).rev() {
        let x0_hat = denoiser.predict_x0(&x, cond, &[t])?;
        let eps_hat = predict_eps(&x, &x0_hat, &[t], schedule)?;
        x = reverse_step(&x, cond, &eps_hat, t, schedule, options.noise, rng)?.detach();
    }
    if let Some(c) = options.clamp {
        x = x.clamp(-c, c)?;
    }
    Ok(x)
}
