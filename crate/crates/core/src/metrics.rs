//! PSNR and SSIM on images in `[0, 1]`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Map model-space images in `[-1, 1]` to `[0, 1]`.
pub fn to_unit_range(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?.clamp(0.0, 1.0)?)
}

pub fn psnr_slices(a: &[f64], b: &[f64], max_val: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} elements", a.len(), b.len())));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val must be positive, got {max_val}")));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty images".into()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// `10 log10(max_val² / MSE)` over all elements.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    check_pair(a, b)?;
    psnr_slices(&flat(a)?, &flat(b)?, max_val)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, max_val: f64) -> f64 {
    let k = gaussian_window();
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter(a, h, w, &k);
    let mu_b = filter(b, h, w, &k);
    let aa = filter(&prod(a, a), h, w, &k);
    let bb = filter(&prod(b, b), h, w, &k);
    let ab = filter(&prod(a, b), h, w, &k);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Gaussian-windowed SSIM for `(H, W)` or `(C, H, W)` images, averaged over
/// windows and channels.
pub fn ssim(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = match *a.dims() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref d => return Err(Error::Shape(format!("ssim expects (H, W) or (C, H, W), got {d:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if !(max_val > 0.0) {
        return Err(Error::InvalidArgument(format!("max_val must be positive, got {max_val}")));
    }
    let (fa, fb) = (flat(a)?, flat(b)?);
    if fa == fb {
        return Ok(1.0);
    }
    let plane = h * w;
    let total: f64 = (0..c)
        .map(|i| ssim_plane(&fa[i * plane..(i + 1) * plane], &fb[i * plane..(i + 1) * plane], h, w, max_val))
        .sum();
    Ok(total / c as f64)
}

/// Per-sample quality of one reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    /// Compare images in `[0, 1]`.
    pub fn compute(original: &Tensor, reconstruction: &Tensor) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(original, reconstruction, 1.0)?,
            ssim: ssim(original, reconstruction, 1.0)?,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(values: &[f64]) -> Summary {
    if values.is_empty() {
        return Summary {
            mean: f64::NAN,
            std: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Summary { mean, std: var.sqrt() }
}

/// Batch mean and spread of per-sample reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub psnr: Summary,
    pub ssim: Summary,
    pub count: usize,
}

impl BatchReport {
    pub fn from_reports(reports: &[MetricReport]) -> Self {
        let p: Vec<f64> = reports.iter().map(|r| r.psnr_db).collect();
        let s: Vec<f64> = reports.iter().map(|r| r.ssim).collect();
        BatchReport {
            psnr: summarize(&p),
            ssim: summarize(&s),
            count: reports.len(),
        }
    }

    /// Per-sample metrics for `(B, C, H, W)` batches in `[0, 1]`.
    pub fn compute(originals: &Tensor, reconstructions: &Tensor) -> Result<(Self, Vec<MetricReport>)> {
        check_pair(originals, reconstructions)?;
        let b = originals.dim(0)?;
        let reports = (0..b)
            .map(|i| MetricReport::compute(&originals.get(i)?, &reconstructions.get(i)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((Self::from_reports(&reports), reports))
    }
}
