//! Original and reconstruction pairs written as PNG files.

use std::path::Path;

use cdiff_core::config::ExperimentConfig;
use cdiff_core::data::{Dataset, Split};
use cdiff_core::random::seeded;
use cdiff_core::trainer::EvalSettings;
use cdiff_core::{Error, Tensor};
use image::{Rgb, RgbImage};
use rand::seq::index;

use crate::record::{write_csv, SampleRecord};
use crate::sweep::load_model;

pub const SAMPLES_CSV: &str = "samples.csv";

/// Blank columns between the two halves of a pair.
const GAP: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualizeOptions {
    pub count: usize,
    pub seed: u64,
    /// Test SNR; defaults to `channel.eval_snr_db`.
    pub snr_db: Option<f64>,
    /// Test CBR; defaults to the largest trained head.
    pub cbr: Option<f64>,
}

/// Indices of `count` distinct test images drawn under `seed`.
pub fn select(len: usize, count: usize, seed: u64) -> Result<Vec<usize>, Error> {
    if count == 0 || count > len {
        return Err(Error::InvalidArgument(format!(
            "cannot select {count} of {len} test images"
        )));
    }
    Ok(index::sample(&mut seeded(seed), len, count).into_vec())
}

fn pair_image(original: &Tensor, recon: &Tensor) -> anyhow::Result<RgbImage> {
    let (c, h, w) = original.dims3()?;
    let a = original.flatten_all()?.to_vec1::<f64>()?;
    let b = recon.flatten_all()?.to_vec1::<f64>()?;
    let (h32, w32) = (h as u32, w as u32);
    let mut img = RgbImage::from_pixel(2 * w32 + GAP, h32, Rgb([255, 255, 255]));
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (half, px) in [&a, &b].into_iter().enumerate() {
        let x0 = half as u32 * (w32 + GAP);
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| px[(ch.min(c - 1) * h + y) * w + x];
                img.put_pixel(x0 + x as u32, y as u32, Rgb([byte(at(0)), byte(at(1)), byte(at(2))]));
            }
        }
    }
    Ok(img)
}

/// Reconstruct `count` test images from the checkpoint in `dir` and write
/// `pair-NNN.png` files plus a metric sidecar into `out`.
pub fn run(cfg: &ExperimentConfig, dir: &Path, out: &Path, opts: &VisualizeOptions) -> anyhow::Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let model = load_model(cfg, dir)?;
    let cbr = opts
        .cbr
        .unwrap_or_else(|| model.cbrs().iter().copied().fold(f64::NEG_INFINITY, f64::max));
    model.serving_head(cbr)?;
    let test = cfg.load_split(Split::Test)?;
    let picked = select(test.len(), opts.count, opts.seed)?;
    let subset = Dataset::new(test.batch(&picked)?, Split::Test, test.source)?;
    let settings = EvalSettings {
        snr_db: opts.snr_db.unwrap_or(cfg.channel.eval_snr_db),
        cbr,
        batch_size: cfg.sweep.batch_size,
        seed: opts.seed,
        sampler: cfg.sweep.sampler,
        interference: Vec::new(),
    };
    let result = model.evaluate(&subset, &settings)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(picked.len());
    for (k, (&dataset_index, metrics)) in picked.iter().zip(&result.per_sample).enumerate() {
        let file = format!("pair-{k:03}.png");
        pair_image(&result.originals.get(k)?, &result.reconstructions.get(k)?)?.save(out.join(&file))?;
        rows.push(SampleRecord {
            sample: k,
            dataset_index,
            file,
            psnr_db: metrics.psnr_db,
            ssim: metrics.ssim,
        });
    }
    write_csv(&out.join(SAMPLES_CSV), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_is_seeded_and_distinct() {
        let a = select(100, 8, 3).unwrap();
        assert_eq!(a, select(100, 8, 3).unwrap());
        assert_ne!(a, select(100, 8, 4).unwrap());
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 8);
        assert!(select(4, 5, 0).is_err());
    }

    #[test]
    fn pair_is_side_by_side() {
        let dev = cdiff_core::Device::Cpu;
        let a = Tensor::zeros((1, 3, 4), cdiff_core::DType::F64, &dev).unwrap();
        let b = Tensor::ones((1, 3, 4), cdiff_core::DType::F64, &dev).unwrap();
        let img = pair_image(&a, &b).unwrap();
        assert_eq!(img.dimensions(), (2 * 4 + GAP, 3));
        assert_eq!(img.get_pixel(0, 0), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(4 + GAP, 2), &Rgb([255, 255, 255]));
    }
}
