//! CSV row types. Column order is the field order and is part of the
//! output format.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One evaluated sweep cell for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub seed: u64,
    pub dataset: String,
    pub pipeline: String,
    pub regime: String,
    pub cbr: f64,
    /// Mixing coefficients joined with `;`, empty for a clean link.
    pub interference: String,
    pub snr_db: f64,
    pub sinr_db: Option<f64>,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub samples: usize,
    pub wall_ms: u64,
}

impl ExperimentRecord {
    pub fn is_finite(&self) -> bool {
        [self.psnr_mean, self.psnr_std, self.ssim_mean, self.ssim_std]
            .iter()
            .chain(self.sinr_db.as_ref())
            .all(|v| v.is_finite())
    }
}

/// Per-image row of the visualization sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub dataset_index: usize,
    pub file: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

pub fn format_coefficients(coeffs: &[f64]) -> String {
    coeffs.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// Write all rows to `path` through one writer.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Streaming CSV writer flushed after every row.
pub struct RowWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl RowWriter<std::fs::File> {
    pub fn create(path: &Path) -> anyhow::Result<Self> {
        Ok(RowWriter {
            inner: csv::Writer::from_path(path)?,
        })
    }
}

impl<W: Write> RowWriter<W> {
    pub fn push<T: Serialize>(&mut self, row: &T) -> anyhow::Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order_is_fixed() {
        let rec = ExperimentRecord {
            seed: 0,
            dataset: "synthetic".into(),
            pipeline: "cdiff".into(),
            regime: "fixed".into(),
            cbr: 0.3,
            interference: format_coefficients(&[0.8, 0.2]),
            snr_db: 0.0,
            sinr_db: None,
            psnr_mean: 20.0,
            psnr_std: 1.0,
            ssim_mean: 0.5,
            ssim_std: 0.1,
            samples: 4,
            wall_ms: 0,
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&rec).unwrap();
        let text = String::from_utf8(w.into_inner().unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seed,dataset,pipeline,regime,cbr,interference,snr_db,sinr_db,psnr_mean,psnr_std,ssim_mean,ssim_std,samples,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "0,synthetic,cdiff,fixed,0.3,0.8;0.2,0.0,,20.0,1.0,0.5,0.1,4,0");
        assert!(rec.is_finite());
    }
}
