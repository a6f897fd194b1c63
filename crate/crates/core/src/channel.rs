//! Wireless link model.
//!
//! A latent of length `2N_c` carries `N_c` complex symbols with real and
//! imaginary parts interleaved (`re0, im0, re1, im1, ...`). Normalization
//! scales the vector to unit ℓ2-norm times `√(N_c·P)`, so the average
//! per-symbol power is exactly `P`; with `P = 1` this is the unit-norm
//! convention up to the fixed `√N_c` factor.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::random::gaussian_tensor;
use crate::{Error, Result};

/// Tolerance on the sum of mixing coefficients.
pub const COEFF_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLatent {
    values: Vec<f64>,
    cbr: f64,
    power: f64,
}

impl SemanticLatent {
    /// Wrap raw channel values without rescaling.
    pub fn from_raw(values: Vec<f64>, cbr: f64, power: f64) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::Shape(format!(
                "latent length {} is not even",
                values.len()
            )));
        }
        Ok(SemanticLatent { values, cbr, power })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn symbols(&self) -> usize {
        self.values.len() / 2
    }

    pub fn cbr(&self) -> f64 {
        self.cbr
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    /// `(1/N_c) Σ |z_i|²`.
    pub fn average_power(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.symbols() as f64
    }

    pub fn renormalized(self) -> Result<Self> {
        normalize_power(self.values, self.cbr, self.power)
    }
}

/// Scale `values` so the average symbol power equals `power`.
pub fn normalize_power(values: Vec<f64>, cbr: f64, power: f64) -> Result<SemanticLatent> {
    if !(power > 0.0) {
        return Err(Error::InvalidArgument(format!("power {power} must be positive")));
    }
    if values.is_empty() || values.len() % 2 != 0 {
        return Err(Error::Shape(format!(
            "latent length {} must be even and nonzero",
            values.len()
        )));
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateInput(format!(
            "cannot normalize a latent with norm {norm}"
        )));
    }
    let scale = ((values.len() / 2) as f64 * power).sqrt() / norm;
    Ok(SemanticLatent {
        values: values.into_iter().map(|v| v * scale).collect(),
        cbr,
        power,
    })
}

/// Batched normalization of a `(batch, 2N_c)` tensor, differentiable.
pub fn normalize_power_tensor(latents: &Tensor, power: f64) -> Result<Tensor> {
    let (_, len) = latents.dims2()?;
    if len == 0 || len % 2 != 0 {
        return Err(Error::Shape(format!("latent length {len} must be even and nonzero")));
    }
    let norm = latents.sqr()?.sum_keepdim(1)?.sqrt()?;
    let target = ((len / 2) as f64 * power).sqrt();
    Ok(latents.broadcast_div(&norm)?.affine(target, 0.0)?)
}

pub fn sigma2_from_snr(snr_db: f64, power: f64) -> f64 {
    power / 10f64.powf(snr_db / 10.0)
}

pub fn snr_from_sigma2(sigma2: f64, power: f64) -> f64 {
    10.0 * (power / sigma2).log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    #[serde(default = "unit_power")]
    pub power: f64,
}

fn unit_power() -> f64 {
    1.0
}

impl ChannelConfig {
    pub fn new(snr_db: f64, power: f64) -> Result<Self> {
        if !(power > 0.0) || snr_db.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "invalid channel: snr {snr_db} dB, power {power}"
            )));
        }
        Ok(ChannelConfig { snr_db, power })
    }

    pub fn sigma2(&self) -> f64 {
        sigma2_from_snr(self.snr_db, self.power)
    }
}

/// `η(z) = z + n`, `n ~ CN(0, σ²I)`: each real component gets variance σ²/2.
pub fn awgn<R: Rng + ?Sized>(
    latent: &SemanticLatent,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> SemanticLatent {
    let std = (cfg.sigma2() / 2.0).sqrt();
    let values = if std == 0.0 {
        latent.values.clone()
    } else {
        latent
            .values
            .iter()
            .map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    SemanticLatent {
        values,
        cbr: latent.cbr,
        power: latent.power,
    }
}

/// Batched AWGN with a per-sample noise variance.
pub fn awgn_tensor<R: Rng + ?Sized>(latents: &Tensor, sigma2: &[f64], rng: &mut R) -> Result<Tensor> {
    let (batch, _) = latents.dims2()?;
    if sigma2.len() != batch {
        return Err(Error::Shape(format!(
            "{} noise variances for a batch of {batch}",
            sigma2.len()
        )));
    }
    let noise = gaussian_tensor(latents.dims(), latents.dtype(), latents.device(), rng)?;
    let std: Vec<f64> = sigma2.iter().map(|s| (s / 2.0).sqrt()).collect();
    let std = Tensor::from_vec(std, (batch, 1), latents.device())?.to_dtype(latents.dtype())?;
    Ok(latents.add(&noise.broadcast_mul(&std)?)?)
}

fn check_coefficients(coeffs: &[f64]) -> Result<()> {
    if coeffs.is_empty() {
        return Err(Error::InvalidCoefficients("no coefficients".into()));
    }
    if coeffs.iter().any(|c| !(*c >= 0.0)) {
        return Err(Error::InvalidCoefficients(format!(
            "coefficients must be nonnegative: {coeffs:?}"
        )));
    }
    let sum: f64 = coeffs.iter().sum();
    if (sum - 1.0).abs() > COEFF_SUM_TOL {
        return Err(Error::InvalidCoefficients(format!(
            "coefficients sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Convex combination of the intended latent (coefficient `coeffs[0]`) and
/// interfering latents. Shorter latents are zero-padded to the longest.
pub fn mix_interference(
    primary: &SemanticLatent,
    interferers: &[SemanticLatent],
    coeffs: &[f64],
) -> Result<SemanticLatent> {
    check_coefficients(coeffs)?;
    if coeffs.len() != interferers.len() + 1 {
        return Err(Error::InvalidCoefficients(format!(
            "{} coefficients for {} sources",
            coeffs.len(),
            interferers.len() + 1
        )));
    }
    let len = interferers
        .iter()
        .map(SemanticLatent::len)
        .chain([primary.len()])
        .max()
        .unwrap_or(0);
    let mut values = vec![0.0; len];
    for (latent, c) in std::iter::once(primary).chain(interferers).zip(coeffs) {
        for (acc, v) in values.iter_mut().zip(&latent.values) {
            *acc += c * v;
        }
    }
    Ok(SemanticLatent {
        values,
        cbr: primary.cbr,
        power: primary.power,
    })
}

/// Equivalent SINR in dB for a convex mix: `c₁²P / (Σ_{i>1} cᵢ²P + σ²)`.
pub fn sinr_db(coeffs: &[f64], power: f64, sigma2: f64) -> Result<f64> {
    check_coefficients(coeffs)?;
    let signal = coeffs[0] * coeffs[0] * power;
    let interference: f64 = coeffs[1..].iter().map(|c| c * c * power).sum();
    let denom = interference + sigma2;
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument(
            "SINR undefined without noise or interference".into(),
        ));
    }
    Ok(10.0 * (signal / denom).log10())
}

/// Drop each complex symbol independently with probability
/// `1 - cbr_test / cbr_train`, then restore the power constraint.
///
/// If every symbol is dropped the all-zero latent is returned.
pub fn stochastic_mask<R: Rng + ?Sized>(
    latent: &SemanticLatent,
    cbr_test: f64,
    cbr_train: f64,
    rng: &mut R,
) -> Result<SemanticLatent> {
    if !(cbr_test > 0.0) {
        return Err(Error::InvalidArgument(format!("cbr {cbr_test} must be positive")));
    }
    if cbr_test > cbr_train {
        return Err(Error::CbrExceedsTrained {
            requested: cbr_test,
            trained: cbr_train,
        });
    }
    let keep = cbr_test / cbr_train;
    let mut values = latent.values.clone();
    for pair in values.chunks_exact_mut(2) {
        if !rng.random_bool(keep) {
            pair[0] = 0.0;
            pair[1] = 0.0;
        }
    }
    if values.iter().all(|v| *v == 0.0) {
        return Ok(SemanticLatent {
            values,
            cbr: cbr_test,
            power: latent.power,
        });
    }
    normalize_power(values, cbr_test, latent.power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_vec, seeded};
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    #[test]
    fn normalized_unit_power_latent_is_unchanged() {
        let v = vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0];
        let l = normalize_power(v.clone(), 0.3, 1.0).unwrap();
        assert_eq!(l.values(), v.as_slice());
        assert_eq!(l.average_power(), 1.0);
    }

    #[test]
    fn zero_latent_is_rejected() {
        assert!(matches!(
            normalize_power(vec![0.0; 8], 0.3, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(normalize_power(vec![1.0; 3], 0.3, 1.0), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent_and_meets_power(
            v in prop::collection::vec(-10.0f64..10.0, 1..64).prop_map(|mut v| {
                if v.len() % 2 == 1 { v.push(0.5); }
                v
            }),
            power in 0.1f64..4.0,
        ) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-6));
            let once = normalize_power(v, 0.3, power).unwrap();
            prop_assert!((once.average_power() - power).abs() < 1e-9);
            let twice = once.clone().renormalized().unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn snr_sigma_round_trip(sigma2 in 1e-6f64..1e3, power in 0.1f64..10.0) {
            let back = sigma2_from_snr(snr_from_sigma2(sigma2, power), power);
            prop_assert!((back - sigma2).abs() <= 1e-12 * sigma2.max(1.0));
        }
    }

    #[test]
    fn tensor_normalization_matches_vector_path() {
        let mut rng = seeded(4);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(10, &mut rng)).collect();
        let flat: Vec<f64> = rows.concat();
        let t = Tensor::from_vec(flat, (3, 10), &Device::Cpu).unwrap();
        let out = normalize_power_tensor(&t, 2.0).unwrap().to_vec2::<f64>().unwrap();
        for (row, got) in rows.into_iter().zip(out) {
            let want = normalize_power(row, 0.3, 2.0).unwrap();
            for (a, b) in want.values().iter().zip(&got) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_power_zero_db_gives_unit_noise() {
        let cfg = ChannelConfig::new(0.0, 1.0).unwrap();
        assert_eq!(cfg.sigma2(), 1.0);
    }

    #[test]
    fn infinite_snr_is_identity() {
        let l = normalize_power(vec![0.3, -0.2, 0.9, 0.1], 0.3, 1.0).unwrap();
        let cfg = ChannelConfig::new(f64::INFINITY, 1.0).unwrap();
        assert_eq!(cfg.sigma2(), 0.0);
        assert_eq!(awgn(&l, &cfg, &mut seeded(1)), l);
    }

    #[test]
    fn awgn_is_seed_deterministic() {
        let l = normalize_power(vec![0.3, -0.2, 0.9, 0.1], 0.3, 1.0).unwrap();
        let cfg = ChannelConfig::new(5.0, 1.0).unwrap();
        assert_eq!(awgn(&l, &cfg, &mut seeded(3)), awgn(&l, &cfg, &mut seeded(3)));
    }

    #[test]
    fn awgn_component_variance() {
        let n = 1_000_000;
        let l = SemanticLatent::from_raw(vec![0.0; n], 0.3, 1.0).unwrap();
        let cfg = ChannelConfig::new(3.0, 1.0).unwrap();
        let out = awgn(&l, &cfg, &mut seeded(21));
        let var = out.values().iter().map(|v| v * v).sum::<f64>() / n as f64;
        let want = cfg.sigma2() / 2.0;
        let se = want * (2.0 / n as f64).sqrt();
        assert!((var - want).abs() < 3.0 * se, "{var} vs {want}");
    }

    #[test]
    fn awgn_tensor_adds_per_sample_noise() {
        let x = Tensor::zeros((2, 4000), DType::F64, &Device::Cpu).unwrap();
        let y = awgn_tensor(&x, &[0.0, 2.0], &mut seeded(1)).unwrap().to_vec2::<f64>().unwrap();
        assert!(y[0].iter().all(|v| *v == 0.0));
        let var = y[1].iter().map(|v| v * v).sum::<f64>() / 4000.0;
        assert!((var - 1.0).abs() < 0.1);
    }

    #[test]
    fn single_user_mix_is_identity() {
        let l = normalize_power(vec![0.3, -0.2, 0.9, 0.1], 0.3, 1.0).unwrap();
        assert_eq!(mix_interference(&l, &[], &[1.0]).unwrap(), l);
    }

    #[test]
    fn mix_pads_and_combines() {
        let a = SemanticLatent::from_raw(vec![1.0, 1.0, 1.0, 1.0], 0.3, 1.0).unwrap();
        let b = SemanticLatent::from_raw(vec![2.0, 2.0], 0.2, 1.0).unwrap();
        let m = mix_interference(&a, &[b], &[0.75, 0.25]).unwrap();
        assert_eq!(m.values(), &[1.25, 1.25, 0.75, 0.75]);
    }

    #[test]
    fn mix_rejects_bad_coefficients() {
        let a = SemanticLatent::from_raw(vec![1.0, 1.0], 0.3, 1.0).unwrap();
        assert!(mix_interference(&a, &[a.clone()], &[0.8, 0.3]).is_err());
        assert!(mix_interference(&a, &[a.clone()], &[1.2, -0.2]).is_err());
        assert!(mix_interference(&a, &[a.clone()], &[1.0]).is_err());
    }

    #[test]
    fn sinr_reproduces_reported_values() {
        let a = sinr_db(&[0.8, 0.2], 1.0, 1.0).unwrap();
        assert!((a - (-2.10)).abs() < 0.05, "{a}");
        let b = sinr_db(&[0.9, 0.1], 1.0, 0.01).unwrap();
        assert!((b - 16.07).abs() < 0.05, "{b}");
        assert_eq!(sinr_db(&[1.0, 0.0], 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn mask_identity_at_equal_cbr() {
        let l = normalize_power(vec![0.3, -0.2, 0.9, 0.1], 0.3, 1.0).unwrap();
        let m = stochastic_mask(&l, 0.3, 0.3, &mut seeded(2)).unwrap();
        for (a, b) in m.values().iter().zip(l.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_keep_rate_and_power() {
        let n = 100_000;
        let mut rng = seeded(8);
        let l = normalize_power(gaussian_vec(2 * n, &mut rng), 0.4, 1.0).unwrap();
        let m = stochastic_mask(&l, 0.2, 0.4, &mut rng).unwrap();
        let kept = m
            .values()
            .chunks_exact(2)
            .filter(|p| p[0] != 0.0 || p[1] != 0.0)
            .count();
        let rate = kept as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((rate - 0.5).abs() < 3.0 * se, "{rate}");
        assert!((m.average_power() - 1.0).abs() < 1e-9);
        assert_eq!(m.cbr(), 0.2);
        // Dropped symbols are zeroed as whole pairs.
        assert!(m.values().chunks_exact(2).all(|p| (p[0] == 0.0) == (p[1] == 0.0)));
    }

    #[test]
    fn mask_rejects_upsampling() {
        let l = normalize_power(vec![0.3, -0.2], 0.3, 1.0).unwrap();
        assert!(matches!(
            stochastic_mask(&l, 0.4, 0.3, &mut seeded(0)),
            Err(Error::CbrExceedsTrained { .. })
        ));
    }
}
