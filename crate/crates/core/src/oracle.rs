//! Closed-form references for the diffusion math and the consistency
//! experiment on a linear-Gaussian toy.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::random::{gaussian_vec, substream};
use crate::schedules::DiffusionSchedule;
use crate::{Error, Result};

/// `x₀ ~ N(m, Σ₀)`, `y = A x₀ + n` with `n ~ N(0, s² I)`, diffused with the
/// conditional forward kernel at a fixed step.
#[derive(Debug, Clone)]
pub struct LinearGaussianToy {
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    pub obs_map: DMatrix<f64>,
    pub obs_noise_var: f64,
    pub schedule: DiffusionSchedule,
}

/// Affine conditional mean `E[x₀ | o] = m + K (o − μ_o)` with `o = (y, x_t)`,
/// and the residual covariance.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub gain: DMatrix<f64>,
    pub obs_mean: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub residual_cov: DMatrix<f64>,
}

impl Posterior {
    pub fn mean(&self, y: &DVector<f64>, x_t: &DVector<f64>) -> DVector<f64> {
        let o = stack(y, x_t);
        &self.prior_mean + &self.gain * (o - &self.obs_mean)
    }

    /// Per-coordinate Bayes risk `tr(Σ_res) / d`.
    pub fn floor(&self) -> f64 {
        self.residual_cov.trace() / self.prior_mean.len() as f64
    }
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Square-root factor of a positive semidefinite matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

impl LinearGaussianToy {
    pub fn new(
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
        obs_map: DMatrix<f64>,
        obs_noise_var: f64,
        schedule: DiffusionSchedule,
    ) -> Result<Self> {
        let d = prior_mean.len();
        if prior_cov.shape() != (d, d) || obs_map.shape() != (d, d) {
            return Err(Error::Shape(format!(
                "prior covariance {:?} and observation map {:?} must be {d}x{d}",
                prior_cov.shape(),
                obs_map.shape()
            )));
        }
        if !(obs_noise_var >= 0.0) {
            return Err(Error::InvalidArgument(format!("observation noise variance {obs_noise_var}")));
        }
        if prior_cov.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
            return Err(Error::Singular("prior covariance is not positive semidefinite".into()));
        }
        Ok(LinearGaussianToy {
            prior_mean,
            prior_cov,
            obs_map,
            obs_noise_var,
            schedule,
        })
    }

    /// Two-dimensional default with correlated prior and a mixing observation.
    pub fn default_2d() -> Self {
        LinearGaussianToy::new(
            DVector::from_vec(vec![0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]),
            0.25,
            DiffusionSchedule::standard(),
        )
        .expect("valid constants")
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    /// `x_t = B x₀ + w√ᾱ n + √δ ε` with `B = (1−w)√ᾱ I + w√ᾱ A`.
    fn kernel(&self, t: usize) -> Result<(DMatrix<f64>, f64, f64)> {
        self.schedule.check_step(t)?;
        let s = self.schedule.alpha_bar(t).sqrt();
        let w = self.schedule.w(t);
        let d = self.dim();
        let b = DMatrix::identity(d, d) * ((1.0 - w) * s) + &self.obs_map * (w * s);
        Ok((b, w * s, self.schedule.delta(t)))
    }

    /// Gaussian conditioning of `x₀` on `(y, x_t)` at step `t`.
    pub fn posterior(&self, t: usize) -> Result<Posterior> {
        let d = self.dim();
        let (b, g, delta) = self.kernel(t)?;
        let a = &self.obs_map;
        let s0 = &self.prior_cov;
        let s2 = self.obs_noise_var;
        let eye = DMatrix::<f64>::identity(d, d);

        let c_yy = a * s0 * a.transpose() + &eye * s2;
        let c_yx = a * s0 * b.transpose() + &eye * (g * s2);
        let c_xx = &b * s0 * b.transpose() + &eye * (g * g * s2 + delta);
        let mut c_oo = DMatrix::zeros(2 * d, 2 * d);
        c_oo.view_mut((0, 0), (d, d)).copy_from(&c_yy);
        c_oo.view_mut((0, d), (d, d)).copy_from(&c_yx);
        c_oo.view_mut((d, 0), (d, d)).copy_from(&c_yx.transpose());
        c_oo.view_mut((d, d), (d, d)).copy_from(&c_xx);
        let mut c_0o = DMatrix::zeros(d, 2 * d);
        c_0o.view_mut((0, 0), (d, d)).copy_from(&(s0 * a.transpose()));
        c_0o.view_mut((0, d), (d, d)).copy_from(&(s0 * b.transpose()));

        let chol = c_oo
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("observation covariance at t = {t} is singular")))?;
        let gain = chol.solve(&c_0o.transpose()).transpose();
        let residual_cov = s0 - &gain * c_0o.transpose();
        let m = &self.prior_mean;
        let obs_mean = stack(&(a * m), &(&b * m));
        Ok(Posterior {
            gain,
            obs_mean,
            prior_mean: m.clone(),
            residual_cov,
        })
    }

    /// Joint draws of `(x₀, y, x_t)` at step `t`.
    pub fn sample<R: Rng + ?Sized>(&self, t: usize, n: usize, rng: &mut R) -> Result<Vec<[DVector<f64>; 3]>> {
        let d = self.dim();
        let (b, g, delta) = self.kernel(t)?;
        let root = psd_sqrt(&self.prior_cov);
        let s = self.obs_noise_var.sqrt();
        Ok((0..n)
            .map(|_| {
                let x0 = &self.prior_mean + &root * DVector::from_vec(gaussian_vec(d, rng));
                let noise = DVector::from_vec(gaussian_vec(d, rng)) * s;
                let eps = DVector::from_vec(gaussian_vec(d, rng)) * delta.sqrt();
                let y = &self.obs_map * &x0 + &noise;
                let x_t = &b * &x0 + noise * g + eps;
                [x0, y, x_t]
            })
            .collect())
    }
}

/// `E[x₀ | x_t, y]` at step `t`.
pub fn analytic_posterior_mean(
    toy: &LinearGaussianToy,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>> {
    Ok(toy.posterior(t)?.mean(y, x_t))
}

/// Settings for [`consistency_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub step: usize,
    pub holdout: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            n_list: vec![100, 1_000, 10_000, 100_000],
            seeds: (0..10).collect(),
            step: 100,
            holdout: 2_000,
        }
    }
}

/// One `(n, seed)` cell of the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub seed: u64,
    /// Mean squared distance per coordinate between the fitted estimator and
    /// the analytic conditional mean on held-out points.
    pub mse: f64,
    /// Held-out per-coordinate loss against the true `x₀`.
    pub holdout_loss: f64,
    pub floor: f64,
    /// False when the normal equations were singular and a pseudo-inverse
    /// was used instead.
    pub converged: bool,
}

fn features(y: &DVector<f64>, x_t: &DVector<f64>) -> DVector<f64> {
    let mut f = stack(y, x_t).data.as_vec().clone();
    f.push(1.0);
    DVector::from_vec(f)
}

/// Least-squares fit of an affine estimator `x̂₀ = W [y; x_t; 1]`, the
/// minimizer of the n-sample denoising loss over that class.
fn fit_affine(draws: &[[DVector<f64>; 3]]) -> (DMatrix<f64>, bool) {
    let d = draws[0][0].len();
    let p = 2 * d + 1;
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut cross = DMatrix::<f64>::zeros(p, d);
    for [x0, y, x_t] in draws {
        let f = features(y, x_t);
        gram += &f * f.transpose();
        cross += &f * x0.transpose();
    }
    match gram.clone().cholesky() {
        Some(ch) => (ch.solve(&cross).transpose(), true),
        None => {
            let pinv = gram.pseudo_inverse(1e-12).expect("tolerance is nonnegative");
            ((pinv * cross).transpose(), false)
        }
    }
}

/// Fit the estimator on `n` draws for each `(n, seed)` cell and measure its
/// distance to the analytic conditional mean on a common held-out set.
pub fn consistency_experiment(toy: &LinearGaussianToy, cfg: &ConsistencyConfig) -> Result<Vec<ConsistencyRow>> {
    if cfg.n_list.is_empty() || cfg.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("n_list must be nonempty and strictly increasing".into()));
    }
    if cfg.n_list[0] == 0 || cfg.holdout == 0 {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let posterior = toy.posterior(cfg.step)?;
    let floor = posterior.floor();
    let d = toy.dim() as f64;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let holdout = toy.sample(cfg.step, cfg.holdout, &mut substream(seed, 0))?;
        let targets: Vec<DVector<f64>> = holdout.iter().map(|[_, y, x_t]| posterior.mean(y, x_t)).collect();
        for (i, &n) in cfg.n_list.iter().enumerate() {
            let train = toy.sample(cfg.step, n, &mut substream(seed, 1 + i as u64))?;
            let (weights, converged) = fit_affine(&train);
            let mut mse = 0.0;
            let mut loss = 0.0;
            for ([x0, y, x_t], target) in holdout.iter().zip(&targets) {
                let pred = &weights * features(y, x_t);
                mse += (&pred - target).norm_squared();
                loss += (&pred - x0).norm_squared();
            }
            let m = cfg.holdout as f64 * d;
            rows.push(ConsistencyRow {
                n,
                seed,
                mse: mse / m,
                holdout_loss: loss / m,
                floor,
                converged,
            });
        }
    }
    Ok(rows)
}

/// Median `mse` per `n`, in `n_list` order.
pub fn median_by_n(rows: &[ConsistencyRow]) -> Vec<(usize, f64)> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.mse).collect();
            (n, median(&mut v))
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len() / 2;
    if values.len() % 2 == 1 {
        values[m]
    } else {
        0.5 * (values[m - 1] + values[m])
    }
}

/// How the reference sampler scales its injected noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceVariance {
    /// `1 − ᾱ_t`.
    Marginal,
    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    Posterior,
}

/// Textbook DDPM reverse step, computed from the raw β values only:
/// `x_{t−1} = (x_t − β_t / √(1−ᾱ_t) ε̂) / √α_t + σ_t z`, with no noise at
/// `t = 1`.
pub fn vanilla_ddpm_reference_step(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    betas: &[f64],
    variance: ReferenceVariance,
    z: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if t == 0 || t > betas.len() {
        return Err(Error::StepOutOfRange { t, max: betas.len() });
    }
    if x_t.len() != eps_hat.len() || z.is_some_and(|z| z.len() != x_t.len()) {
        return Err(Error::Shape("x_t, eps_hat and z must have equal length".into()));
    }
    let beta = betas[t - 1];
    let alpha = 1.0 - beta;
    let abar: f64 = betas[..t].iter().map(|b| 1.0 - b).product();
    let abar_prev: f64 = betas[..t - 1].iter().map(|b| 1.0 - b).product();
    let var = match variance {
        ReferenceVariance::Marginal => 1.0 - abar,
        ReferenceVariance::Posterior => (1.0 - abar_prev) / (1.0 - abar) * beta,
    };
    let sigma = if t > 1 { var.sqrt() } else { 0.0 };
    let k = beta / (1.0 - abar).sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (x, e))| {
            let noise = z.map_or(0.0, |z| sigma * z[i]);
            (x - k * e) / alpha.sqrt() + noise
        })
        .collect())
}

/// Textbook DDPM forward marginal `√ᾱ_t x₀ + √(1−ᾱ_t) ε`.
pub fn vanilla_ddpm_forward(x0: &[f64], eps: &[f64], t: usize, betas: &[f64]) -> Result<Vec<f64>> {
    if t > betas.len() {
        return Err(Error::StepOutOfRange { t, max: betas.len() });
    }
    let abar: f64 = betas[..t].iter().map(|b| 1.0 - b).product();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(x, e)| abar.sqrt() * x + (1.0 - abar).sqrt() * e)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::seeded;
    use crate::schedules::WeightSchedule;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn uninformative_observation_gives_ddpm_posterior() {
        let schedule = DiffusionSchedule::new(200, 1e-4, 0.0095, WeightSchedule::ConstantZero).unwrap();
        let prior_cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]);
        let m = dv(&[0.5, -0.3]);
        let toy = LinearGaussianToy::new(m.clone(), prior_cov.clone(), DMatrix::identity(2, 2), 1e12, schedule.clone())
            .unwrap();
        let t = 80;
        let (x_t, y) = (dv(&[0.2, 1.1]), dv(&[5.0, -4.0]));
        let got = analytic_posterior_mean(&toy, &x_t, &y, t).unwrap();
        // E[x₀|x_t] = m + √ᾱ Σ₀ (ᾱ Σ₀ + (1−ᾱ) I)⁻¹ (x_t − √ᾱ m), worked by hand.
        let ab = schedule.alpha_bar(t);
        let s = &prior_cov * ab + DMatrix::identity(2, 2) * (1.0 - ab);
        let want = &m + &prior_cov * ab.sqrt() * s.try_inverse().unwrap() * (&x_t - &m * ab.sqrt());
        assert!((got - want).norm() < 1e-9);
    }

    #[test]
    fn perfect_observation_returns_y() {
        let toy = LinearGaussianToy::new(
            dv(&[0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]),
            DMatrix::identity(2, 2),
            0.0,
            DiffusionSchedule::standard(),
        )
        .unwrap();
        let y = dv(&[0.9, 0.1]);
        let got = analytic_posterior_mean(&toy, &dv(&[-2.0, 3.0]), &y, 150).unwrap();
        assert!((got - y).norm() < 1e-9);
    }

    #[test]
    fn no_diffusion_limit_returns_x_t() {
        let schedule = DiffusionSchedule::from_betas(vec![1e-12, 1e-12], WeightSchedule::ConstantZero).unwrap();
        let toy = LinearGaussianToy::new(
            dv(&[0.5, -0.3]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 0.8]),
            DMatrix::identity(2, 2),
            1.0,
            schedule,
        )
        .unwrap();
        let x_t = dv(&[0.7, -1.2]);
        let got = analytic_posterior_mean(&toy, &x_t, &dv(&[3.0, 3.0]), 1).unwrap();
        assert!((got - x_t).norm() < 1e-6);
    }

    #[test]
    fn posterior_mean_matches_empirical_regression() {
        let toy = LinearGaussianToy::default_2d();
        let post = toy.posterior(60).unwrap();
        let draws = toy.sample(60, 50_000, &mut seeded(3)).unwrap();
        let err: f64 = draws
            .iter()
            .map(|[x0, y, x_t]| (post.mean(y, x_t) - x0).norm_squared())
            .sum::<f64>()
            / (draws.len() * 2) as f64;
        assert!((err / post.floor() - 1.0).abs() < 0.03, "{err} vs {}", post.floor());
    }

    #[test]
    fn deterministic_prior_fits_constant() {
        let toy = LinearGaussianToy::new(
            dv(&[0.4, -0.8]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            0.3,
            DiffusionSchedule::standard(),
        )
        .unwrap();
        let cfg = ConsistencyConfig {
            n_list: vec![20, 500],
            seeds: vec![1, 2],
            step: 50,
            holdout: 100,
        };
        for row in consistency_experiment(&toy, &cfg).unwrap() {
            assert!(row.mse < 1e-18, "{row:?}");
            assert!(row.converged);
        }
    }

    #[test]
    fn consistency_improves_with_samples() {
        let toy = LinearGaussianToy::default_2d();
        let cfg = ConsistencyConfig {
            n_list: vec![100, 1_000, 10_000],
            seeds: (0..5).collect(),
            ..ConsistencyConfig::default()
        };
        let rows = consistency_experiment(&toy, &cfg).unwrap();
        let med = median_by_n(&rows);
        assert!(med[0].1 > med[1].1 && med[1].1 > med[2].1, "{med:?}");
        assert!(rows.iter().all(|r| r.converged && r.holdout_loss >= 0.9 * r.floor));
        assert!(consistency_experiment(&toy, &ConsistencyConfig { n_list: vec![10, 10], ..cfg }).is_err());
    }

    #[test]
    fn reference_step_edge_cases() {
        let betas = DiffusionSchedule::standard().betas().to_vec();
        let x = [0.3, -0.6];
        let out = vanilla_ddpm_reference_step(&x, &[0.0, 0.0], 5, &betas, ReferenceVariance::Posterior, None).unwrap();
        let a = 1.0 - betas[4];
        assert!((out[0] - x[0] / a.sqrt()).abs() < 1e-15);
        let z = gaussian_vec(2, &mut seeded(1));
        let a1 = vanilla_ddpm_reference_step(&x, &x, 9, &betas, ReferenceVariance::Marginal, Some(&z)).unwrap();
        let z2 = gaussian_vec(2, &mut seeded(1));
        let a2 = vanilla_ddpm_reference_step(&x, &x, 9, &betas, ReferenceVariance::Marginal, Some(&z2)).unwrap();
        assert_eq!(a1, a2);
        assert!(vanilla_ddpm_reference_step(&x, &x, 0, &betas, ReferenceVariance::Marginal, None).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
