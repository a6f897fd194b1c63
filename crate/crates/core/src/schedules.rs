//! Per-timestep noise and conditioning schedules.
//!
//! Timesteps are 1-indexed (`t ∈ 1..=T`). The boundary values `ᾱ_0 = 1`,
//! `w_0 = 0` and `δ_0 = 0` are used wherever a formula reaches `t - 1 = 0`.
//! All coefficients are computed once at construction so the sampler loop is
//! pure table lookup.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of the conditioning-weight schedule `w_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum WeightSchedule {
    /// Linear from `w_1 = 0` to `w_T = min(end, 1)`. If that endpoint would
    /// make `δ_T` non-positive it is pulled just inside the positivity limit.
    Linear { end: f64 },
    /// `w_t = 0` everywhere, which recovers an unconditional DDPM.
    ConstantZero,
}

impl Default for WeightSchedule {
    fn default() -> Self {
        WeightSchedule::Linear { end: 1.0 }
    }
}

/// Fraction of the positivity limit used when the requested `w_T` would make
/// `δ_T` non-positive.
const W_CLAMP_MARGIN: f64 = 0.999;

/// Serializable parameters of a linear-β schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub weights: WeightSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.0095,
            weights: WeightSchedule::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.steps, self.beta_start, self.beta_end, self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    w: Vec<f64>,
    delta: Vec<f64>,
    delta_cond: Vec<f64>,
    psi_x: Vec<f64>,
    psi_y: Vec<f64>,
    psi_eps: Vec<f64>,
}

impl DiffusionSchedule {
    /// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
    pub fn new(
        steps: usize,
        beta_start: f64,
        beta_end: f64,
        weights: WeightSchedule,
    ) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(beta, weights)
    }

    /// The schedule used throughout the experiments: T = 200, β from 1e-4 to
    /// 9.5e-3, linear conditioning weights ending at 1.
    pub fn standard() -> Self {
        Self::new(200, 1e-4, 0.0095, WeightSchedule::default())
            .expect("standard schedule parameters are valid")
    }

    pub fn from_betas(beta: Vec<f64>, weights: WeightSchedule) -> Result<Self> {
        let steps = beta.len();
        if steps < 2 {
            return Err(Error::InvalidSchedule(format!(
                "need at least 2 steps, got {steps}"
            )));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar: Vec<f64> = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();

        let w = match weights {
            WeightSchedule::ConstantZero => vec![0.0; steps],
            WeightSchedule::Linear { end } => {
                if !(end >= 0.0 && end.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "conditioning weight endpoint {end} must be finite and >= 0"
                    )));
                }
                let ab_last = alpha_bar[steps - 1];
                let limit = ((1.0 - ab_last) / ab_last).sqrt();
                let end = if end >= limit {
                    W_CLAMP_MARGIN * limit
                } else {
                    end
                }
                .min(1.0);
                (0..steps)
                    .map(|i| end * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        };
        let delta: Vec<f64> = alpha_bar
            .iter()
            .zip(&w)
            .map(|(ab, w)| (1.0 - ab) - w * w * ab)
            .collect();
        if let Some(i) = delta.iter().position(|d| !(*d > 0.0)) {
            return Err(Error::InvalidSchedule(format!(
                "delta_{} = {} is not positive",
                i + 1,
                delta[i]
            )));
        }

        let mut schedule = DiffusionSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
            w,
            delta,
            delta_cond: vec![0.0; steps],
            psi_x: vec![0.0; steps],
            psi_y: vec![0.0; steps],
            psi_eps: vec![0.0; steps],
        };
        for t in 1..=steps {
            let dc = schedule.delta_cond_formula(t);
            schedule.delta_cond[t - 1] = dc;
            let (px, py, pe) = schedule.psi_formula(t);
            schedule.psi_x[t - 1] = px;
            schedule.psi_y[t - 1] = py;
            schedule.psi_eps[t - 1] = pe;
        }
        let all = schedule
            .delta_cond
            .iter()
            .chain(&schedule.psi_x)
            .chain(&schedule.psi_y)
            .chain(&schedule.psi_eps);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSchedule(
                "non-finite sampler coefficient".into(),
            ));
        }
        Ok(schedule)
    }

    fn delta_cond_formula(&self, t: usize) -> f64 {
        let ratio = (1.0 - self.w(t)) / (1.0 - self.w(t - 1));
        self.delta(t) - ratio * ratio * self.alpha(t) * self.delta(t - 1)
    }

    fn psi_formula(&self, t: usize) -> (f64, f64, f64) {
        let (w_t, w_p) = (self.w(t), self.w(t - 1));
        let (d_t, d_p) = (self.delta(t), self.delta(t - 1));
        let d_c = self.delta_cond_formula(t);
        let a_t = self.alpha(t);
        let sa_t = a_t.sqrt();
        let psi_x = d_p * (1.0 - w_t) / (d_t * (1.0 - w_p)) * sa_t + (1.0 - w_p) * d_c / (d_t * sa_t);
        let psi_y = (w_p * d_t - w_t * (1.0 - w_t) / (1.0 - w_p) * a_t * d_p)
            * self.alpha_bar(t - 1).sqrt()
            / d_t;
        let psi_eps = (1.0 - w_p) * d_c * (1.0 - self.alpha_bar(t)).sqrt() / (d_t * sa_t);
        (psi_x, psi_y, psi_eps)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps,
            });
        }
        Ok(())
    }

    // Scalar accessors. All accept `t ∈ 0..=T`, with t = 0 the boundary.

    pub fn beta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.beta[t - 1]
        }
    }

    pub fn alpha(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha[t - 1]
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn w(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.w[t - 1]
        }
    }

    /// Forward-kernel variance `δ_t = (1 - ᾱ_t) - w_t² ᾱ_t`.
    pub fn delta(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.delta[t - 1]
        }
    }

    /// `δ_{t|t-1}`, the one-step conditional variance.
    pub fn delta_cond(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.delta_cond[t - 1]
        }
    }

    /// Variance of the Gaussian posterior `q(x_{t-1} | x_t, x_0, y)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            0.0
        } else {
            self.delta_cond(t) * self.delta(t - 1) / self.delta(t)
        }
    }

    /// Reverse-sampler coefficients `(ψ_x, ψ_y, ψ_ε)` for step `t`.
    ///
    /// Defined for `t ∈ 1..=T`; at `t = 1` the boundary convention reduces
    /// them to the vanilla DDPM values.
    pub fn sampler_coefficients(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        Ok((self.psi_x[t - 1], self.psi_y[t - 1], self.psi_eps[t - 1]))
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub fn deltas(&self) -> &[f64] {
        &self.delta
    }

    pub fn delta_conds(&self) -> &[f64] {
        &self.delta_cond
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn standard_linear(weights: WeightSchedule) -> DiffusionSchedule {
        DiffusionSchedule::new(200, 1e-4, 0.0095, weights).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = standard_linear(WeightSchedule::default());
        let mut prod = 1.0f64;
        for i in 0..200 {
            let beta = 1e-4 + (0.0095 - 1e-4) * i as f64 / 199.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(200) - prod).abs() < 1e-12);
        // frozen from a 40-digit product
        assert!((s.alpha_bar(200) - 0.381_722_135_219_535_5).abs() < 1e-12);
    }

    #[test]
    fn constant_zero_delta_is_one_minus_alpha_bar() {
        let s = standard_linear(WeightSchedule::ConstantZero);
        for t in 1..=200 {
            assert_eq!(s.delta(t), 1.0 - s.alpha_bar(t));
        }
    }

    #[test]
    fn final_delta_with_unit_weight() {
        let s = standard_linear(WeightSchedule::Linear { end: 1.0 });
        assert_eq!(s.w(200), 1.0);
        assert!((s.delta(200) - 0.236_555_729_560_929).abs() < 1e-12);
        assert!(s.deltas().iter().all(|d| *d > 0.0));
        assert_eq!(s.w(1), 0.0);
    }

    #[test]
    fn endpoint_is_clamped_to_keep_delta_positive() {
        // ᾱ_T = 0.9 gives a positivity limit of 1/3 for w_T.
        let betas = vec![0.05, 1.0 - 0.9 / 0.95];
        let s = DiffusionSchedule::from_betas(betas, WeightSchedule::Linear { end: 1.0 }).unwrap();
        let ab = s.alpha_bar(2);
        let limit = ((1.0 - ab) / ab).sqrt();
        assert!((s.w(2) - W_CLAMP_MARGIN * limit).abs() < 1e-12);
        assert!(s.delta(2) > 0.0);
        // Large endpoints are capped at 1 when that is already safe.
        let s = standard_linear(WeightSchedule::Linear { end: 5.0 });
        assert_eq!(s.w(200), 1.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiffusionSchedule::new(1, 1e-4, 0.01, WeightSchedule::default()).is_err());
        assert!(DiffusionSchedule::new(10, 0.0, 0.01, WeightSchedule::default()).is_err());
        assert!(DiffusionSchedule::new(10, 0.02, 0.01, WeightSchedule::default()).is_err());
        assert!(DiffusionSchedule::new(10, 0.01, 1.0, WeightSchedule::default()).is_err());
    }

    #[test]
    fn rejects_schedule_with_nonpositive_delta() {
        // A short, steep schedule where even a small endpoint pushes an
        // interior step past its own positivity limit.
        let betas = vec![1e-6, 1e-6, 1e-6, 0.9];
        let err = DiffusionSchedule::from_betas(betas, WeightSchedule::Linear { end: 3.0 });
        assert!(matches!(err, Err(Error::InvalidSchedule(_))), "{err:?}");
    }

    #[test]
    fn ddpm_reduction_of_coefficients() {
        let s = standard_linear(WeightSchedule::ConstantZero);
        for t in 1..=200 {
            let (px, py, pe) = s.sampler_coefficients(t).unwrap();
            let a = s.alpha(t);
            let ab = s.alpha_bar(t);
            assert!(rel(px, 1.0 / a.sqrt()) < 1e-12, "t={t}");
            assert_eq!(py, 0.0);
            let want = s.beta(t) / (a.sqrt() * (1.0 - ab).sqrt());
            assert!(rel(pe, want) < 1e-12, "t={t}: {pe} vs {want}");
        }
    }

    #[test]
    fn delta_cond_closed_form() {
        let s = standard_linear(WeightSchedule::default());
        for t in 2..=200 {
            let r = (1.0 - s.w(t)) / (1.0 - s.w(t - 1));
            let want = s.delta(t) - r * r * s.alpha(t) * s.delta(t - 1);
            assert_eq!(s.delta_cond(t), want);
        }
    }

    #[test]
    fn monotone_and_bounded() {
        let s = standard_linear(WeightSchedule::default());
        for t in 2..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.w(t) >= s.w(t - 1));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
        assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn step_bounds() {
        let s = standard_linear(WeightSchedule::default());
        assert!(s.sampler_coefficients(0).is_err());
        assert!(s.sampler_coefficients(201).is_err());
        assert!(s.sampler_coefficients(1).is_ok());
    }

    #[test]
    fn finite_over_parameter_grid() {
        for &steps in &[2usize, 10, 50, 200, 1000] {
            for &(b0, b1) in &[(1e-4, 0.0095), (1e-4, 0.02), (1e-3, 1e-3), (1e-5, 0.05)] {
                for weights in [
                    WeightSchedule::ConstantZero,
                    WeightSchedule::Linear { end: 0.5 },
                    WeightSchedule::Linear { end: 1.0 },
                ] {
                    let Ok(s) = DiffusionSchedule::new(steps, b0, b1, weights) else {
                        continue;
                    };
                    for t in 1..=steps {
                        let (a, b, c) = s.sampler_coefficients(t).unwrap();
                        assert!(a.is_finite() && b.is_finite() && c.is_finite());
                        assert!(s.delta(t) > 0.0);
                        assert!(s.posterior_variance(t).is_finite());
                    }
                }
            }
        }
    }
}
