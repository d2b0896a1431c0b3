use crate::error::{Error, Result};
use crate::numerics::Real;

/// Linear-β noise schedule with tables indexed `0..=T`; index 0 is the
/// clean signal (`ᾱ₀ = 1`, `β₀ = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Default β endpoints stretched by `1000/T` for `T < 1000`, keeping
/// `ᾱ_T` near the 1000-step value.
pub fn scaled_betas(t_max: usize) -> (f64, f64) {
    let k = if t_max > 0 && t_max < 1000 { 1000.0 / t_max as f64 } else { 1.0 };
    (DEFAULT_BETA_START * k, DEFAULT_BETA_END * k)
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 2 {
            return Err(Error::Config(format!("schedule needs T ≥ 2, got {t_max}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < {beta_start} ≤ {beta_end} < 1"
            )));
        }
        let mut betas = vec![0.0; t_max + 1];
        let mut alphas = vec![1.0; t_max + 1];
        let mut alpha_bars = vec![1.0; t_max + 1];
        for t in 1..=t_max {
            betas[t] = beta_start + (beta_end - beta_start) * (t - 1) as f64 / (t_max - 1) as f64;
            alphas[t] = 1.0 - betas[t];
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn default_for(t_max: usize) -> Result<Self> {
        Self::linear(t_max, DEFAULT_BETA_START, DEFAULT_BETA_END)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_max() {
            return Err(Error::Timestep {
                t,
                lo: 0,
                hi: self.t_max(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`; `t = 0` returns `x0`.
    pub fn q_sample<T: Real>(&self, x0: &[T], t: usize, eps: &[T]) -> Result<Vec<T>> {
        self.check(t)?;
        if x0.len() != eps.len() {
            return Err(Error::dim("q_sample", &[x0.len()], &[eps.len()]));
        }
        let ab = self.alpha_bars[t];
        Ok(q_sample_with(x0, eps, ab))
    }
}

/// Forward noising with an explicit `ᾱ`.
pub fn q_sample_with<T: Real>(x0: &[T], eps: &[T], alpha_bar: f64) -> Vec<T> {
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).sqrt());
    x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_entries_match_definition() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let expected = 0.9999 * (1.0 - (1e-4 + (0.02 - 1e-4) / 999.0));
        assert!((s.alpha_bar(2) - expected).abs() < 1e-15);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn last_alpha_bar_matches_log_space_product() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let log: f64 = (1..=1000)
            .map(|t| (1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() / log.exp() < 1e-10);
        assert!((s.alpha_bar(1000) - 4.0e-5).abs() < 0.1e-5, "{}", s.alpha_bar(1000));
    }

    #[test]
    fn schedule_algebra() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.02).unwrap();
        for t in 1..=200 {
            assert_eq!(s.alpha(t) + s.beta(t), 1.0);
            assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() <= 1e-15);
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
    }

    #[test]
    fn scaled_betas_keep_the_final_noise_level() {
        assert_eq!(scaled_betas(1000), (DEFAULT_BETA_START, DEFAULT_BETA_END));
        let (a, b) = scaled_betas(200);
        let short = NoiseSchedule::linear(200, a, b).unwrap();
        let long = NoiseSchedule::default_for(1000).unwrap();
        let ratio = short.alpha_bar(200) / long.alpha_bar(1000);
        assert!(ratio > 0.5 && ratio < 2.0, "{ratio}");
    }

    #[test]
    fn bad_parameters_are_config_errors() {
        assert!(matches!(NoiseSchedule::linear(1, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.0, 0.02), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 0.03, 0.02), Err(Error::Config(_))));
        assert!(matches!(NoiseSchedule::linear(10, 1e-4, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn q_sample_limits_and_range() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x0 = [1.0f64, -2.0];
        let eps = [0.5f64, 0.5];
        let x1 = s.q_sample(&x0, 1, &eps).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        // noise part bounded by √β₁‖ε‖, signal shrink by (1 − √ᾱ₁)‖x0‖
        let bound = s.beta(1).sqrt() * norm(&eps) + (1.0 - s.alpha_bar(1).sqrt()) * norm(&x0);
        let dist = norm(&[x1[0] - x0[0], x1[1] - x0[1]]);
        assert!(dist <= bound + 1e-15);
        assert!(dist <= s.beta(1).sqrt() * norm(&eps) * 1.01);
        assert_eq!(q_sample_with(&x0, &eps, 0.0), eps.to_vec());
        assert_eq!(s.q_sample(&x0, 0, &eps).unwrap(), x0.to_vec());
        assert!(matches!(s.q_sample(&x0, 11, &eps), Err(Error::Timestep { t: 11, .. })));
    }
}
