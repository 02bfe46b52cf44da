//! Cosine noise schedule.

use serde::{Deserialize, Serialize};

/// Default squish offset of the cosine schedule.
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every step's corruption probability.
pub const BETA_CLIP: f64 = 0.999;

/// Per-step corruption probabilities `beta[t]` for `t = 1..=T` and the
/// cumulative products `alpha_bar[t] = prod_{tau<=t} (1 - beta[tau])`.
///
/// `alpha_bar` is stored with a leading 1.0 so `alpha_bar(t - 1)` is valid at
/// `t = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, turned into betas via
    /// `beta_t = 1 - alpha_bar(t)/alpha_bar(t-1)` clipped to `BETA_CLIP`.
    /// The stored `alpha_bar` is recomputed from the clipped betas so the
    /// cumulative-kernel closed form stays exact.
    pub fn cosine(timesteps: usize, offset: f64) -> Self {
        assert!(timesteps >= 1, "need at least one timestep");
        assert!(offset > 0.0, "offset must be positive");
        let f = |t: f64| {
            let x = ((t / timesteps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut betas = Vec::with_capacity(timesteps);
        let mut prev = 1.0;
        for t in 1..=timesteps {
            let bar = f(t as f64) / f0;
            let beta = (1.0 - bar / prev).min(BETA_CLIP);
            betas.push(beta);
            prev = bar;
        }
        Self::from_betas(betas)
    }

    /// Builds the schedule from explicit betas in `(0, BETA_CLIP]`.
    pub fn from_betas(betas: Vec<f64>) -> Self {
        assert!(!betas.is_empty());
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for (i, &beta) in betas.iter().enumerate() {
            assert!(
                beta > 0.0 && beta <= BETA_CLIP,
                "beta[{}] = {beta} outside (0, {BETA_CLIP}]",
                i + 1
            );
            acc *= 1.0 - beta;
            alpha_bars.push(acc);
        }
        Self { betas, alpha_bars }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(t)`, `0 <= t <= T` (with `alpha_bar(0) = 1`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_256_has_valid_betas_and_tiny_terminal_alpha_bar() {
        let s = NoiseSchedule::cosine(256, DEFAULT_COSINE_OFFSET);
        assert_eq!(s.timesteps(), 256);
        for t in 1..=256 {
            let beta = s.beta(t);
            assert!(beta > 0.0 && beta <= BETA_CLIP, "beta[{t}] = {beta}");
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1), "alpha_bar must strictly decrease");
        }
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(256) < 1e-3, "alpha_bar(T) = {}", s.alpha_bar(256));
    }

    #[test]
    fn first_beta_matches_direct_cosine_evaluation() {
        let timesteps = 4;
        let offset = DEFAULT_COSINE_OFFSET;
        let s = NoiseSchedule::cosine(timesteps, offset);
        let f = |t: f64| {
            let x =
                ((t / timesteps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        for t in 1..=timesteps {
            let expected = 1.0 - f(t as f64) / f(t as f64 - 1.0);
            if expected <= BETA_CLIP {
                assert!((s.beta(t) - expected).abs() < 1e-14, "t = {t}");
            } else {
                assert_eq!(s.beta(t), BETA_CLIP);
            }
        }
    }

    #[test]
    fn alpha_bar_is_cumulative_product_of_clipped_betas() {
        let s = NoiseSchedule::cosine(32, DEFAULT_COSINE_OFFSET);
        let mut acc = 1.0;
        for t in 1..=32 {
            acc *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - acc).abs() < 1e-15);
        }
    }
}
