//! Stochastic volatility with alpha-stable noise:
//! `x_1 ~ N(mu, sigma^2 / (1 - rho^2))`,
//! `x_{t+1} = mu + rho (x_t - mu) + sigma u_t`,
//! `y_t ~ Stable(alpha, 0, exp(x_t / 2), 0)`.

use rand_distr::{Distribution, StandardNormal};

use super::stable::{stable_sample, StableParams};
use crate::composite::HiddenMarkov;
use crate::error::{Error, Result};
use crate::gauss::{std_normal_cdf, std_normal_inverse_cdf};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvParams {
    pub mu: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl SvParams {
    /// `(mu, Phi^-1((rho + 1) / 2), log sigma, Phi^-1(alpha - 1))`.
    pub fn to_theta(&self) -> Result<[f64; 4]> {
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::NonStationary(self.rho));
        }
        if !(self.sigma > 0.0 && self.alpha > 1.0 && self.alpha < 2.0 && self.mu.is_finite()) {
            return Err(Error::DomainError(format!(
                "need sigma > 0 and 1 < alpha < 2, got {self:?}"
            )));
        }
        Ok([
            self.mu,
            std_normal_inverse_cdf((self.rho + 1.0) / 2.0)?,
            self.sigma.ln(),
            std_normal_inverse_cdf(self.alpha - 1.0)?,
        ])
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        Self {
            mu: theta[0],
            rho: 2.0 * std_normal_cdf(theta[1]) - 1.0,
            sigma: theta[2].exp(),
            alpha: 1.0 + std_normal_cdf(theta[3]),
        }
    }

    pub fn stationary_var(&self) -> f64 {
        self.sigma * self.sigma / (1.0 - self.rho * self.rho)
    }
}

/// The SV model as an HMM over theta.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StableSv;

impl StableSv {
    /// One path of length `n`: `(latent, observed)`.
    pub fn simulate_path(
        &self,
        p: &SvParams,
        n: usize,
        rng: &mut SimRng,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let theta = p.to_theta()?;
        crate::composite::sample_latent_block(self, n, &theta, rng)
    }
}

impl HiddenMarkov for StableSv {
    fn dim(&self) -> usize {
        4
    }

    fn param_names(&self) -> Vec<String> {
        ["mu", "probit_rho", "log_sigma", "probit_alpha_minus_1"]
            .map(String::from)
            .to_vec()
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        let p = SvParams::from_theta(theta);
        if !(p.rho.abs() < 1.0) {
            return Err(Error::NonStationary(p.rho));
        }
        Ok(())
    }

    fn sample_initial(&self, theta: &[f64], rng: &mut SimRng) -> f64 {
        let p = SvParams::from_theta(theta);
        let n: f64 = StandardNormal.sample(rng);
        p.mu + p.stationary_var().sqrt() * n
    }

    fn sample_transition(&self, x: f64, theta: &[f64], rng: &mut SimRng) -> f64 {
        let p = SvParams::from_theta(theta);
        let n: f64 = StandardNormal.sample(rng);
        p.mu + p.rho * (x - p.mu) + p.sigma * n
    }

    fn sample_emission(&self, x: f64, theta: &[f64], rng: &mut SimRng) -> f64 {
        let p = SvParams::from_theta(theta);
        let s = StableParams {
            alpha: p.alpha,
            beta: 0.0,
            gamma: (0.5 * x).exp(),
            delta: 0.0,
        };
        stable_sample(&s, rng)
    }
}
