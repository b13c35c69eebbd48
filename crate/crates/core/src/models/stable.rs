//! Alpha-stable variates in the continuous (S0) parametrization, with
//! characteristic function
//!
//! ```text
//! alpha != 1: exp[i d t - g^a |t|^a {1 + i b tan(pi a / 2) sgn(t) (|g t|^(1-a) - 1)}]
//! alpha == 1: exp[i d t - g |t| {1 + i b (2 / pi) sgn(t) log|g t|}]
//! ```
//!
//! Draws use Chambers-Mallows-Stuck in the S1 form, then a deterministic
//! location shift.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::Simulator;
use crate::error::{Error, Result};
use crate::gauss::{std_normal_cdf, std_normal_inverse_cdf};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl StableParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(Error::DomainError(format!(
                "alpha = {} not in (0, 2]",
                self.alpha
            )));
        }
        if !(self.beta > -1.0 && self.beta < 1.0) {
            return Err(Error::DomainError(format!(
                "beta = {} not in (-1, 1)",
                self.beta
            )));
        }
        if !(self.gamma > 0.0) || !self.delta.is_finite() {
            return Err(Error::DomainError(format!(
                "need gamma > 0 and finite delta, got ({}, {})",
                self.gamma, self.delta
            )));
        }
        Ok(())
    }

    /// `(Phi^-1(alpha / 2), Phi^-1((beta + 1) / 2), log gamma, delta)`.
    /// Undefined at `alpha = 2`.
    pub fn to_theta(&self) -> Result<[f64; 4]> {
        self.validate()?;
        Ok([
            std_normal_inverse_cdf(self.alpha / 2.0)?,
            std_normal_inverse_cdf((self.beta + 1.0) / 2.0)?,
            self.gamma.ln(),
            self.delta,
        ])
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        Self {
            alpha: 2.0 * std_normal_cdf(theta[0]),
            beta: 2.0 * std_normal_cdf(theta[1]) - 1.0,
            gamma: theta[2].exp(),
            delta: theta[3],
        }
    }

    /// `(Re, Im)` of the characteristic function at `t`.
    pub fn characteristic_function(&self, t: f64) -> (f64, f64) {
        let Self {
            alpha: a,
            beta: b,
            gamma: g,
            delta: d,
        } = *self;
        let (log_mod, arg) = if t == 0.0 {
            (0.0, 0.0)
        } else if a == 1.0 {
            let s = g * t.abs();
            (
                -s,
                d * t - s * b * (2.0 / PI) * t.signum() * (g * t.abs()).ln(),
            )
        } else {
            let s = (g * t.abs()).powf(a);
            let skew = b * (PI * a / 2.0).tan() * t.signum() * ((g * t.abs()).powf(1.0 - a) - 1.0);
            (-s, d * t - s * skew)
        };
        let m = log_mod.exp();
        (m * arg.cos(), m * arg.sin())
    }
}

/// One draw from the stable law with the characteristic function above.
pub fn stable_sample(p: &StableParams, rng: &mut SimRng) -> f64 {
    let v = PI * (rng.random::<f64>() - 0.5);
    let w: f64 = Exp1.sample(rng);
    let StableParams {
        alpha: a,
        beta: b,
        gamma: g,
        delta: d,
    } = *p;
    if a == 1.0 {
        let h = FRAC_PI_2 + b * v;
        let x = (2.0 / PI) * (h * v.tan() - b * (FRAC_PI_2 * w * v.cos() / h).ln());
        g * x + d
    } else {
        let zeta = b * (PI * a / 2.0).tan();
        let shift = zeta.atan() / a;
        let scale = (1.0 + zeta * zeta).powf(1.0 / (2.0 * a));
        let x = scale * (a * (v + shift)).sin() / v.cos().powf(1.0 / a)
            * ((v - a * (v + shift)).cos() / w).powf((1.0 - a) / a);
        g * x + d - g * zeta
    }
}

/// IID observations from a stable law; theta in the unconstrained
/// parametrization of [`StableParams::to_theta`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StableIid;

impl Simulator for StableIid {
    fn dim(&self) -> usize {
        4
    }

    fn param_names(&self) -> Vec<String> {
        ["probit_half_alpha", "probit_beta", "log_gamma", "delta"]
            .map(String::from)
            .to_vec()
    }

    fn chunk_dim(&self, _i: usize) -> usize {
        1
    }

    fn is_iid(&self) -> bool {
        true
    }

    fn sample_chunk(
        &self,
        _i: usize,
        _history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    ) {
        out.push(stable_sample(&StableParams::from_theta(theta), rng));
    }
}
