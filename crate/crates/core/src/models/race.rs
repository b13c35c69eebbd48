//! Two-accumulator race model of choice reaction times.
//!
//! Each accumulator follows `tau de_j = m_j dt + dW_j` with `t` in
//! milliseconds, discretized by Euler steps of `dt_ms`. Boundaries are `b_j = c_j + noise`,
//! noise `~ N(0, e^s)` drawn independently per accumulator and trial. The
//! first crossing decides; at the ceiling the highest accumulator decides.
//! Lapse trials answer uniformly at a uniform time. Observed reaction time
//! adds a uniform non-decision time on `[a, b]`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Norm, Simulator};
use crate::error::{Error, Result};
use crate::gauss::{std_normal_cdf, std_normal_inverse_cdf};
use crate::rng::SimRng;

/// Fixed constants of the race model, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaceConstants {
    pub tau_ms: f64,
    pub a_ms: f64,
    pub b_ms: f64,
    pub lapse_prob: f64,
    pub ceiling_ms: f64,
    pub lapse_max_ms: f64,
    pub dt_ms: f64,
}

impl Default for RaceConstants {
    fn default() -> Self {
        Self {
            tau_ms: 5.0,
            a_ms: 100.0,
            b_ms: 200.0,
            lapse_prob: 0.05,
            ceiling_ms: 1000.0,
            lapse_max_ms: 800.0,
            dt_ms: 1.0,
        }
    }
}

impl RaceConstants {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_ms > 0.0
            && self.dt_ms > 0.0
            && self.a_ms >= 0.0
            && self.b_ms > self.a_ms
            && (0.0..=1.0).contains(&self.lapse_prob)
            && self.ceiling_ms > 0.0
            && self.lapse_max_ms >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid race constants {self:?}"
            )))
        }
    }
}

/// Parameters of one trial: both drifts, both thresholds and the boundary
/// log-variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaceTrialParams {
    pub drifts: [f64; 2],
    pub thresholds: [f64; 2],
    pub s: f64,
}

/// Decision `(d, r_d)` with `d` in `{1, 2}` and `r_d` in milliseconds.
pub fn race_decision(p: &RaceTrialParams, c: &RaceConstants, rng: &mut SimRng) -> (u8, f64) {
    if c.lapse_prob > 0.0 && rng.random::<f64>() < c.lapse_prob {
        let r_d = c.lapse_max_ms * rng.random::<f64>();
        let d = if rng.random::<bool>() { 1 } else { 2 };
        return (d, r_d);
    }
    let sd_b = (0.5 * p.s).exp();
    let mut bound = [0.0; 2];
    for (j, b) in bound.iter_mut().enumerate() {
        let n: f64 = StandardNormal.sample(rng);
        *b = p.thresholds[j] + sd_b * n;
    }
    // de = (m dt + dW) / tau: drift m dt / tau, noise sd sqrt(dt) / tau.
    let h = c.dt_ms / c.tau_ms;
    let sq = c.dt_ms.sqrt() / c.tau_ms;
    let step = [p.drifts[0] * h, p.drifts[1] * h];
    let steps = (c.ceiling_ms / c.dt_ms).ceil() as usize;
    let mut e = [0.0f64; 2];
    for k in 1..=steps {
        let n0: f64 = StandardNormal.sample(rng);
        let n1: f64 = StandardNormal.sample(rng);
        e[0] += step[0] + sq * n0;
        e[1] += step[1] + sq * n1;
        let over = [e[0] - bound[0], e[1] - bound[1]];
        if over[0] >= 0.0 || over[1] >= 0.0 {
            let d = if over[0] >= over[1] { 1 } else { 2 };
            return (d, (k as f64 * c.dt_ms).min(c.ceiling_ms));
        }
    }
    (if e[0] >= e[1] { 1 } else { 2 }, c.ceiling_ms)
}

/// One trial `(d, r)`: decision plus uniform non-decision time.
pub fn race_trial(p: &RaceTrialParams, c: &RaceConstants, rng: &mut SimRng) -> (u8, f64) {
    let (d, r_d) = race_decision(p, c, rng);
    (d, r_d + c.a_ms + (c.b_ms - c.a_ms) * rng.random::<f64>())
}

/// How the reaction-time tolerance is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RtWindow {
    /// `|log r - log r*| <= eps`.
    #[default]
    Log,
    /// `|r - r*| <= eps` milliseconds.
    AbsoluteMs,
}

/// Probability over `r_nd ~ U[a, b]` that `r_d + r_nd` lies in
/// `[lo, hi]`.
fn uniform_overlap(r_d: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    let left = a.max(lo - r_d);
    let right = b.min(hi - r_d);
    ((right - left) / (b - a)).clamp(0.0, 1.0)
}

/// Rao-Blackwellised acceptance weight for the log window.
pub fn race_accept_weight(
    r_d: f64,
    d: u8,
    observed: (u8, f64),
    epsilon: f64,
    a: f64,
    b: f64,
) -> f64 {
    if d != observed.0 {
        return 0.0;
    }
    let r = observed.1;
    uniform_overlap(r_d, r * (-epsilon).exp(), r * epsilon.exp(), a, b)
}

/// Same for the absolute window `|r - r*| <= eps`.
pub fn race_accept_weight_abs(
    r_d: f64,
    d: u8,
    observed: (u8, f64),
    epsilon: f64,
    a: f64,
    b: f64,
) -> f64 {
    if d != observed.0 {
        return 0.0;
    }
    uniform_overlap(r_d, observed.1 - epsilon, observed.1 + epsilon, a, b)
}

/// Drift on `(-0.1, 0.1)` to the real line: `Phi^-1(5 m + 0.5)`.
pub fn drift_to_theta(m: f64) -> Result<f64> {
    if !(m > -0.1 && m < 0.1) {
        return Err(Error::DomainError(format!("drift {m} not in (-0.1, 0.1)")));
    }
    std_normal_inverse_cdf(5.0 * m + 0.5)
}

pub fn drift_from_theta(t: f64) -> f64 {
    (std_normal_cdf(t) - 0.5) / 5.0
}

/// Native parameters of the multi-condition model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaceParams {
    /// `[m_1, m_2]` per condition.
    pub drifts: Vec<[f64; 2]>,
    pub c1: f64,
    pub c2: f64,
    pub s: f64,
}

impl RaceParams {
    /// Per condition `Phi^-1(5 m_j + 0.5)`, then `(lambda, delta, s)` with
    /// `c1 = e^lambda`, `c2 = e^(lambda + delta)`.
    pub fn to_theta(&self) -> Result<Vec<f64>> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::DomainError(
                "thresholds must be positive".to_string(),
            ));
        }
        let mut t = Vec::with_capacity(2 * self.drifts.len() + 3);
        for m in &self.drifts {
            t.push(drift_to_theta(m[0])?);
            t.push(drift_to_theta(m[1])?);
        }
        let lambda = self.c1.ln();
        t.extend([lambda, self.c2.ln() - lambda, self.s]);
        Ok(t)
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        let k = (theta.len() - 3) / 2;
        let drifts = (0..k)
            .map(|c| {
                [
                    drift_from_theta(theta[2 * c]),
                    drift_from_theta(theta[2 * c + 1]),
                ]
            })
            .collect();
        let (lambda, delta, s) = (theta[2 * k], theta[2 * k + 1], theta[2 * k + 2]);
        Self {
            drifts,
            c1: lambda.exp(),
            c2: (lambda + delta).exp(),
            s,
        }
    }
}

/// Which parameters theta carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RaceParametrization {
    /// Two transformed drifts per condition, then `(lambda, delta, s)`.
    Full { n_conditions: usize },
    /// `(log m_1, log m_2, log c_1)` with `c_2` and `s` known.
    Difficult { c2: f64, s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceModel {
    pub param: RaceParametrization,
    /// Condition of each trial, from 0.
    pub conditions: Vec<usize>,
    pub consts: RaceConstants,
    pub window: RtWindow,
}

impl RaceModel {
    pub fn trial_params(&self, condition: usize, theta: &[f64]) -> RaceTrialParams {
        match self.param {
            RaceParametrization::Full { n_conditions: k } => {
                let (lambda, delta, s) = (theta[2 * k], theta[2 * k + 1], theta[2 * k + 2]);
                RaceTrialParams {
                    drifts: [
                        drift_from_theta(theta[2 * condition]),
                        drift_from_theta(theta[2 * condition + 1]),
                    ],
                    thresholds: [lambda.exp(), (lambda + delta).exp()],
                    s,
                }
            }
            RaceParametrization::Difficult { c2, s } => RaceTrialParams {
                drifts: [theta[0].exp(), theta[1].exp()],
                thresholds: [theta[2].exp(), c2],
                s,
            },
        }
    }

    /// Condition column of a `(condition, d, r)` dataset.
    pub fn conditions_of(data: &[Vec<f64>]) -> Vec<usize> {
        data.iter().map(|row| row[0] as usize).collect()
    }
}

impl Simulator for RaceModel {
    fn dim(&self) -> usize {
        match self.param {
            RaceParametrization::Full { n_conditions } => 2 * n_conditions + 3,
            RaceParametrization::Difficult { .. } => 3,
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self.param {
            RaceParametrization::Full { n_conditions } => {
                let mut v: Vec<String> = (0..n_conditions)
                    .flat_map(|c| [format!("probit_m1_c{c}"), format!("probit_m2_c{c}")])
                    .collect();
                v.extend(["lambda", "delta", "s"].map(String::from));
                v
            }
            RaceParametrization::Difficult { .. } => {
                ["log_m1", "log_m2", "log_c1"].map(String::from).to_vec()
            }
        }
    }

    fn chunk_dim(&self, _i: usize) -> usize {
        2
    }

    fn is_iid(&self) -> bool {
        true
    }

    fn iid_group(&self, i: usize) -> Option<u64> {
        Some(self.conditions[i] as u64)
    }

    /// `[d, r_d]`; the non-decision time is integrated out by the kernel.
    fn sample_chunk(
        &self,
        i: usize,
        _history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    ) {
        let p = self.trial_params(self.conditions[i], theta);
        let (d, r_d) = race_decision(&p, &self.consts, rng);
        out.extend([d as f64, r_d]);
    }

    /// `[condition, d, r]` with `r` in milliseconds.
    fn generate_chunk(
        &self,
        i: usize,
        _history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    ) {
        let cond = self.conditions[i];
        let p = self.trial_params(cond, theta);
        let (d, r) = race_trial(&p, &self.consts, rng);
        out.extend([cond as f64, d as f64, r]);
    }

    fn accept_weight(
        &self,
        _i: usize,
        simulated: &[f64],
        observed: &[f64],
        epsilon: f64,
        _norm: Norm,
    ) -> f64 {
        let obs = (observed[1] as u8, observed[2]);
        let (d, r_d) = (simulated[0] as u8, simulated[1]);
        let (a, b) = (self.consts.a_ms, self.consts.b_ms);
        match self.window {
            RtWindow::Log => race_accept_weight(r_d, d, obs, epsilon, a, b),
            RtWindow::AbsoluteMs => race_accept_weight_abs(r_d, d, obs, epsilon, a, b),
        }
    }

    fn active_block(&self, i: usize) -> Option<Vec<usize>> {
        match self.param {
            RaceParametrization::Full { n_conditions: k } => {
                let c = self.conditions[i];
                Some(vec![2 * c, 2 * c + 1, 2 * k, 2 * k + 1, 2 * k + 2])
            }
            RaceParametrization::Difficult { .. } => None,
        }
    }

    fn kernel_log_volume(&self, _i: usize, _epsilon: f64, _norm: Norm) -> Option<f64> {
        None
    }
}
