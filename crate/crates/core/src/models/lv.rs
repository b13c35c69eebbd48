//! Stochastic Lotka-Volterra predator-prey dynamics, simulated exactly by
//! Gillespie's algorithm and observed at unit time intervals.
//!
//! Reactions: prey birth at rate `r1 Y1`, predation `r2 Y1 Y2`
//! (prey -1, predator +1), predator death `r3 Y2`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use super::{Norm, Simulator};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LvParams {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

impl LvParams {
    pub fn to_theta(&self) -> Result<[f64; 3]> {
        if !(self.r1 > 0.0 && self.r2 > 0.0 && self.r3 > 0.0) {
            return Err(Error::DomainError(format!(
                "reaction rates must be positive, got ({}, {}, {})",
                self.r1, self.r2, self.r3
            )));
        }
        Ok([self.r1.ln(), self.r2.ln(), self.r3.ln()])
    }

    pub fn from_theta(theta: &[f64]) -> Self {
        Self {
            r1: theta[0].exp(),
            r2: theta[1].exp(),
            r3: theta[2].exp(),
        }
    }
}

/// Run the jump process from `state` for `duration` time units, or give up
/// (returning `None`) after `max_events` reactions.
pub fn lv_simulate_interval_capped(
    state: (u64, u64),
    p: &LvParams,
    duration: f64,
    max_events: u64,
    rng: &mut SimRng,
) -> Option<(u64, u64)> {
    let (mut y1, mut y2) = state;
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        let (f1, f2) = (y1 as f64, y2 as f64);
        let h1 = p.r1 * f1;
        let h2 = p.r2 * f1 * f2;
        let h3 = p.r3 * f2;
        let total = h1 + h2 + h3;
        if !(total > 0.0) {
            return Some((y1, y2));
        }
        let wait: f64 = Exp1.sample(rng);
        t += wait / total;
        if t > duration {
            return Some((y1, y2));
        }
        if events == max_events {
            return None;
        }
        events += 1;
        let u = rng.random::<f64>() * total;
        if u < h1 {
            y1 += 1;
        } else if u < h1 + h2 {
            y1 -= 1;
            y2 += 1;
        } else {
            y2 -= 1;
        }
    }
}

/// Exact simulation over `duration` with no event cap.
pub fn lv_simulate_interval(
    state: (u64, u64),
    p: &LvParams,
    duration: f64,
    rng: &mut SimRng,
) -> (u64, u64) {
    lv_simulate_interval_capped(state, p, duration, u64::MAX, rng)
        .expect("uncapped simulation always finishes")
}

/// Lattice points `k in Z^dim` with `||k|| <= eps`.
pub fn lattice_ball_count(epsilon: f64, dim: usize, norm: Norm) -> u64 {
    let r = epsilon.floor() as i64;
    match norm {
        Norm::Supremum => ((2 * r + 1) as u64).pow(dim as u32),
        Norm::Euclidean => {
            fn count(dim: usize, budget: f64, r: i64) -> u64 {
                if dim == 0 {
                    return 1;
                }
                (-r..=r)
                    .filter(|&k| (k * k) as f64 <= budget)
                    .map(|k| count(dim - 1, budget - (k * k) as f64, r))
                    .sum()
            }
            count(dim, epsilon * epsilon, r)
        }
    }
}

/// Predator-prey counts at times `1..n`, started from `y0` at time 0.
/// Chunk `i` is the state at time `i + 1` given the observed state at time
/// `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LotkaVolterra {
    pub y0: (u64, u64),
    pub interval: f64,
    /// Reactions per interval beyond which a draw is rejected.
    pub max_events: u64,
}

impl LotkaVolterra {
    pub fn new(y0: (u64, u64)) -> Self {
        Self {
            y0,
            interval: 1.0,
            max_events: 100_000,
        }
    }
}

impl Simulator for LotkaVolterra {
    fn dim(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        ["log_r1", "log_r2", "log_r3"].map(String::from).to_vec()
    }

    fn chunk_dim(&self, _i: usize) -> usize {
        2
    }

    fn sample_chunk(
        &self,
        i: usize,
        history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    ) {
        let start = if i == 0 {
            self.y0
        } else {
            let prev = &history[i - 1];
            (prev[0] as u64, prev[1] as u64)
        };
        let p = LvParams::from_theta(theta);
        match lv_simulate_interval_capped(start, &p, self.interval, self.max_events, rng) {
            Some((a, b)) => out.extend([a as f64, b as f64]),
            None => out.extend([f64::NAN, f64::NAN]),
        }
    }

    /// Counts are discrete: the kernel mass of a point is the number of
    /// lattice states in the ball.
    fn kernel_log_volume(&self, _i: usize, epsilon: f64, norm: Norm) -> Option<f64> {
        Some((lattice_ball_count(epsilon, 2, norm) as f64).ln())
    }
}
