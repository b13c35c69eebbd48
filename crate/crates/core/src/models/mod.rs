//! Generative models behind a uniform "sample chunk `i` given history and
//! parameter" interface, with their acceptance kernels and parameter
//! transforms.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::rng::SimRng;

pub mod lv;
pub mod race;
pub mod stable;
pub mod sv;
pub mod toy;

/// Norm used by the epsilon-ball acceptance kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Euclidean,
    Supremum,
}

impl Norm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        match self {
            Norm::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Norm::Supremum => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        }
    }
}

/// `1{ ||a - b|| <= eps }`. NaN distances never accept.
#[inline]
pub fn ball_indicator(a: &[f64], b: &[f64], epsilon: f64, norm: Norm) -> f64 {
    if norm.distance(a, b) <= epsilon {
        1.0
    } else {
        0.0
    }
}

/// A model whose data split into chunks `y_1..y_n` that can be simulated
/// one at a time from `p(y_i | y_{1:i-1}, theta)`.
///
/// Simulated chunks are written into a caller-owned buffer so pools can be
/// stored flat. Implementations must be deterministic given
/// `(theta, history, rng state)`.
pub trait Simulator: Send + Sync {
    /// Parameter dimension.
    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|k| format!("theta{k}")).collect()
    }

    /// Dimension of the summary of chunk `i` (the space the kernel ball
    /// lives in).
    fn chunk_dim(&self, i: usize) -> usize;

    /// Chunks are exchangeable given theta. Sites sharing an `iid_group`
    /// may recycle each other's simulations.
    fn is_iid(&self) -> bool {
        false
    }

    fn iid_group(&self, _i: usize) -> Option<u64> {
        if self.is_iid() {
            Some(0)
        } else {
            None
        }
    }

    /// Draw the quantity compared against observed chunk `i`. `history`
    /// holds chunks `0..i` (observed, or previously simulated when a whole
    /// dataset is generated).
    fn sample_chunk(
        &self,
        i: usize,
        history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    );

    /// Draw a full observation in the dataset format. Differs from
    /// [`Simulator::sample_chunk`] only for models whose kernel
    /// marginalizes part of the observation.
    fn generate_chunk(
        &self,
        i: usize,
        history: &[Vec<f64>],
        theta: &[f64],
        rng: &mut SimRng,
        out: &mut Vec<f64>,
    ) {
        self.sample_chunk(i, history, theta, rng, out)
    }

    /// Summary statistic `s_i`; identity by default.
    fn summary<'a>(&self, _i: usize, chunk: &'a [f64]) -> Cow<'a, [f64]> {
        Cow::Borrowed(chunk)
    }

    /// Acceptance weight in `[0, 1]`; the indicator
    /// `1{ ||s_i(y) - s_i(y*)|| <= eps }` unless overridden.
    fn accept_weight(
        &self,
        i: usize,
        simulated: &[f64],
        observed: &[f64],
        epsilon: f64,
        norm: Norm,
    ) -> f64 {
        let s = self.summary(i, simulated);
        let o = self.summary(i, observed);
        ball_indicator(&s, &o, epsilon, norm)
    }

    /// Coordinates site `i` depends on, when a proper subset of theta.
    fn active_block(&self, _i: usize) -> Option<Vec<usize>> {
        None
    }

    /// `log v_i(eps)`, the log volume of the acceptance region, when the
    /// kernel is a plain ball over the raw chunk. `None` when the evidence
    /// cannot be normalized this way.
    fn kernel_log_volume(&self, i: usize, epsilon: f64, norm: Norm) -> Option<f64> {
        Some(crate::abc::ball_log_volume(
            epsilon,
            self.chunk_dim(i),
            norm,
        ))
    }
}

/// Simulate a complete dataset of `n` chunks at `theta`, each chunk
/// conditioned on the previously simulated ones.
pub fn simulate_dataset(
    sim: &dyn Simulator,
    n: usize,
    theta: &[f64],
    rng: &mut SimRng,
) -> Vec<Vec<f64>> {
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut out = Vec::new();
        sim.generate_chunk(i, &data, theta, rng, &mut out);
        data.push(out);
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norms() {
        let a = [0.0, 0.0];
        let b = [3.0, -4.0];
        assert_eq!(Norm::Euclidean.distance(&a, &b), 5.0);
        assert_eq!(Norm::Supremum.distance(&a, &b), 4.0);
        assert_eq!(ball_indicator(&a, &b, 5.0, Norm::Euclidean), 1.0);
        assert_eq!(ball_indicator(&a, &b, 3.9, Norm::Supremum), 0.0);
        assert_eq!(ball_indicator(&a, &b, f64::INFINITY, Norm::Supremum), 1.0);
        assert_eq!(
            ball_indicator(&[f64::NAN], &[0.0], f64::INFINITY, Norm::Euclidean),
            0.0
        );
    }
}
