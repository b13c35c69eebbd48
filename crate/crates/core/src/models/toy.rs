//! One-parameter IID toys: the Gaussian location model and the folded
//! multimodal model `y_i | theta ~ N(|theta|, 1)`.

use rand_distr::{Distribution, StandardNormal};

use super::Simulator;
use crate::rng::SimRng;

/// `y_i | theta ~ N(theta, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianIid {
    pub sigma: f64,
}

impl GaussianIid {
    pub fn new(sigma: f64) -> Self {
        Self { sigma }
    }
}

impl Simulator for GaussianIid {
    fn dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["theta".to_string()]
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
        let e: f64 = StandardNormal.sample(rng);
        out.push(theta[0] + self.sigma * e);
    }
}

/// `y_i | theta ~ N(|theta|, 1)`; the posterior is symmetric in theta.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MultimodalToy;

impl Simulator for MultimodalToy {
    fn dim(&self) -> usize {
        1
    }

    fn param_names(&self) -> Vec<String> {
        vec!["theta".to_string()]
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
        let e: f64 = StandardNormal.sample(rng);
        out.push(theta[0].abs() + e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn draws(sim: &dyn Simulator, theta: f64, n: usize, history: &[Vec<f64>]) -> Vec<f64> {
        let mut rng = stream(42, &[]);
        let mut out = Vec::new();
        for _ in 0..n {
            sim.sample_chunk(0, history, &[theta], &mut rng, &mut out);
        }
        out
    }

    #[test]
    fn gaussian_moments() {
        let n = 100_000;
        let x = draws(&GaussianIid::new(1.0), 0.0, n, &[]);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn multimodal_folding() {
        // Draws are N(2, 1) for theta = 2 and theta = -2 alike, so
        // E|y - 2| = sqrt(2 / pi).
        let n = 100_000;
        for theta in [2.0, -2.0] {
            let x = draws(&MultimodalToy, theta, n, &[]);
            let m = x.iter().map(|v| (v - 2.0).abs()).sum::<f64>() / n as f64;
            let want = (2.0 / std::f64::consts::PI).sqrt();
            let se = ((1.0 - 2.0 / std::f64::consts::PI) / n as f64).sqrt();
            assert!((m - want).abs() < 3.0 * se, "{m}");
        }
    }

    #[test]
    fn multimodal_ignores_history() {
        assert!(MultimodalToy.is_iid());
        let a = draws(&MultimodalToy, 1.0, 10, &[]);
        let b = draws(&MultimodalToy, 1.0, 10, &[vec![5.0], vec![-3.0]]);
        assert_eq!(a, b);
    }
}
