//! Reference methods: exact conjugate hybrid moments, random-walk
//! MCMC-ABC, and grid quadrature for one-parameter posteriors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::abc::MomentEstimate;
use crate::ep::{MomentOracle, Visit};
use crate::error::{Error, Result};
use crate::gauss::{MomentGaussian, NaturalGaussian};
use crate::models::{simulate_dataset, Norm, Simulator};
use crate::rng::SimRng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Exact hybrid moments for sites `y_i = a_i^t theta + N(0, noise_var)`.
#[derive(Debug, Clone)]
pub struct ConjugateGaussianOracle {
    rows: Vec<(DVector<f64>, f64)>,
    noise_var: f64,
}

impl ConjugateGaussianOracle {
    pub fn new(rows: Vec<(DVector<f64>, f64)>, noise_var: f64) -> Self {
        Self { rows, noise_var }
    }

    /// `y_i ~ N(theta, sigma^2)` with scalar theta.
    pub fn iid(y: &[f64], sigma: f64) -> Self {
        Self::new(
            y.iter()
                .map(|&v| (DVector::from_element(1, 1.0), v))
                .collect(),
            sigma * sigma,
        )
    }
}

impl MomentOracle for ConjugateGaussianOracle {
    fn hybrid_moments(&mut self, cavity: &MomentGaussian, visit: &Visit) -> Result<MomentEstimate> {
        let (a, y) = &self.rows[visit.site];
        let sa = cavity.sigma() * a;
        let s = self.noise_var + a.dot(&sa);
        let resid = y - a.dot(cavity.mu());
        let mu_hat = cavity.mu() + &sa * (resid / s);
        let sigma_hat = cavity.sigma() - &sa * sa.transpose() / s;
        let log_z = -0.5 * (LN_2PI + s.ln() + resid * resid / s);
        Ok(MomentEstimate {
            z_hat: log_z.exp(),
            mu_hat,
            sigma_hat,
            m_total: 0,
            m_acc: 0,
            ess: f64::INFINITY,
            samples: None,
        })
    }
}

/// `log p(y)` for `y_i ~ N(theta, sigma^2)` IID, `theta ~ N(m0, v0)`:
/// `y ~ N(m0 1, sigma^2 I + v0 1 1^t)`.
pub fn gaussian_iid_log_marginal(y: &[f64], sigma: f64, m0: f64, v0: f64) -> f64 {
    let n = y.len() as f64;
    let s2 = sigma * sigma;
    let c: Vec<f64> = y.iter().map(|v| v - m0).collect();
    let ss: f64 = c.iter().map(|v| v * v).sum();
    let sum: f64 = c.iter().sum();
    let quad = (ss - v0 / (s2 + n * v0) * sum * sum) / s2;
    let log_det = n * s2.ln() + (1.0 + n * v0 / s2).ln();
    -0.5 * (n * LN_2PI + log_det + quad)
}

/// Dataset-level summary statistic for MCMC-ABC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "id", deny_unknown_fields)]
pub enum DatasetSummary {
    /// Every chunk, concatenated.
    Identity,
    /// Coordinate-wise mean of the chunks.
    SampleMean,
    /// Reaction-time quantiles at `n_quantiles` levels evenly spaced on
    /// `[0.01, 0.99]`, times `scale`, then `1` if choice 1 ever occurs, else
    /// `0`. Chunks are `(condition, d, r)`.
    RtQuantiles { n_quantiles: usize, scale: f64 },
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let h = (x.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(x.len() - 1);
    x[lo] + (h - lo as f64) * (x[hi] - x[lo])
}

impl DatasetSummary {
    pub fn compute(&self, data: &[Vec<f64>]) -> Vec<f64> {
        match self {
            DatasetSummary::Identity => data.iter().flatten().copied().collect(),
            DatasetSummary::SampleMean => {
                let k = data.first().map_or(0, Vec::len);
                let mut m = vec![0.0; k];
                for row in data {
                    for (a, v) in m.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                m.iter().map(|v| v / data.len() as f64).collect()
            }
            DatasetSummary::RtQuantiles { n_quantiles, scale } => {
                let mut rts: Vec<f64> = data.iter().map(|r| r[2]).collect();
                rts.sort_by(f64::total_cmp);
                let k = *n_quantiles;
                let mut s: Vec<f64> = (0..k)
                    .map(|j| {
                        let p = if k == 1 {
                            0.5
                        } else {
                            0.01 + 0.98 * j as f64 / (k - 1) as f64
                        };
                        scale * quantile_sorted(&rts, p)
                    })
                    .collect();
                s.push(if data.iter().any(|r| r[1] == 1.0) {
                    1.0
                } else {
                    0.0
                });
                s
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcAbcConfig {
    pub summary: DatasetSummary,
    pub epsilon: f64,
    pub norm: Norm,
    pub proposal_scales: Vec<f64>,
    pub iterations: usize,
    pub init: Vec<f64>,
    pub thin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    /// `(iteration, theta, accepted)` for every `thin`-th iteration.
    pub samples: Vec<(usize, Vec<f64>, bool)>,
    pub accepted: usize,
    pub iterations: usize,
    /// Simulated datasets.
    pub draws: u64,
}

impl Chain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }

    /// Mean of the stored states.
    pub fn mean(&self) -> Vec<f64> {
        let d = self.samples.first().map_or(0, |s| s.1.len());
        let mut m = vec![0.0; d];
        for (_, t, _) in &self.samples {
            for (a, v) in m.iter_mut().zip(t) {
                *a += v;
            }
        }
        m.iter().map(|v| v / self.samples.len() as f64).collect()
    }
}

fn log_prior(prior: &NaturalGaussian, theta: &DVector<f64>) -> f64 {
    -0.5 * theta.dot(&(prior.q() * theta)) + prior.r().dot(theta)
}

/// Iterations without a single acceptance after which the chain is
/// declared stuck.
pub const STUCK_AFTER: usize = 10_000;

/// Gaussian random-walk MCMC-ABC. A proposal is accepted iff its freshly
/// simulated dataset satisfies `||s(y) - s(y*)|| <= eps` and a uniform
/// draw falls below the prior ratio.
pub fn mcmc_abc(
    sim: &dyn Simulator,
    observed: &[Vec<f64>],
    cfg: &McmcAbcConfig,
    prior: &NaturalGaussian,
    rng: &mut SimRng,
) -> Result<Chain> {
    let d = sim.dim();
    if cfg.init.len() != d || cfg.proposal_scales.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: cfg.init.len().min(cfg.proposal_scales.len()),
        });
    }
    if cfg.proposal_scales.iter().any(|s| !(*s > 0.0)) || cfg.thin == 0 {
        return Err(Error::InvalidConfig(
            "proposal scales must be positive and thin >= 1".to_string(),
        ));
    }
    let target = cfg.summary.compute(observed);
    let n = observed.len();
    let mut theta = DVector::from_column_slice(&cfg.init);
    let mut lp = log_prior(prior, &theta);
    let mut chain = Chain {
        samples: Vec::with_capacity(cfg.iterations / cfg.thin + 1),
        accepted: 0,
        iterations: cfg.iterations,
        draws: 0,
    };
    for it in 1..=cfg.iterations {
        let prop = DVector::from_fn(d, |k, _| {
            let z: f64 = StandardNormal.sample(rng);
            theta[k] + cfg.proposal_scales[k] * z
        });
        let y = simulate_dataset(sim, n, prop.as_slice(), rng);
        chain.draws += 1;
        let s = cfg.summary.compute(&y);
        let inside = s.len() == target.len() && cfg.norm.distance(&s, &target) <= cfg.epsilon;
        let mut accepted = false;
        if inside {
            let lp_new = log_prior(prior, &prop);
            if rng.random::<f64>().ln() < lp_new - lp {
                theta = prop;
                lp = lp_new;
                accepted = true;
                chain.accepted += 1;
            }
        }
        if it == STUCK_AFTER && chain.accepted == 0 {
            return Err(Error::StuckChain(STUCK_AFTER));
        }
        if it % cfg.thin == 0 {
            chain
                .samples
                .push((it, theta.iter().copied().collect(), accepted));
        }
    }
    Ok(chain)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraturePosterior {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub mean: f64,
    pub var: f64,
}

fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(x, f)| 0.5 * (x[1] - x[0]) * (f[0] + f[1]))
        .sum()
}

/// Trapezoid-normalized posterior on `points` evenly spaced nodes.
pub fn quadrature_posterior_1d(
    log_target: &dyn Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<QuadraturePosterior> {
    if points < 2 || !(hi > lo) {
        return Err(Error::InvalidConfig(
            "need points >= 2 and hi > lo".to_string(),
        ));
    }
    let grid: Vec<f64> = (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect();
    let logs: Vec<f64> = grid.iter().map(|&x| log_target(x)).collect();
    if logs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite("log target"));
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::NonFinite("log target"));
    }
    let raw: Vec<f64> = logs.iter().map(|v| (v - top).exp()).collect();
    let z = trapezoid(&grid, &raw);
    let density: Vec<f64> = raw.iter().map(|v| v / z).collect();
    let xf: Vec<f64> = grid.iter().zip(&density).map(|(x, f)| x * f).collect();
    let mean = trapezoid(&grid, &xf);
    let vf: Vec<f64> = grid
        .iter()
        .zip(&density)
        .map(|(x, f)| (x - mean) * (x - mean) * f)
        .collect();
    let var = trapezoid(&grid, &vf);
    Ok(QuadraturePosterior {
        grid,
        density,
        mean,
        var,
    })
}

/// Log posterior of the folded toy, `y_i ~ N(|theta|, 1)`, up to a constant.
pub fn multimodal_log_posterior(y: &[f64], prior_var: f64) -> impl Fn(f64) -> f64 + '_ {
    move |t: f64| {
        let a = t.abs();
        -0.5 * t * t / prior_var - 0.5 * y.iter().map(|v| (v - a) * (v - a)).sum::<f64>()
    }
}

/// Covariance as a dense matrix from per-coordinate variances.
pub fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::toy::GaussianIid;
    use crate::rng::stream;

    #[test]
    fn marginal_likelihood_single_point() {
        let lm = gaussian_iid_log_marginal(&[0.0], 1.0, 0.0, 1.0);
        assert!((lm + 1.265_512_123_484_645).abs() < 1e-12);
    }

    #[test]
    fn marginal_likelihood_matches_dense_formula() {
        let y = [0.3, -1.2, 2.0, 0.7];
        let (s, v0, m0) = (0.8f64, 4.0, 0.5);
        let n = y.len();
        let cov = DMatrix::from_fn(n, n, |a, b| v0 + if a == b { s * s } else { 0.0 });
        let c = DVector::from_fn(n, |a, _| y[a] - m0);
        let chol = cov.clone().cholesky().unwrap();
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let want = -0.5 * (n as f64 * LN_2PI + log_det + c.dot(&chol.solve(&c)));
        assert!((gaussian_iid_log_marginal(&y, s, m0, v0) - want).abs() < 1e-12);
    }

    #[test]
    fn quadrature_gaussian() {
        // N(1.5, 0.25) target.
        let post =
            quadrature_posterior_1d(&|t| -2.0 * (t - 1.5) * (t - 1.5), -8.0, 11.0, 4096).unwrap();
        assert!((post.mean - 1.5).abs() < 1e-8);
        assert!((post.var - 0.25).abs() < 1e-8);
        assert!((trapezoid(&post.grid, &post.density) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_rejects_nan() {
        assert_eq!(
            quadrature_posterior_1d(&|_| f64::NAN, 0.0, 1.0, 10),
            Err(Error::NonFinite("log target"))
        );
    }

    #[test]
    fn rt_quantile_summary() {
        let data: Vec<Vec<f64>> = (0..101).map(|k| vec![0.0, 2.0, 100.0 + k as f64]).collect();
        let s = DatasetSummary::RtQuantiles {
            n_quantiles: 8,
            scale: 1.0 / 200.0,
        }
        .compute(&data);
        assert_eq!(s.len(), 9);
        assert!((s[0] - 101.0 / 200.0).abs() < 1e-12);
        assert!((s[7] - 199.0 / 200.0).abs() < 1e-12);
        assert_eq!(s[8], 0.0);
    }

    #[test]
    fn infinite_epsilon_chain_samples_prior() {
        // Prior N(1, 4): natural (r, Q) = (0.25, 0.25).
        let prior = NaturalGaussian::new(
            DVector::from_element(1, 0.25),
            DMatrix::from_element(1, 1, 0.25),
        )
        .unwrap();
        let cfg = McmcAbcConfig {
            summary: DatasetSummary::SampleMean,
            epsilon: f64::INFINITY,
            norm: Norm::Euclidean,
            proposal_scales: vec![3.0],
            iterations: 400_000,
            init: vec![1.0],
            thin: 4,
        };
        let mut rng = stream(8, &[]);
        let chain = mcmc_abc(&GaussianIid::new(1.0), &[vec![0.0]], &cfg, &prior, &mut rng).unwrap();
        let xs: Vec<f64> = chain.samples.iter().map(|s| s.1[0]).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        // Effective size is a fraction of n for a random walk; 0.1 is conservative.
        let se = (4.0 / (0.1 * n)).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * se, "{mean}");
        assert!(
            (var - 4.0).abs() < 3.0 * 4.0 * (2.0 / (0.1 * n)).sqrt(),
            "{var}"
        );
    }

    #[test]
    fn acceptance_ignores_current_dataset() {
        // With eps = inf the constraint is vacuous; equal priors make every
        // move acceptable regardless of what the current state simulated.
        let prior = NaturalGaussian::new(DVector::zeros(1), DMatrix::zeros(1, 1)).unwrap();
        let cfg = McmcAbcConfig {
            summary: DatasetSummary::SampleMean,
            epsilon: f64::INFINITY,
            norm: Norm::Euclidean,
            proposal_scales: vec![1.0],
            iterations: 1000,
            init: vec![0.0],
            thin: 1,
        };
        let chain = mcmc_abc(
            &GaussianIid::new(1.0),
            &[vec![0.0]],
            &cfg,
            &prior,
            &mut stream(1, &[]),
        )
        .unwrap();
        assert_eq!(chain.accepted, 1000);
    }

    #[test]
    fn stuck_chain_is_reported() {
        let prior = NaturalGaussian::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let cfg = McmcAbcConfig {
            summary: DatasetSummary::SampleMean,
            epsilon: 1e-12,
            norm: Norm::Euclidean,
            proposal_scales: vec![1.0],
            iterations: 20_000,
            init: vec![0.0],
            thin: 1,
        };
        let err = mcmc_abc(
            &GaussianIid::new(1.0),
            &[vec![1e3]],
            &cfg,
            &prior,
            &mut stream(1, &[]),
        )
        .unwrap_err();
        assert_eq!(err, Error::StuckChain(STUCK_AFTER));
    }
}
