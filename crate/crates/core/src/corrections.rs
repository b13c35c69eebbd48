//! Marginal (low-dimensional) site updates and the first-order
//! perturbative correction of the EP marginals.

use nalgebra::{DMatrix, DVector};

use crate::abc::HybridSample;
use crate::ep::HybridRecord;
use crate::error::{Error, Result};
use crate::gauss::{cholesky, std_normal_cdf, symmetrize, MomentGaussian};

/// A site likelihood that depends on theta only through `z = A theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSpec {
    a: DMatrix<f64>,
}

impl ProjectionSpec {
    /// `A` must have full row rank.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() > a.ncols() {
            return Err(Error::SingularProjection);
        }
        cholesky(&(&a * a.transpose())).map_err(|_| Error::SingularProjection)?;
        Ok(Self { a })
    }

    /// Rows of the identity picking `coords` out of a `d`-vector.
    pub fn selection(coords: &[usize], d: usize) -> Result<Self> {
        if coords.iter().any(|&c| c >= d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: coords.iter().copied().max().unwrap_or(0) + 1,
            });
        }
        let mut a = DMatrix::zeros(coords.len(), d);
        for (row, &c) in coords.iter().enumerate() {
            a[(row, c)] = 1.0;
        }
        Self::new(a)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

/// Regression of theta on `z = A theta` under the cavity:
/// `E[theta | z] = V z + b`, `Cov[theta | z] = (I - V A) Sigma_0`.
#[derive(Debug, Clone)]
pub struct MarginalLift {
    v: DMatrix<f64>,
    b: DVector<f64>,
    residual: DMatrix<f64>,
}

impl MarginalLift {
    pub fn new(proj: &ProjectionSpec, cavity: &MomentGaussian) -> Result<Self> {
        let a = proj.matrix();
        let d = cavity.dim();
        if a.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: a.ncols(),
            });
        }
        let sigma_at = cavity.sigma() * a.transpose();
        let s = symmetrize(&(a * &sigma_at));
        let chol = cholesky(&s).map_err(|_| Error::SingularProjection)?;
        // V = Sigma_0 A^t S^-1, via S V^t = A Sigma_0.
        let v = chol.solve(&sigma_at.transpose()).transpose();
        let b = cavity.mu() - &v * (a * cavity.mu());
        let residual = symmetrize(&((DMatrix::identity(d, d) - &v * a) * cavity.sigma()));
        Ok(Self { v, b, residual })
    }

    pub fn lift_point(&self, z: &[f64]) -> DVector<f64> {
        &self.v * DVector::from_column_slice(z) + &self.b
    }

    pub fn lift_moments(&self, z_moments: &MomentGaussian) -> Result<MomentGaussian> {
        if z_moments.dim() != self.v.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.v.ncols(),
                got: z_moments.dim(),
            });
        }
        let mu = &self.v * z_moments.mu() + &self.b;
        let sigma = &self.residual + &self.v * z_moments.sigma() * self.v.transpose();
        MomentGaussian::new(mu, sigma)
    }

    /// Conditional sd of each coordinate given `z`.
    pub fn residual_sd(&self) -> Vec<f64> {
        self.residual
            .diagonal()
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }
}

/// Full-space hybrid moments from the moments of `z = A theta`.
pub fn lift_marginal_moments(
    proj: &ProjectionSpec,
    cavity: &MomentGaussian,
    z_moments: &MomentGaussian,
) -> Result<MomentGaussian> {
    MarginalLift::new(proj, cavity)?.lift_moments(z_moments)
}

/// Everything the first-order correction needs from a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct PwoAccumulator {
    pub q: MomentGaussian,
    /// `log Z_q`, the raw EP evidence.
    pub log_z_q: f64,
    pub hybrids: Vec<HybridRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedMarginal {
    pub coord: usize,
    pub grid: Vec<f64>,
    pub q_cdf: Vec<f64>,
    pub raw_cdf: Vec<f64>,
    pub raw_density: Vec<f64>,
    /// Raw CDF clamped to `[0, 1]`, made monotone and rescaled to end at 1.
    pub clipped_cdf: Vec<f64>,
    pub clipped_density: Vec<f64>,
    /// Largest departure of the raw CDF from a proper CDF.
    pub violation: f64,
    /// `violation > 1e-3`.
    pub flagged: bool,
}

impl CorrectedMarginal {
    /// Mean by integrating `1 - F` over the grid.
    pub fn mean(&self) -> f64 {
        let g = &self.grid;
        let tail: f64 = g
            .windows(2)
            .zip(self.raw_cdf.windows(2))
            .map(|(x, f)| (x[1] - x[0]) * (1.0 - 0.5 * (f[0] + f[1])))
            .sum();
        g[0] + tail
    }
}

pub const PWO_GRID_POINTS: usize = 512;

/// `points` evenly spaced points over `mean +/- 6 sd` of q's marginal.
pub fn pwo_grid(q: &MomentGaussian, coord: usize, points: usize) -> Vec<f64> {
    let (m, s) = (q.mu()[coord], q.sd(coord));
    let (lo, hi) = (m - 6.0 * s, m + 6.0 * s);
    (0..points)
        .map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64)
        .collect()
}

/// Weighted empirical CDF of one hybrid's coordinate on a sorted grid.
fn hybrid_cdf(s: &HybridSample, coord: usize, grid: &[f64]) -> Vec<f64> {
    let total: f64 = s.weights.iter().sum();
    let sd = s.cond_sd[coord];
    if sd > 0.0 {
        grid.iter()
            .map(|&x| {
                (0..s.len())
                    .map(|m| s.weights[m] * std_normal_cdf((x - s.theta(m)[coord]) / sd))
                    .sum::<f64>()
                    / total
            })
            .collect()
    } else {
        let mut pts: Vec<(f64, f64)> = (0..s.len())
            .map(|m| (s.theta(m)[coord], s.weights[m]))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out = Vec::with_capacity(grid.len());
        let mut k = 0;
        let mut acc = 0.0;
        for &x in grid {
            while k < pts.len() && pts[k].0 <= x {
                acc += pts[k].1;
                k += 1;
            }
            out.push(acc / total);
        }
        out
    }
}

fn differentiate(grid: &[f64], f: &[f64]) -> Vec<f64> {
    let n = grid.len();
    (0..n)
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(n - 1));
            (f[b] - f[a]) / (grid[b] - grid[a])
        })
        .collect()
}

/// First-order corrected marginal CDF of coordinate `coord`:
/// `[sum_i Z_i F_i - (n - 1) Z_q Phi_q] / [sum_i Z_i - (n - 1) Z_q]`.
pub fn pwo_first_order(
    acc: &PwoAccumulator,
    coord: usize,
    grid: &[f64],
) -> Result<CorrectedMarginal> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidConfig(
            "correction grid must be strictly increasing with >= 2 points".to_string(),
        ));
    }
    for h in &acc.hybrids {
        if !(h.samples.weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::EmptyHybridSample(h.site));
        }
    }
    let n = acc.hybrids.len() as f64;
    let top = acc
        .hybrids
        .iter()
        .map(|h| h.log_z)
        .fold(acc.log_z_q, f64::max);
    let w_q = (n - 1.0) * (acc.log_z_q - top).exp();
    let (m, s) = (acc.q.mu()[coord], acc.q.sd(coord));
    let q_cdf: Vec<f64> = grid.iter().map(|&x| std_normal_cdf((x - m) / s)).collect();
    let mut num: Vec<f64> = q_cdf.iter().map(|&p| -w_q * p).collect();
    let mut den = -w_q;
    for h in &acc.hybrids {
        let w = (h.log_z - top).exp();
        den += w;
        for (nu, f) in num.iter_mut().zip(hybrid_cdf(&h.samples, coord, grid)) {
            *nu += w * f;
        }
    }
    if !(den.abs() > 0.0) || !den.is_finite() {
        return Err(Error::NonFinite("corrected normalizer"));
    }
    let raw_cdf: Vec<f64> = num.iter().map(|v| v / den).collect();
    let raw_density = differentiate(grid, &raw_cdf);

    let mut violation = 0.0f64;
    let mut run_max = f64::NEG_INFINITY;
    for &f in &raw_cdf {
        violation = violation.max(-f).max(f - 1.0).max(run_max - f);
        run_max = run_max.max(f);
    }
    let mut clipped_cdf = Vec::with_capacity(grid.len());
    let mut cur = 0.0f64;
    for &f in &raw_cdf {
        cur = cur.max(f.clamp(0.0, 1.0));
        clipped_cdf.push(cur);
    }
    if cur > 0.0 {
        for c in clipped_cdf.iter_mut() {
            *c /= cur;
        }
    }
    let clipped_density = differentiate(grid, &clipped_cdf);
    Ok(CorrectedMarginal {
        coord,
        grid: grid.to_vec(),
        q_cdf,
        raw_cdf,
        raw_density,
        clipped_cdf,
        clipped_density,
        violation,
        flagged: violation > 1e-3,
    })
}
