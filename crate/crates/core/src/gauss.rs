//! Gaussian exponential family in natural `(r, Q)` and moment `(mu, Sigma)`
//! form, with the conversions and log-partition used by the EP engine.
//!
//! All factorizations go through Cholesky. Matrices are symmetrized as
//! `(M + M^t) / 2` whenever they are built or produced by arithmetic.

use libm::erfc;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Diagonal jitter ladder tried, in order, when factorizing an estimated
/// covariance.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factor of a symmetric matrix, no jitter.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    Cholesky::new(m.clone()).ok_or(Error::NotPositiveDefinite)
}

/// Cholesky factor, escalating through [`JITTER_LADDER`] before giving up.
/// Returns the factor and the jitter that was needed.
pub fn cholesky_jittered(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite);
    }
    let n = m.nrows();
    for &jitter in &JITTER_LADDER {
        let mut a = m.clone();
        if jitter > 0.0 {
            for k in 0..n {
                a[(k, k)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok((c, jitter));
        }
    }
    Err(Error::NotPositiveDefinite)
}

fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|v| v.ln())
        .sum::<f64>()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Natural parametrization: density proportional to
/// `exp(-1/2 t^t Q t + r^t t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalGaussian {
    r: DVector<f64>,
    q: DMatrix<f64>,
}

/// Moment parametrization `N(mu, Sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentGaussian {
    mu: DVector<f64>,
    sigma: DMatrix<f64>,
}

/// Direction of [`combine`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl NaturalGaussian {
    pub fn new(r: DVector<f64>, q: DMatrix<f64>) -> Result<Self> {
        check_square(&r, &q)?;
        Ok(Self {
            q: symmetrize(&q),
            r,
        })
    }

    /// The zero site: `r = 0`, `Q = 0`.
    pub fn zeros(d: usize) -> Self {
        Self {
            r: DVector::zeros(d),
            q: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &DVector<f64> {
        &self.r
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.q.iter()).all(|v| v.is_finite())
    }

    /// `Sigma = Q^-1`, `mu = Q^-1 r`.
    pub fn to_moments(&self) -> Result<MomentGaussian> {
        let chol = cholesky(&self.q)?;
        let mu = chol.solve(&self.r);
        let sigma = symmetrize(&chol.inverse());
        Ok(MomentGaussian { mu, sigma })
    }

    /// `log int exp(-1/2 t^t Q t + r^t t) dt
    ///   = d/2 log(2 pi) - 1/2 log|Q| + 1/2 r^t Q^-1 r`.
    pub fn log_partition(&self) -> Result<f64> {
        let chol = cholesky(&self.q)?;
        let d = self.dim() as f64;
        let quad = self.r.dot(&chol.solve(&self.r));
        Ok(0.5 * d * LN_2PI - 0.5 * log_det(&chol) + 0.5 * quad)
    }

    pub fn combine(&self, other: &NaturalGaussian, sign: Sign) -> Result<NaturalGaussian> {
        combine(self, other, sign)
    }
}

fn check_square(v: &DVector<f64>, m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: v.len(),
            got: m.nrows(),
        });
    }
    if m.ncols() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: v.len(),
            got: m.ncols(),
        });
    }
    Ok(())
}

/// Componentwise `a +/- b`. No definiteness requirement.
pub fn combine(a: &NaturalGaussian, b: &NaturalGaussian, sign: Sign) -> Result<NaturalGaussian> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (r, q) = match sign {
        Sign::Plus => (&a.r + &b.r, &a.q + &b.q),
        Sign::Minus => (&a.r - &b.r, &a.q - &b.q),
    };
    Ok(NaturalGaussian { r, q })
}

/// `alpha * full_new + (1 - alpha) * old`; `alpha = 1` returns `full_new`
/// unchanged.
pub fn damped_site(
    old: &NaturalGaussian,
    full_new: &NaturalGaussian,
    alpha: f64,
) -> Result<NaturalGaussian> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    if old.dim() != full_new.dim() {
        return Err(Error::DimensionMismatch {
            expected: old.dim(),
            got: full_new.dim(),
        });
    }
    if alpha == 1.0 {
        return Ok(full_new.clone());
    }
    let keep = 1.0 - alpha;
    Ok(NaturalGaussian {
        r: &full_new.r * alpha + &old.r * keep,
        q: symmetrize(&(&full_new.q * alpha + &old.q * keep)),
    })
}

impl MomentGaussian {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        check_square(&mu, &sigma)?;
        Ok(Self {
            sigma: symmetrize(&sigma),
            mu,
        })
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mu: DVector::zeros(d),
            sigma: DMatrix::identity(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// `Q = Sigma^-1`, `r = Q mu`. Estimated covariances go through the
    /// jitter ladder.
    pub fn to_natural(&self) -> Result<NaturalGaussian> {
        let (chol, _) = cholesky_jittered(&self.sigma)?;
        let q = symmetrize(&chol.inverse());
        let r = &q * &self.mu;
        Ok(NaturalGaussian { r, q })
    }

    /// Marginal over the listed coordinates.
    pub fn marginal(&self, coords: &[usize]) -> MomentGaussian {
        let k = coords.len();
        let mu = DVector::from_fn(k, |a, _| self.mu[coords[a]]);
        let sigma = DMatrix::from_fn(k, k, |a, b| self.sigma[(coords[a], coords[b])]);
        MomentGaussian { mu, sigma }
    }

    pub fn sd(&self, coord: usize) -> f64 {
        self.sigma[(coord, coord)].sqrt()
    }
}

/// Precomputed Cholesky factor of a moment Gaussian, for drawing
/// `mu + L z` and evaluating log densities.
#[derive(Debug, Clone)]
pub struct FactoredGaussian {
    mu: DVector<f64>,
    l: DMatrix<f64>,
    log_norm: f64,
}

impl FactoredGaussian {
    pub fn new(m: &MomentGaussian) -> Result<Self> {
        let (chol, _) = cholesky_jittered(&m.sigma)?;
        let d = m.dim() as f64;
        let log_norm = -0.5 * d * LN_2PI - 0.5 * log_det(&chol);
        Ok(Self {
            mu: m.mu.clone(),
            l: chol.l(),
            log_norm,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `mu + L z`, written into `out`.
    #[allow(clippy::needless_range_loop)]
    pub fn transform_into(&self, z: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for a in 0..d {
            let mut acc = self.mu[a];
            for b in 0..=a {
                acc += self.l[(a, b)] * z[b];
            }
            out[a] = acc;
        }
    }

    /// Forward substitution `L u = x - mu`, so no allocation for `d <= 16`;
    /// this sits in the inner loop of pool reweighting.
    #[allow(clippy::needless_range_loop)]
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut stack = [0.0f64; 16];
        let mut heap = Vec::new();
        let u: &mut [f64] = if d <= 16 {
            &mut stack[..d]
        } else {
            heap.resize(d, 0.0);
            &mut heap
        };
        let mut quad = 0.0;
        for a in 0..d {
            let mut acc = x[a] - self.mu[a];
            for b in 0..a {
                acc -= self.l[(a, b)] * u[b];
            }
            u[a] = acc / self.l[(a, a)];
            quad += u[a] * u[a];
        }
        self.log_norm - 0.5 * quad
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile (Wichura's AS241, about 1e-16 relative accuracy).
pub fn std_normal_inverse_cdf(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::DomainError(format!(
            "normal quantile needs 0 < u < 1, got {u}"
        )));
    }
    Ok(ppnd16(u))
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

// Coefficients as published.
#[allow(clippy::excessive_precision)]
fn ppnd16(p: f64) -> f64 {
    const A: [f64; 8] = [
        3.387_132_872_796_366_608,
        133.141_667_891_784_377_45,
        1_971.590_950_306_551_442_7,
        13_731.693_765_509_461_125,
        45_921.953_931_549_871_457,
        67_265.770_927_008_700_853,
        33_430.575_583_588_128_105,
        2_509.080_928_730_122_672_7,
    ];
    const B: [f64; 8] = [
        1.0,
        42.313_330_701_600_911_252,
        687.187_007_492_057_908_3,
        5_394.196_021_424_751_107_7,
        21_213.794_301_586_595_867,
        39_307.895_800_092_710_61,
        28_729.085_735_721_942_674,
        5_226.495_278_852_854_561,
    ];
    const C: [f64; 8] = [
        1.423_437_110_749_683_577_34,
        4.630_337_846_156_545_295_9,
        5.769_497_221_460_691_405_5,
        3.647_848_324_763_204_605_04,
        1.270_458_252_452_368_382_58,
        0.241_780_725_177_450_611_77,
        0.022_723_844_989_269_184_583_3,
        7.745_450_142_783_414_076_4e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.053_191_626_637_758_821_87,
        1.676_384_830_183_803_849_4,
        0.689_767_334_985_100_004_55,
        0.148_103_976_427_480_074_59,
        0.015_198_666_563_616_457_196_6,
        5.475_938_084_995_344_946e-4,
        1.050_750_071_644_416_843_24e-9,
    ];
    const E: [f64; 8] = [
        6.657_904_643_501_103_777_2,
        5.463_784_911_164_114_369_9,
        1.784_826_539_917_291_335_8,
        0.296_560_571_828_504_891_23,
        0.026_532_189_526_576_123_093,
        1.242_660_947_388_078_438_6e-3,
        2.711_555_568_743_487_578_15e-5,
        2.010_334_399_292_288_132_65e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        0.599_832_206_555_887_937_69,
        0.136_929_880_922_735_805_31,
        0.014_875_361_290_850_614_852_5,
        7.868_691_311_456_132_591e-4,
        1.846_318_317_510_054_681_8e-5,
        1.421_511_758_316_445_888_7e-7,
        2.044_263_103_389_939_785_64e-15,
    ];

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180_625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        r -= 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}
