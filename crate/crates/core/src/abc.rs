//! Simulation-based hybrid moment oracles.
//!
//! Draws come from the cavity (or its marginal over a site's active
//! coordinates), either plain Gaussian or a shared Halton table pushed
//! through `Phi^-1`. Each batch is split into fixed-size chunks, each with
//! its own RNG stream, and chunk sums are merged in index order, so results
//! do not depend on the thread count.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::corrections::{MarginalLift, ProjectionSpec};
use crate::ep::{MomentOracle, Visit};
use crate::error::{Error, Result};
use crate::gauss::{std_normal_inverse_cdf, FactoredGaussian, MomentGaussian};
use crate::models::{Norm, Simulator};
use crate::rng::{child_seed, stream};

/// Draws per RNG stream and per partial sum.
pub const CHUNK: usize = 512;

const PRIMES: [u64; 64] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
    101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151, 157, 163, 167, 173, 179, 181, 191, 193,
    197, 199, 211, 223, 227, 229, 233, 239, 241, 251, 257, 263, 269, 271, 277, 281, 283, 293, 307,
    311,
];

/// Van der Corput radical inverse of `index` in `base`.
pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while index > 0 {
        r += (index % base) as f64 * f;
        index /= base;
        f *= inv;
    }
    r
}

/// Point `index` (from 1) of the unscrambled Halton sequence in `dim`
/// dimensions; coordinate `j` uses the `j`-th prime.
pub fn halton(index: u64, dim: usize) -> Result<Vec<f64>> {
    if dim > PRIMES.len() {
        return Err(Error::DimensionTooLarge(dim));
    }
    Ok(PRIMES[..dim]
        .iter()
        .map(|&b| radical_inverse(index, b))
        .collect())
}

/// Rows `Phi^-1(halton(k + 1))`, `k = 0..len`, generated once per run.
#[derive(Debug, Clone)]
pub struct QmcTable {
    dim: usize,
    values: Vec<f64>,
}

impl QmcTable {
    pub fn new(len: usize, dim: usize) -> Result<Self> {
        if dim > PRIMES.len() {
            return Err(Error::DimensionTooLarge(dim));
        }
        let mut values = Vec::with_capacity(len * dim);
        for k in 0..len {
            for &b in &PRIMES[..dim] {
                values.push(std_normal_inverse_cdf(radical_inverse(k as u64 + 1, b))?);
            }
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `k mod len`.
    pub fn row(&self, k: usize) -> &[f64] {
        let k = k % self.len();
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

/// `mu + L z` for table rows `offset..offset + count` (wrapping), using the
/// first `d` columns of each row.
pub fn qmc_gaussian_draws(
    cavity: &MomentGaussian,
    count: usize,
    table: &QmcTable,
    offset: usize,
) -> Result<Vec<DVector<f64>>> {
    let d = cavity.dim();
    if d > table.dim() {
        return Err(Error::DimensionMismatch {
            expected: table.dim(),
            got: d,
        });
    }
    if count > table.len() {
        return Err(Error::TableExhausted {
            requested: count,
            available: table.len(),
        });
    }
    let f = FactoredGaussian::new(cavity)?;
    let mut x = vec![0.0; d];
    Ok((0..count)
        .map(|k| {
            f.transform_into(&table.row(offset + k)[..d], &mut x);
            DVector::from_column_slice(&x)
        })
        .collect())
}

/// `(sum w)^2 / sum w^2`; zero for an all-zero weight vector.
pub fn ess(weights: &[f64]) -> f64 {
    let (s, s2) = weights
        .iter()
        .fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Log volume of the radius-`epsilon` ball in `dim` dimensions.
pub fn ball_log_volume(epsilon: f64, dim: usize, norm: Norm) -> f64 {
    let d = dim as f64;
    match norm {
        Norm::Euclidean => {
            0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d + 1.0) + d * epsilon.ln()
        }
        Norm::Supremum => d * (2.0 * epsilon).ln(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    /// Draws per adaptive round.
    pub m_batch: usize,
    /// Stop once the accepted mass reaches this.
    pub m_min: usize,
    /// Hard ceiling on draws per oracle call; `None` means `10^4 * m_min`.
    pub m_cap: Option<u64>,
    /// Regenerate the recycling pool below this ESS.
    pub ess_min: f64,
    pub epsilon: f64,
    pub norm: Norm,
    pub use_qmc: bool,
    pub qmc_table_len: usize,
}

impl SamplingConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            m_batch: 1000,
            m_min: 1000,
            m_cap: None,
            ess_min: 1000.0,
            epsilon,
            norm: Norm::Euclidean,
            use_qmc: false,
            qmc_table_len: 1 << 20,
        }
    }

    pub fn cap(&self) -> u64 {
        self.m_cap.unwrap_or(10_000 * self.m_min as u64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.m_batch == 0 {
            return bad("m_batch must be >= 1");
        }
        if self.m_min == 0 {
            return bad("m_min must be >= 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.ess_min >= 1.0) {
            return bad("ess_min must be >= 1");
        }
        if self.use_qmc && self.qmc_table_len < self.m_batch {
            return bad("qmc_table_len must be >= m_batch");
        }
        Ok(())
    }
}

/// Weighted draws from a hybrid, retained for the first-order correction.
/// `thetas` are full-dimensional; under a marginal update they hold the
/// conditional mean `V z + b` and `cond_sd` the conditional standard
/// deviation of each coordinate (zero for directly sampled ones).
#[derive(Debug, Clone, PartialEq)]
pub struct HybridSample {
    pub dim: usize,
    pub thetas: Vec<f64>,
    pub weights: Vec<f64>,
    pub cond_sd: Vec<f64>,
}

impl HybridSample {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn theta(&self, m: usize) -> &[f64] {
        &self.thetas[m * self.dim..(m + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimate {
    pub z_hat: f64,
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    /// Simulations consumed by this call.
    pub m_total: u64,
    /// Draws with positive weight.
    pub m_acc: u64,
    pub ess: f64,
    pub samples: Option<HybridSample>,
}

impl MomentEstimate {
    pub fn moments(&self) -> Result<MomentGaussian> {
        MomentGaussian::new(self.mu_hat.clone(), self.sigma_hat.clone())
    }
}

/// Weighted first and second moments, centered at a fixed point.
#[derive(Debug, Clone)]
struct WeightedSums {
    d: usize,
    sum_w: f64,
    sum_w2: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
    n_pos: u64,
}

impl WeightedSums {
    fn new(d: usize) -> Self {
        Self {
            d,
            sum_w: 0.0,
            sum_w2: 0.0,
            s1: vec![0.0; d],
            s2: vec![0.0; d * d],
            n_pos: 0,
        }
    }

    #[inline]
    fn add(&mut self, w: f64, x: &[f64], center: &[f64]) {
        if !(w > 0.0) {
            return;
        }
        self.sum_w += w;
        self.sum_w2 += w * w;
        self.n_pos += 1;
        let d = self.d;
        for a in 0..d {
            let xa = x[a] - center[a];
            self.s1[a] += w * xa;
            for b in 0..=a {
                self.s2[a * d + b] += w * xa * (x[b] - center[b]);
            }
        }
    }

    fn merge(&mut self, o: &WeightedSums) {
        self.sum_w += o.sum_w;
        self.sum_w2 += o.sum_w2;
        self.n_pos += o.n_pos;
        for (a, b) in self.s1.iter_mut().zip(&o.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&o.s2) {
            *a += b;
        }
    }

    fn ess(&self) -> f64 {
        if self.sum_w2 > 0.0 {
            self.sum_w * self.sum_w / self.sum_w2
        } else {
            0.0
        }
    }

    /// Normalized mean and plain second-moment covariance.
    fn moments(&self, center: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.d;
        let m = DVector::from_fn(d, |a, _| self.s1[a] / self.sum_w);
        let mut sigma = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..=a {
                let v = self.s2[a * d + b] / self.sum_w - m[a] * m[b];
                sigma[(a, b)] = v;
                sigma[(b, a)] = v;
            }
        }
        let mu = DVector::from_fn(d, |a, _| center[a] + m[a]);
        (mu, sigma)
    }
}

/// Where site draws live: the full parameter or the marginal over the
/// site's active coordinates.
struct SiteGeometry {
    coords: Option<Vec<usize>>,
    z_cavity: MomentGaussian,
    z_factor: FactoredGaussian,
    lift: Option<MarginalLift>,
    base: Vec<f64>,
}

impl SiteGeometry {
    fn new(sim: &dyn Simulator, site: usize, cavity: &MomentGaussian) -> Result<Self> {
        let d = cavity.dim();
        let coords = sim.active_block(site).filter(|c| c.len() < d);
        let (z_cavity, lift) = match &coords {
            Some(c) => {
                let proj = ProjectionSpec::selection(c, d)?;
                (cavity.marginal(c), Some(MarginalLift::new(&proj, cavity)?))
            }
            None => (cavity.clone(), None),
        };
        let z_factor = FactoredGaussian::new(&z_cavity)?;
        Ok(Self {
            coords,
            z_factor,
            z_cavity,
            lift,
            base: cavity.mu().iter().copied().collect(),
        })
    }

    fn k(&self) -> usize {
        self.z_cavity.dim()
    }

    #[inline]
    fn fill_theta(&self, z: &[f64], theta: &mut [f64]) {
        match &self.coords {
            Some(c) => {
                for (&j, &v) in c.iter().zip(z) {
                    theta[j] = v;
                }
            }
            None => theta.copy_from_slice(z),
        }
    }

    fn center(&self) -> Vec<f64> {
        self.z_cavity.mu().iter().copied().collect()
    }

    /// Full-space estimate from `z`-space sums.
    fn estimate(
        &self,
        sums: &WeightedSums,
        scale: f64,
        m_total: u64,
        kept: Option<(&[f64], &[f64])>,
    ) -> Result<MomentEstimate> {
        let center = self.center();
        let (mu, sigma) = sums.moments(&center);
        let (mu_hat, sigma_hat) = match &self.lift {
            Some(lift) => {
                let full = lift.lift_moments(&MomentGaussian::new(mu, sigma)?)?;
                (full.mu().clone(), full.sigma().clone())
            }
            None => (mu, sigma),
        };
        let samples = kept.map(|(zs, ws)| self.hybrid_sample(zs, ws));
        Ok(MomentEstimate {
            z_hat: scale * sums.sum_w / m_total as f64,
            mu_hat,
            sigma_hat,
            m_total,
            m_acc: sums.n_pos,
            ess: sums.ess(),
            samples,
        })
    }

    fn hybrid_sample(&self, zs: &[f64], ws: &[f64]) -> HybridSample {
        let k = self.k();
        let d = self.base.len();
        match &self.lift {
            None => HybridSample {
                dim: d,
                thetas: zs.to_vec(),
                weights: ws.to_vec(),
                cond_sd: vec![0.0; d],
            },
            Some(lift) => {
                let mut thetas = Vec::with_capacity(ws.len() * d);
                for z in zs.chunks_exact(k) {
                    thetas.extend(lift.lift_point(z).iter());
                }
                HybridSample {
                    dim: d,
                    thetas,
                    weights: ws.to_vec(),
                    cond_sd: lift.residual_sd(),
                }
            }
        }
    }
}

/// Per-call randomness and execution resources.
pub struct DrawContext<'a> {
    /// Seed of this oracle call; chunk streams derive from it.
    pub seed: u64,
    /// Shared Halton table and the run-wide cursor into it.
    pub qmc: Option<(&'a QmcTable, &'a mut usize)>,
    pub threads: Option<&'a rayon::ThreadPool>,
    /// Retain positively weighted draws in the estimate.
    pub harvest: bool,
}

impl<'a> DrawContext<'a> {
    pub fn plain(seed: u64) -> Self {
        Self {
            seed,
            qmc: None,
            threads: None,
            harvest: false,
        }
    }
}

struct ChunkOut {
    sums: WeightedSums,
    zs: Vec<f64>,
    ys: Vec<f64>,
    ws: Vec<f64>,
    stride: usize,
}

struct Generator<'a> {
    sim: &'a dyn Simulator,
    data: &'a [Vec<f64>],
    site: usize,
    geo: &'a SiteGeometry,
    center: Vec<f64>,
    epsilon: f64,
    norm: Norm,
}

#[derive(Clone, Copy)]
enum Keep {
    Nothing,
    Accepted,
    All,
}

impl Generator<'_> {
    fn chunk(
        &self,
        seed: u64,
        batch: u64,
        chunk: u64,
        count: usize,
        qmc_start: Option<(&QmcTable, usize)>,
        keep: Keep,
    ) -> ChunkOut {
        let k = self.geo.k();
        let mut rng = stream(seed, &[batch, chunk]);
        let mut sums = WeightedSums::new(k);
        let mut z_std = vec![0.0; k];
        let mut z = vec![0.0; k];
        let mut theta = self.geo.base.clone();
        let mut y = Vec::new();
        let history = &self.data[..self.site];
        let observed = &self.data[self.site];
        let mut out = ChunkOut {
            sums: WeightedSums::new(k),
            zs: Vec::new(),
            ys: Vec::new(),
            ws: Vec::new(),
            stride: 0,
        };
        for j in 0..count {
            match qmc_start {
                Some((table, start)) => {
                    z_std.copy_from_slice(&table.row(start + j)[..k]);
                }
                None => {
                    for v in z_std.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                }
            }
            self.geo.z_factor.transform_into(&z_std, &mut z);
            self.geo.fill_theta(&z, &mut theta);
            y.clear();
            self.sim
                .sample_chunk(self.site, history, &theta, &mut rng, &mut y);
            let w = self
                .sim
                .accept_weight(self.site, &y, observed, self.epsilon, self.norm);
            sums.add(w, &z, &self.center);
            match keep {
                Keep::Nothing => {}
                Keep::Accepted => {
                    if w > 0.0 {
                        out.zs.extend_from_slice(&z);
                        out.ws.push(w);
                    }
                }
                Keep::All => {
                    out.zs.extend_from_slice(&z);
                    out.stride = y.len();
                    out.ys.extend_from_slice(&y);
                }
            }
        }
        out.sums = sums;
        out
    }
}

struct Generated {
    sums: WeightedSums,
    m_total: u64,
    zs: Vec<f64>,
    ys: Vec<f64>,
    ws: Vec<f64>,
    stride: usize,
    chunk_sizes: Vec<usize>,
}

/// Adaptive batching: rounds of `m_batch` draws until the accepted mass
/// reaches `m_min` or the cap is hit.
fn generate(
    gen: &Generator<'_>,
    cfg: &SamplingConfig,
    draw: &mut DrawContext<'_>,
    keep: Keep,
) -> Generated {
    let cap = cfg.cap();
    let n_chunks = cfg.m_batch.div_ceil(CHUNK);
    let mut all = Generated {
        sums: WeightedSums::new(gen.geo.k()),
        m_total: 0,
        zs: Vec::new(),
        ys: Vec::new(),
        ws: Vec::new(),
        stride: 0,
        chunk_sizes: Vec::new(),
    };
    let mut batch = 0u64;
    loop {
        let start = draw.qmc.as_ref().map(|(_, cursor)| **cursor);
        let table = draw.qmc.as_ref().map(|(t, _)| *t);
        let run = |c: usize| {
            let count = CHUNK.min(cfg.m_batch - c * CHUNK);
            let q = table.zip(start).map(|(t, s)| (t, s + c * CHUNK));
            gen.chunk(draw.seed, batch, c as u64, count, q, keep)
        };
        let outs: Vec<ChunkOut> = match draw.threads {
            Some(pool) => pool.install(|| (0..n_chunks).into_par_iter().map(run).collect()),
            None => (0..n_chunks).map(run).collect(),
        };
        for (c, o) in outs.into_iter().enumerate() {
            all.sums.merge(&o.sums);
            all.zs.extend(o.zs);
            all.ys.extend(o.ys);
            all.ws.extend(o.ws);
            if o.stride > 0 {
                all.stride = o.stride;
            }
            all.chunk_sizes.push(CHUNK.min(cfg.m_batch - c * CHUNK));
        }
        if let Some((t, cursor)) = draw.qmc.as_mut() {
            **cursor = (**cursor + cfg.m_batch) % t.len();
        }
        all.m_total += cfg.m_batch as u64;
        batch += 1;
        if all.sums.sum_w >= cfg.m_min as f64 || all.m_total >= cap {
            break;
        }
    }
    all
}

fn check_qmc(draw: &DrawContext<'_>, k: usize, cfg: &SamplingConfig) -> Result<()> {
    if let Some((t, _)) = &draw.qmc {
        if k > t.dim() {
            return Err(Error::DimensionMismatch {
                expected: t.dim(),
                got: k,
            });
        }
        if cfg.m_batch > t.len() {
            return Err(Error::TableExhausted {
                requested: cfg.m_batch,
                available: t.len(),
            });
        }
    }
    Ok(())
}

/// Fresh-simulation hybrid moments for site `site`. `data` holds every
/// observed chunk; chunks before `site` are the conditioning history.
pub fn estimate_moments_basic(
    cavity: &MomentGaussian,
    sim: &dyn Simulator,
    site: usize,
    data: &[Vec<f64>],
    cfg: &SamplingConfig,
    draw: &mut DrawContext<'_>,
) -> Result<MomentEstimate> {
    let geo = SiteGeometry::new(sim, site, cavity)?;
    check_qmc(draw, geo.k(), cfg)?;
    let gen = Generator {
        sim,
        data,
        site,
        center: geo.center(),
        geo: &geo,
        epsilon: cfg.epsilon,
        norm: cfg.norm,
    };
    let keep = if draw.harvest {
        Keep::Accepted
    } else {
        Keep::Nothing
    };
    let g = generate(&gen, cfg, draw, keep);
    if !(g.sums.sum_w > 0.0) {
        return Err(Error::ZeroAcceptance {
            site,
            draws: g.m_total,
        });
    }
    let kept = draw.harvest.then_some((g.zs.as_slice(), g.ws.as_slice()));
    geo.estimate(&g.sums, 1.0, g.m_total, kept)
}

/// Reusable simulations for recycling across IID sites.
#[derive(Debug, Clone)]
pub struct ParticlePool {
    /// IID group the chunks were simulated for.
    pub group: u64,
    /// Active coordinates the draws live on (`None`: all of theta).
    pub coords: Option<Vec<usize>>,
    /// Generation-time cavity over the draw space.
    pub anchor: MomentGaussian,
    k: usize,
    thetas: Vec<f64>,
    stride: usize,
    chunks: Vec<f64>,
    anchor_log_pdf: Vec<f64>,
    chunk_sizes: Vec<usize>,
}

impl ParticlePool {
    pub fn len(&self) -> usize {
        self.anchor_log_pdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor_log_pdf.is_empty()
    }

    pub fn theta(&self, m: usize) -> &[f64] {
        &self.thetas[m * self.k..(m + 1) * self.k]
    }

    pub fn chunk(&self, m: usize) -> &[f64] {
        &self.chunks[m * self.stride..(m + 1) * self.stride]
    }
}

/// Recycled hybrid moments: reweight the pool to the current cavity and
/// regenerate it there when it is missing, built for another group, or its
/// ESS falls below `ess_min`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_moments_recycled(
    pool: Option<ParticlePool>,
    cavity: &MomentGaussian,
    sim: &dyn Simulator,
    site: usize,
    data: &[Vec<f64>],
    cfg: &SamplingConfig,
    draw: &mut DrawContext<'_>,
) -> Result<(MomentEstimate, ParticlePool)> {
    let group = sim.iid_group(site).ok_or_else(|| {
        Error::InvalidConfig(format!(
            "site {site} is not IID; recycling needs an IID model"
        ))
    })?;
    let geo = SiteGeometry::new(sim, site, cavity)?;
    let compatible = pool
        .as_ref()
        .is_some_and(|p| p.group == group && p.coords == geo.coords && !p.is_empty());
    if compatible {
        let pool = pool.expect("checked above");
        if let Some(est) = reweight(&pool, &geo, sim, site, data, cfg, draw)? {
            return Ok((est, pool));
        }
    }

    check_qmc(draw, geo.k(), cfg)?;
    let gen = Generator {
        sim,
        data,
        site,
        center: geo.center(),
        geo: &geo,
        epsilon: cfg.epsilon,
        norm: cfg.norm,
    };
    let g = generate(&gen, cfg, draw, Keep::All);
    if !(g.sums.sum_w > 0.0) {
        return Err(Error::ZeroAcceptance {
            site,
            draws: g.m_total,
        });
    }
    let k = geo.k();
    let observed = &data[site];
    let mut ws = Vec::new();
    let mut kept_z = Vec::new();
    let anchor_log_pdf: Vec<f64> =
        g.zs.chunks_exact(k)
            .map(|z| geo.z_factor.log_pdf(z))
            .collect();
    if draw.harvest {
        for (m, z) in g.zs.chunks_exact(k).enumerate() {
            let y = &g.ys[m * g.stride..(m + 1) * g.stride];
            let w = sim.accept_weight(site, y, observed, cfg.epsilon, cfg.norm);
            if w > 0.0 {
                kept_z.extend_from_slice(z);
                ws.push(w);
            }
        }
    }
    let kept = draw.harvest.then_some((kept_z.as_slice(), ws.as_slice()));
    let est = geo.estimate(&g.sums, 1.0, g.m_total, kept)?;
    let pool = ParticlePool {
        group,
        coords: geo.coords.clone(),
        anchor: geo.z_cavity.clone(),
        k,
        thetas: g.zs,
        stride: g.stride,
        chunks: g.ys,
        anchor_log_pdf,
        chunk_sizes: g.chunk_sizes,
    };
    Ok((est, pool))
}

/// Importance-reweighted estimate from an existing pool; `None` when the
/// ESS calls for regeneration. Consumes no simulations.
#[allow(clippy::needless_range_loop)]
fn reweight(
    pool: &ParticlePool,
    geo: &SiteGeometry,
    sim: &dyn Simulator,
    site: usize,
    data: &[Vec<f64>],
    cfg: &SamplingConfig,
    draw: &DrawContext<'_>,
) -> Result<Option<MomentEstimate>> {
    let observed = &data[site];
    let n = pool.len();
    let mut log_w = vec![f64::NEG_INFINITY; n];
    let mut max_lw = f64::NEG_INFINITY;
    for (m, lw) in log_w.iter_mut().enumerate() {
        let kw = sim.accept_weight(site, pool.chunk(m), observed, cfg.epsilon, cfg.norm);
        if kw > 0.0 {
            let lr = geo.z_factor.log_pdf(pool.theta(m)) - pool.anchor_log_pdf[m];
            *lw = lr + kw.ln();
            max_lw = max_lw.max(*lw);
        }
    }
    if !max_lw.is_finite() {
        return Ok(None);
    }
    let w: Vec<f64> = log_w.iter().map(|&lw| (lw - max_lw).exp()).collect();
    if ess(&w) < cfg.ess_min {
        return Ok(None);
    }
    let center = geo.center();
    let mut sums = WeightedSums::new(pool.k);
    let mut start = 0;
    for &size in &pool.chunk_sizes {
        let mut part = WeightedSums::new(pool.k);
        for m in start..start + size {
            part.add(w[m], pool.theta(m), &center);
        }
        sums.merge(&part);
        start += size;
    }
    let kept = if draw.harvest {
        let mut zs = Vec::new();
        let mut ws = Vec::new();
        for (m, &wm) in w.iter().enumerate() {
            if wm > 0.0 {
                zs.extend_from_slice(pool.theta(m));
                ws.push(wm);
            }
        }
        Some((zs, ws))
    } else {
        None
    };
    let est = geo.estimate(
        &sums,
        max_lw.exp(),
        n as u64,
        kept.as_ref().map(|(z, w)| (z.as_slice(), w.as_slice())),
    )?;
    Ok(Some(MomentEstimate { m_total: 0, ..est }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    /// Fresh simulations at every visit.
    Basic,
    /// Reuse simulations across IID sites.
    Recycled,
}

/// The ABC moment oracle plugged into the EP engine.
pub struct AbcOracle<'a> {
    sim: &'a dyn Simulator,
    data: &'a [Vec<f64>],
    cfg: SamplingConfig,
    scheme: Scheme,
    table: Option<QmcTable>,
    cursor: usize,
    pools: BTreeMap<u64, ParticlePool>,
    threads: Option<rayon::ThreadPool>,
    draws: u64,
}

impl<'a> AbcOracle<'a> {
    pub fn new(
        sim: &'a dyn Simulator,
        data: &'a [Vec<f64>],
        cfg: SamplingConfig,
        scheme: Scheme,
    ) -> Result<Self> {
        cfg.validate()?;
        if scheme == Scheme::Recycled && !sim.is_iid() {
            return Err(Error::InvalidConfig(
                "recycling requires an IID model".to_string(),
            ));
        }
        let table = if cfg.use_qmc {
            let d = sim.dim();
            let k = (0..data.len())
                .map(|i| sim.active_block(i).map_or(d, |c| c.len().min(d)))
                .max()
                .unwrap_or(d);
            Some(QmcTable::new(cfg.qmc_table_len, k)?)
        } else {
            None
        };
        Ok(Self {
            sim,
            data,
            cfg,
            scheme,
            table,
            cursor: 0,
            pools: BTreeMap::new(),
            threads: None,
            draws: 0,
        })
    }

    /// Parallelize chunks over `threads` workers; results are unchanged.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        if threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            self.threads = Some(pool);
        }
        Ok(self)
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.cfg
    }

    /// Simulations consumed so far.
    pub fn total_draws(&self) -> u64 {
        self.draws
    }
}

impl MomentOracle for AbcOracle<'_> {
    fn hybrid_moments(&mut self, cavity: &MomentGaussian, visit: &Visit) -> Result<MomentEstimate> {
        let site = visit.site;
        let mut draw = DrawContext {
            seed: child_seed(visit.seed, &[visit.pass as u64, site as u64]),
            qmc: self.table.as_ref().map(|t| (t, &mut self.cursor)),
            threads: self.threads.as_ref(),
            harvest: visit.harvest,
        };
        let est = match self.scheme {
            Scheme::Basic => {
                estimate_moments_basic(cavity, self.sim, site, self.data, &self.cfg, &mut draw)?
            }
            Scheme::Recycled => {
                let group = self.sim.iid_group(site).unwrap_or(0);
                let pool = self.pools.remove(&group);
                let (est, pool) = estimate_moments_recycled(
                    pool, cavity, self.sim, site, self.data, &self.cfg, &mut draw,
                )?;
                self.pools.insert(group, pool);
                est
            }
        };
        self.draws += est.m_total;
        Ok(est)
    }
}
