//! Marginal composite likelihood for hidden Markov models: contiguous
//! blocks of observations become IID sites, each simulated from the
//! stationary chain.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::models::{ball_indicator, Norm, Simulator};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockScheme {
    pub l: usize,
    pub n: usize,
    /// 1-based inclusive `(start, end)` per block.
    pub ranges: Vec<(usize, usize)>,
    /// Per-block weights; fixed at 1.
    pub eta: Vec<f64>,
}

/// `ceil(n / l)` contiguous blocks of length `l`; the last may be shorter.
pub fn make_blocks(n: usize, l: usize) -> Result<BlockScheme> {
    if l == 0 || l > n {
        return Err(Error::InvalidBlockLength { n, l });
    }
    let ranges: Vec<(usize, usize)> = (0..n.div_ceil(l))
        .map(|s| (s * l + 1, ((s + 1) * l).min(n)))
        .collect();
    Ok(BlockScheme {
        l,
        n,
        eta: vec![1.0; ranges.len()],
        ranges,
    })
}

impl BlockScheme {
    pub fn n_s(&self) -> usize {
        self.ranges.len()
    }

    pub fn block_len(&self, s: usize) -> usize {
        let (a, b) = self.ranges[s];
        b - a + 1
    }

    /// Cut a length-`n` series into per-block chunks.
    pub fn split(&self, series: &[f64]) -> Result<Vec<Vec<f64>>> {
        if series.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: series.len(),
            });
        }
        Ok(self
            .ranges
            .iter()
            .map(|&(a, b)| series[a - 1..b].to_vec())
            .collect())
    }
}

/// Scalar-state HMM with a stationary initial law.
pub trait HiddenMarkov: Send + Sync {
    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|k| format!("theta{k}")).collect()
    }

    /// Errors when theta admits no stationary law.
    fn check(&self, theta: &[f64]) -> Result<()>;

    fn sample_initial(&self, theta: &[f64], rng: &mut SimRng) -> f64;

    fn sample_transition(&self, x: f64, theta: &[f64], rng: &mut SimRng) -> f64;

    fn sample_emission(&self, x: f64, theta: &[f64], rng: &mut SimRng) -> f64;
}

/// One draw of `len` consecutive latent states and their observations,
/// started from the stationary law.
pub fn sample_latent_block<H: HiddenMarkov + ?Sized>(
    hmm: &H,
    len: usize,
    theta: &[f64],
    rng: &mut SimRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    hmm.check(theta)?;
    let mut xs = Vec::with_capacity(len);
    let mut ys = Vec::with_capacity(len);
    let mut x = hmm.sample_initial(theta, rng);
    for t in 0..len {
        if t > 0 {
            x = hmm.sample_transition(x, theta, rng);
        }
        xs.push(x);
        ys.push(hmm.sample_emission(x, theta, rng));
    }
    Ok((xs, ys))
}

/// Observations of block `s`, marginally distributed as `p(y_s | theta)`.
pub fn sample_block<H: HiddenMarkov + ?Sized>(
    s: usize,
    scheme: &BlockScheme,
    hmm: &H,
    theta: &[f64],
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    Ok(sample_latent_block(hmm, scheme.block_len(s), theta, rng)?.1)
}

/// The blocks of an HMM as IID sites.
///
/// Every site draws a full length-`l` block; a shorter last block is
/// compared on the prefix, so all sites share one law and one pool.
#[derive(Debug, Clone)]
pub struct CompositeTarget<H> {
    pub hmm: H,
    pub scheme: BlockScheme,
}

pub fn composite_target<H: HiddenMarkov>(hmm: H, scheme: BlockScheme) -> CompositeTarget<H> {
    CompositeTarget { hmm, scheme }
}

impl<H: HiddenMarkov> Simulator for CompositeTarget<H> {
    fn dim(&self) -> usize {
        self.hmm.dim()
    }

    fn param_names(&self) -> Vec<String> {
        self.hmm.param_names()
    }

    fn chunk_dim(&self, i: usize) -> usize {
        self.scheme.block_len(i)
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
        match sample_latent_block(&self.hmm, self.scheme.l, theta, rng) {
            Ok((_, ys)) => out.extend(ys),
            Err(_) => out.extend(std::iter::repeat_n(f64::NAN, self.scheme.l)),
        }
    }

    fn summary<'a>(&self, _i: usize, chunk: &'a [f64]) -> Cow<'a, [f64]> {
        Cow::Borrowed(chunk)
    }

    fn accept_weight(
        &self,
        _i: usize,
        simulated: &[f64],
        observed: &[f64],
        epsilon: f64,
        norm: Norm,
    ) -> f64 {
        ball_indicator(&simulated[..observed.len()], observed, epsilon, norm)
    }
}
