//! Expectation propagation with simulation-estimated site moments
//! (EP-ABC): Gaussian EP whose hybrid moments come from ABC draws under an
//! epsilon-ball kernel, plus the simulators, corrections and reference
//! samplers used to check it.

// `!(x > 0.0)` guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod abc;
pub mod baselines;
pub mod composite;
pub mod corrections;
pub mod ep;
pub mod error;
pub mod gauss;
pub mod models;
pub mod rng;

pub use abc::{
    ball_log_volume, estimate_moments_basic, estimate_moments_recycled, AbcOracle, DrawContext,
    HybridSample, MomentEstimate, ParticlePool, QmcTable, SamplingConfig, Scheme,
};
pub use composite::{composite_target, make_blocks, BlockScheme, CompositeTarget, HiddenMarkov};
pub use corrections::{
    lift_marginal_moments, pwo_first_order, CorrectedMarginal, ProjectionSpec, PwoAccumulator,
};
pub use ep::{run_ep, EpConfig, EpRun, EpState, FailurePolicy, MomentOracle, Site, Visit};
pub use error::{Error, Result};
pub use gauss::{MomentGaussian, NaturalGaussian};
pub use models::{Norm, Simulator};
pub use rng::SimRng;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
