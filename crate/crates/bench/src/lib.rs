//! Fixtures shared by the benchmarks.

use epabc::models::simulate_dataset;
use epabc::models::toy::GaussianIid;
use epabc::rng::stream;
use epabc::{MomentGaussian, NaturalGaussian};
use nalgebra::{DMatrix, DVector};

/// `n` draws of the unit-variance Gaussian toy at `theta = 1`.
pub fn gaussian_toy(n: usize, seed: u64) -> (GaussianIid, Vec<Vec<f64>>) {
    let sim = GaussianIid::new(1.0);
    let data = simulate_dataset(&sim, n, &[1.0], &mut stream(seed, &[]));
    (sim, data)
}

pub fn gaussian_1d(mean: f64, var: f64) -> MomentGaussian {
    MomentGaussian::new(
        DVector::from_element(1, mean),
        DMatrix::from_element(1, 1, var),
    )
    .expect("positive variance")
}

pub fn prior_1d(mean: f64, var: f64) -> NaturalGaussian {
    gaussian_1d(mean, var)
        .to_natural()
        .expect("positive variance")
}
