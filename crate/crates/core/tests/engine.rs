//! End-to-end checks of EP driven by the ABC oracles.

use epabc::baselines::{
    gaussian_iid_log_marginal, mcmc_abc, multimodal_log_posterior, quadrature_posterior_1d,
    ConjugateGaussianOracle, DatasetSummary, McmcAbcConfig,
};
use epabc::composite::composite_target;
use epabc::corrections::{pwo_grid, PWO_GRID_POINTS};
use epabc::ep::Visit;
use epabc::gauss::{std_normal_cdf, std_normal_inverse_cdf};
use epabc::models::race::{RaceConstants, RaceModel, RaceParametrization, RaceParams, RtWindow};
use epabc::models::simulate_dataset;
use epabc::models::sv::{StableSv, SvParams};
use epabc::models::toy::{GaussianIid, MultimodalToy};
use epabc::rng::stream;
use epabc::{
    ball_log_volume, make_blocks, pwo_first_order, run_ep, AbcOracle, EpConfig, HybridSample,
    MomentEstimate, MomentGaussian, MomentOracle, NaturalGaussian, Norm, PwoAccumulator,
    SamplingConfig, Scheme, Simulator,
};
use nalgebra::{DMatrix, DVector};

fn prior_1d(mean: f64, var: f64) -> NaturalGaussian {
    MomentGaussian::new(
        DVector::from_element(1, mean),
        DMatrix::from_element(1, 1, var),
    )
    .unwrap()
    .to_natural()
    .unwrap()
}

fn one_pass() -> EpConfig {
    EpConfig {
        passes: 1,
        ..EpConfig::default()
    }
}

#[test]
fn kernel_volume_offsets_the_evidence() {
    let sim = GaussianIid::new(1.0);
    let data = vec![vec![0.0]];
    let eps = 0.01;
    let mut cfg = SamplingConfig::new(eps);
    cfg.m_min = 4000;
    cfg.m_batch = 20_000;
    let mut oracle = AbcOracle::new(&sim, &data, cfg, Scheme::Basic).unwrap();
    let run = run_ep(&prior_1d(0.0, 1.0), 1, &mut oracle, &one_pass(), 5).unwrap();
    let log_v = sim.kernel_log_volume(0, eps, Norm::Euclidean).unwrap();
    assert_eq!(log_v, ball_log_volume(eps, 1, Norm::Euclidean));
    assert!((log_v - (2.0 * eps).ln()).abs() < 1e-14);
    let raw = run.state.log_evidence(0.0).unwrap();
    let corrected = run.state.log_evidence(log_v).unwrap();
    assert_eq!(raw - corrected, log_v);
    // log N(0; 0, 2)
    let exact = gaussian_iid_log_marginal(&[0.0], 1.0, 0.0, 1.0);
    assert!((exact + 1.26551).abs() < 1e-5);
    assert!((corrected - exact).abs() < 0.1, "{corrected} vs {exact}");
}

#[test]
fn infinite_epsilon_composite_returns_the_prior() {
    let truth = SvParams {
        mu: 0.35,
        rho: 0.97,
        sigma: 0.2,
        alpha: 1.5,
    };
    let (_, y) = StableSv
        .simulate_path(&truth, 40, &mut stream(1, &[]))
        .unwrap();
    let scheme = make_blocks(40, 2).unwrap();
    let data = scheme.split(&y).unwrap();
    let target = composite_target(StableSv, scheme);
    let prior_m = MomentGaussian::new(
        DVector::from_vec(vec![0.0, 1.0, -1.0, 0.0]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.5, 0.5, 0.5])),
    )
    .unwrap();
    let mut cfg = SamplingConfig::new(f64::INFINITY);
    cfg.use_qmc = true;
    cfg.m_min = 20_000;
    cfg.m_batch = 20_000;
    let mut oracle = AbcOracle::new(&target, &data, cfg, Scheme::Basic).unwrap();
    let run = run_ep(
        &prior_m.to_natural().unwrap(),
        data.len(),
        &mut oracle,
        &one_pass(),
        2,
    )
    .unwrap();
    let post = run.state.global.to_moments().unwrap();
    for k in 0..4 {
        let sd0 = prior_m.sd(k);
        assert!(
            (post.mu()[k] - prior_m.mu()[k]).abs() < 0.05 * sd0,
            "coord {k}"
        );
        assert!((post.sd(k) / sd0 - 1.0).abs() < 0.05, "coord {k}");
    }
    for s in &run.state.sites {
        assert_eq!(s.z_hat, Some(1.0));
    }
}

#[test]
fn composite_block_configurations() {
    let truth = SvParams {
        mu: 0.35,
        rho: 0.97,
        sigma: 0.2,
        alpha: 1.5,
    };
    let (_, y) = StableSv
        .simulate_path(&truth, 120, &mut stream(2, &[]))
        .unwrap();
    for (l, n_s) in [(2, 60), (3, 40), (4, 30)] {
        let scheme = make_blocks(120, l).unwrap();
        assert_eq!(scheme.n_s(), n_s);
        let data = scheme.split(&y).unwrap();
        let target = composite_target(StableSv, scheme);
        assert!((0..n_s).all(|s| target.chunk_dim(s) == l));
        assert_eq!(data.concat(), y);
    }
}

fn multimodal_data() -> Vec<f64> {
    let data = simulate_dataset(&MultimodalToy, 50, &[2.0], &mut stream(3, &[]));
    data.into_iter().map(|r| r[0]).collect()
}

#[test]
fn multimodal_quadrature_posterior() {
    let y = multimodal_data();
    let post =
        quadrature_posterior_1d(&multimodal_log_posterior(&y, 100.0), -8.0, 8.0, 8001).unwrap();
    assert!(post.mean.abs() < 1e-8, "{}", post.mean);
    let h = post.grid[1] - post.grid[0];
    let mass: f64 = post.density.iter().sum::<f64>() * h
        - 0.5 * h * (post.density[0] + post.density[post.density.len() - 1]);
    assert!((mass - 1.0).abs() < 1e-10);
    let argmax = |range: std::ops::Range<usize>| {
        range
            .max_by(|&a, &b| post.density[a].total_cmp(&post.density[b]))
            .map(|k| post.grid[k])
            .unwrap()
    };
    let mid = post.grid.len() / 2;
    let (left, right) = (argmax(0..mid), argmax(mid..post.grid.len()));
    assert!(
        (left + 2.0).abs() < 0.5 && (right - 2.0).abs() < 0.5,
        "{left} {right}"
    );
    assert!((left + right).abs() < 1e-9);
    assert!(post.density[mid] < 1e-3 * post.density[post.grid.len() / 2 + 1000]);
}

#[test]
fn mcmc_abc_matches_quadrature_on_gaussian_toy() {
    let sim = GaussianIid::new(1.0);
    let obs = simulate_dataset(&sim, 20, &[0.7], &mut stream(4, &[]));
    let ybar = obs.iter().map(|r| r[0]).sum::<f64>() / 20.0;
    let eps = 0.05;
    let prior = prior_1d(0.0, 100.0);
    let cfg = McmcAbcConfig {
        summary: DatasetSummary::SampleMean,
        epsilon: eps,
        norm: Norm::Euclidean,
        proposal_scales: vec![0.3],
        iterations: 60_000,
        init: vec![ybar],
        thin: 1,
    };
    let chain = mcmc_abc(&sim, &obs, &cfg, &prior, &mut stream(5, &[])).unwrap();
    // ABC posterior: prior times P(|ybar_sim - ybar| <= eps), ybar_sim ~ N(theta, 1/20).
    let rn = 20f64.sqrt();
    let target = |t: f64| {
        -0.5 * t * t / 100.0
            + (std_normal_cdf((ybar + eps - t) * rn) - std_normal_cdf((ybar - eps - t) * rn)).ln()
    };
    let quad = quadrature_posterior_1d(&target, ybar - 3.0, ybar + 3.0, 4001).unwrap();
    let burn = chain.samples.len() / 10;
    let mean = chain.samples[burn..].iter().map(|s| s.1[0]).sum::<f64>()
        / (chain.samples.len() - burn) as f64;
    assert!((mean - quad.mean).abs() < 0.05, "{mean} vs {}", quad.mean);
    assert!(chain.acceptance_rate() > 0.01);
}

fn difficult_model(n: usize) -> RaceModel {
    RaceModel {
        param: RaceParametrization::Difficult { c2: 10.0, s: 0.0 },
        conditions: vec![0; n],
        consts: RaceConstants {
            lapse_prob: 0.0,
            ..RaceConstants::default()
        },
        window: RtWindow::Log,
    }
}

#[test]
fn rt_quantile_protocol_runs() {
    let model = difficult_model(200);
    let truth = [1e-3f64.ln(), 0.08f64.ln(), 20f64.ln()];
    let obs = simulate_dataset(&model, 200, &truth, &mut stream(6, &[]));
    let summary = DatasetSummary::RtQuantiles {
        n_quantiles: 8,
        scale: 1.0 / 200.0,
    };
    assert_eq!(summary.compute(&obs).len(), 9);
    let cfg = McmcAbcConfig {
        summary,
        epsilon: 0.025,
        norm: Norm::Euclidean,
        proposal_scales: vec![0.05; 3],
        iterations: 300,
        init: truth.to_vec(),
        thin: 10,
    };
    let prior = MomentGaussian::new(DVector::zeros(3), DMatrix::identity(3, 3) * 100.0)
        .unwrap()
        .to_natural()
        .unwrap();
    let chain = mcmc_abc(&model, &obs, &cfg, &prior, &mut stream(7, &[])).unwrap();
    assert_eq!(chain.samples.len(), 30);
    assert_eq!(chain.draws, 300);
}

#[test]
fn race_sites_touch_only_their_block() {
    let k = 3;
    let model_conds: Vec<usize> = (0..60).map(|t| t % k).collect();
    let model = RaceModel {
        param: RaceParametrization::Full { n_conditions: k },
        conditions: model_conds,
        consts: RaceConstants::default(),
        window: RtWindow::Log,
    };
    let truth = RaceParams {
        drifts: vec![[0.02, 0.06], [0.04, 0.04], [0.06, 0.02]],
        c1: 10.0,
        c2: 12.0,
        s: 0.0,
    }
    .to_theta()
    .unwrap();
    let data = simulate_dataset(&model, 60, &truth, &mut stream(8, &[]));
    let d = model.dim();
    let prior = MomentGaussian::new(
        DVector::from_column_slice(&truth),
        DMatrix::identity(d, d) * 0.25,
    )
    .unwrap()
    .to_natural()
    .unwrap();
    let mut cfg = SamplingConfig::new(0.3);
    cfg.m_min = 500;
    let mut oracle = AbcOracle::new(&model, &data, cfg, Scheme::Basic).unwrap();
    let run = run_ep(&prior, data.len(), &mut oracle, &one_pass(), 9).unwrap();
    for (i, site) in run.state.sites.iter().enumerate() {
        let block = model.active_block(i).unwrap();
        assert_eq!(block.len(), 5);
        let q = site.nat.q();
        let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..d {
            for b in 0..d {
                if !(block.contains(&a) && block.contains(&b)) {
                    assert!(
                        q[(a, b)].abs() <= 1e-8 * scale.max(1.0),
                        "site {i} Q[{a},{b}]"
                    );
                }
            }
            if !block.contains(&a) {
                assert!(
                    site.nat.r()[a].abs() <= 1e-8 * scale.max(1.0) * 10.0,
                    "site {i} r[{a}]"
                );
            }
        }
    }
}

/// Exact conjugate moments plus a deterministic quantile sample of the
/// exact hybrid when harvesting.
struct QuantileConjugate(ConjugateGaussianOracle);

impl MomentOracle for QuantileConjugate {
    fn hybrid_moments(
        &mut self,
        cavity: &MomentGaussian,
        visit: &Visit,
    ) -> epabc::Result<MomentEstimate> {
        let mut est = self.0.hybrid_moments(cavity, visit)?;
        if visit.harvest {
            let m = 50_000;
            let (mu, sd) = (est.mu_hat[0], est.sigma_hat[(0, 0)].sqrt());
            est.samples = Some(HybridSample {
                dim: 1,
                thetas: (0..m)
                    .map(|k| mu + sd * std_normal_inverse_cdf((k as f64 + 0.5) / m as f64).unwrap())
                    .collect(),
                weights: vec![1.0; m],
                cond_sd: vec![0.0],
            });
        }
        Ok(est)
    }
}

fn pwo_for(run: epabc::EpRun) -> (MomentGaussian, PwoAccumulator) {
    let q = run.state.global.to_moments().unwrap();
    let acc = PwoAccumulator {
        q: q.clone(),
        log_z_q: run.state.log_evidence(0.0).unwrap(),
        hybrids: run.hybrids,
    };
    (q, acc)
}

#[test]
fn converged_exact_correction_keeps_the_mean() {
    let sim = GaussianIid::new(1.0);
    let y: Vec<f64> = simulate_dataset(&sim, 10, &[1.0], &mut stream(10, &[]))
        .into_iter()
        .map(|r| r[0])
        .collect();
    let mut oracle = QuantileConjugate(ConjugateGaussianOracle::iid(&y, 1.0));
    let config = EpConfig {
        passes: 2,
        collect_hybrids: true,
        ..EpConfig::default()
    };
    let (q, acc) = pwo_for(run_ep(&prior_1d(0.0, 100.0), 10, &mut oracle, &config, 0).unwrap());
    for h in &acc.hybrids {
        assert!((h.log_z - acc.log_z_q).abs() < 1e-9);
    }
    let grid = pwo_grid(&q, 0, PWO_GRID_POINTS);
    let c = pwo_first_order(&acc, 0, &grid).unwrap();
    assert!(!c.flagged, "violation {}", c.violation);
    assert!(
        (c.mean() - q.mu()[0]).abs() < 1e-3 * q.sd(0),
        "{} vs {}",
        c.mean(),
        q.mu()[0]
    );
}

#[test]
fn abc_correction_mean_within_monte_carlo_error() {
    let sim = GaussianIid::new(1.0);
    let data = simulate_dataset(&sim, 10, &[1.0], &mut stream(10, &[]));
    let mut cfg = SamplingConfig::new(0.05);
    cfg.m_min = 20_000;
    cfg.m_batch = 20_000;
    cfg.use_qmc = true;
    let mut oracle = AbcOracle::new(&sim, &data, cfg, Scheme::Basic).unwrap();
    let config = EpConfig {
        passes: 3,
        collect_hybrids: true,
        ..EpConfig::default()
    };
    let (q, acc) = pwo_for(run_ep(&prior_1d(0.0, 100.0), 10, &mut oracle, &config, 11).unwrap());
    assert_eq!(acc.hybrids.len(), 10);
    let grid = pwo_grid(&q, 0, PWO_GRID_POINTS);
    let c = pwo_first_order(&acc, 0, &grid).unwrap();
    // Amplified Monte Carlo noise may trip the flag; the clipped version
    // must still be a CDF.
    assert_eq!(c.flagged, c.violation > 1e-3);
    assert!(c.clipped_cdf.windows(2).all(|w| w[1] >= w[0]));
    assert!(c.clipped_cdf.iter().all(|f| (0.0..=1.0).contains(f)));

    // Second route: the corrected mean in closed form from the weighted
    // hybrid sample means.
    let n = acc.hybrids.len() as f64;
    let zq = acc.log_z_q.exp();
    let means: Vec<f64> = acc
        .hybrids
        .iter()
        .map(|h| {
            let w: f64 = h.samples.weights.iter().sum();
            h.samples
                .thetas
                .iter()
                .zip(&h.samples.weights)
                .map(|(t, v)| t * v)
                .sum::<f64>()
                / w
        })
        .collect();
    let zs: Vec<f64> = acc.hybrids.iter().map(|h| h.log_z.exp()).collect();
    let den = zs.iter().sum::<f64>() - (n - 1.0) * zq;
    let direct =
        (zs.iter().zip(&means).map(|(z, m)| z * m).sum::<f64>() - (n - 1.0) * zq * q.mu()[0]) / den;
    assert!(
        (c.mean() - direct).abs() < 1e-3 * q.sd(0),
        "{} vs {direct}",
        c.mean()
    );

    // The departure from q's mean is a weighted sum of per-hybrid mean
    // errors; bound it by three plug-in standard errors.
    let se = means
        .iter()
        .zip(&zs)
        .map(|(m, z)| (z / den * (m - q.mu()[0])).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(
        (c.mean() - q.mu()[0]).abs() < 3.0 * se.max(1e-3),
        "{} vs {} (se {se})",
        c.mean(),
        q.mu()[0]
    );
}
