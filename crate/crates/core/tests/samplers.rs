//! Distributional checks of the simulators against closed-form laws.

use epabc::composite::{sample_block, sample_latent_block};
use epabc::make_blocks;
use epabc::models::lv::{lv_simulate_interval, LvParams};
use epabc::models::race::{race_trial, RaceConstants, RaceTrialParams};
use epabc::models::stable::{stable_sample, StableParams};
use epabc::models::sv::{StableSv, SvParams};
use epabc::rng::stream;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{Cauchy, ContinuousCDF, Normal};

/// Two-sided Kolmogorov-Smirnov p-value (asymptotic, Stephens' correction).
fn ks_p_value(mut x: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let f = cdf(v);
            (f - k as f64 / n).max((k + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let p: f64 = (1..=200)
        .map(|k| {
            let k = k as f64;
            2.0 * (if k as u64 % 2 == 1 { 1.0 } else { -1.0 })
                * (-2.0 * k * k * lambda * lambda).exp()
        })
        .sum();
    p.clamp(0.0, 1.0)
}

fn stable_draws(p: &StableParams, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, &[]);
    (0..n).map(|_| stable_sample(p, &mut rng)).collect()
}

#[test]
fn stable_alpha_two_is_gaussian() {
    let (gamma, delta) = (1.3, -0.4);
    for beta in [0.0, 0.7] {
        let p = StableParams {
            alpha: 2.0,
            beta,
            gamma,
            delta,
        };
        let normal = Normal::new(delta, 2f64.sqrt() * gamma).unwrap();
        let pv = ks_p_value(stable_draws(&p, 100_000, 11), |x| normal.cdf(x));
        assert!(pv > 0.01, "beta {beta}: p = {pv}");
    }
}

#[test]
fn stable_alpha_one_symmetric_is_cauchy() {
    let p = StableParams {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.8,
        delta: 1.5,
    };
    let cauchy = Cauchy::new(1.5, 0.8).unwrap();
    let pv = ks_p_value(stable_draws(&p, 100_000, 12), |x| cauchy.cdf(x));
    assert!(pv > 0.01, "p = {pv}");
}

#[test]
fn stable_characteristic_function() {
    let p = StableParams {
        alpha: 1.5,
        beta: 0.5,
        gamma: 1.0,
        delta: 0.0,
    };
    let x = stable_draws(&p, 100_000, 13);
    let n = x.len() as f64;
    for t in [0.5, 1.0, 2.0] {
        let (want_re, want_im) = p.characteristic_function(t);
        let c: Vec<f64> = x.iter().map(|v| (t * v).cos()).collect();
        let s: Vec<f64> = x.iter().map(|v| (t * v).sin()).collect();
        for (vals, want) in [(c, want_re), (s, want_im)] {
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - want).abs() < 3.0 * se,
                "t = {t}: {mean} vs {want} (se {se})"
            );
        }
    }
}

#[test]
fn stable_skewed_alpha_one_matches_characteristic_function() {
    let p = StableParams {
        alpha: 1.0,
        beta: 0.6,
        gamma: 0.7,
        delta: 0.2,
    };
    let x = stable_draws(&p, 100_000, 14);
    let n = x.len() as f64;
    for t in [0.5, 1.0, 2.0] {
        let (want_re, want_im) = p.characteristic_function(t);
        let re = x.iter().map(|v| (t * v).cos()).sum::<f64>() / n;
        let im = x.iter().map(|v| (t * v).sin()).sum::<f64>() / n;
        // Each of cos, sin is bounded by 1, so se <= 1 / sqrt(n).
        assert!(
            (re - want_re).abs() < 4.0 / n.sqrt(),
            "t = {t}: re {re} vs {want_re}"
        );
        assert!(
            (im - want_im).abs() < 4.0 / n.sqrt(),
            "t = {t}: im {im} vs {want_im}"
        );
    }
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn yule_process_mean() {
    let p = LvParams {
        r1: 0.4,
        r2: 0.0,
        r3: 0.0,
    };
    let mut rng = stream(21, &[]);
    let y: Vec<f64> = (0..100_000)
        .map(|_| lv_simulate_interval((20, 7), &p, 1.0, &mut rng).0 as f64)
        .collect();
    let (m, se) = mean_and_se(&y);
    let want = 20.0 * 0.4f64.exp();
    assert!((want - 29.836).abs() < 1e-3);
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
}

#[test]
fn pure_death_mean() {
    let p = LvParams {
        r1: 0.0,
        r2: 0.0,
        r3: 0.3,
    };
    let mut rng = stream(22, &[]);
    let y: Vec<f64> = (0..100_000)
        .map(|_| lv_simulate_interval((5, 30), &p, 1.0, &mut rng).1 as f64)
        .collect();
    let (m, se) = mean_and_se(&y);
    let want = 30.0 * (-0.3f64).exp();
    assert!((want - 22.225).abs() < 1e-3);
    assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
}

#[test]
fn lotka_volterra_fuzz_stays_nonnegative() {
    // Counts are unsigned, so an impossible reaction would underflow and
    // panic; each reaction moves the total by at most one, which bounds
    // the number of events from below.
    let mut rng = stream(23, &[]);
    let mut events = 0u64;
    while events < 1_000_000 {
        let p = LvParams {
            r1: rng.random_range(0.0..2.0),
            r2: rng.random_range(0.0..0.05),
            r3: rng.random_range(0.0..2.0),
        };
        let mut s = (rng.random_range(0..60), rng.random_range(0..60));
        for _ in 0..20 {
            let next = lv_simulate_interval(s, &p, 0.5, &mut rng);
            events += next.0.abs_diff(s.0) + next.1.abs_diff(s.1);
            s = next;
            if s.0 > 5000 {
                break;
            }
        }
    }
}

fn sv_truth() -> SvParams {
    SvParams {
        mu: 0.35,
        rho: 0.97,
        sigma: 0.2,
        alpha: 1.5,
    }
}

#[test]
fn sv_stationary_variance() {
    let p = sv_truth();
    let theta = p.to_theta().unwrap();
    let want = 0.04 / (1.0 - 0.9409);
    assert!((p.stationary_var() - want).abs() < 1e-12);
    assert!((want - 0.6768).abs() < 1e-4);
    let mut rng = stream(31, &[]);
    let x: Vec<f64> = (0..100_000)
        .map(|_| {
            sample_latent_block(&StableSv, 1, &theta, &mut rng)
                .unwrap()
                .0[0]
        })
        .collect();
    let sq: Vec<f64> = x.iter().map(|v| (v - p.mu).powi(2)).collect();
    let (v, se) = mean_and_se(&sq);
    assert!((v - want).abs() < 3.0 * se, "{v} vs {want} (se {se})");
}

#[test]
fn sv_lag_one_autocorrelation() {
    let p = sv_truth();
    let theta = p.to_theta().unwrap();
    let mut rng = stream(32, &[]);
    let n = 100_000;
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let x = sample_latent_block(&StableSv, 2, &theta, &mut rng)
                .unwrap()
                .0;
            (x[0] - p.mu, x[1] - p.mu)
        })
        .collect();
    let sxy: f64 = pairs.iter().map(|(a, b)| a * b).sum();
    let sxx: f64 = pairs.iter().map(|(a, _)| a * a).sum();
    let syy: f64 = pairs.iter().map(|(_, b)| b * b).sum();
    let r = sxy / (sxx * syy).sqrt();
    let se = (1.0 - p.rho * p.rho) / (n as f64).sqrt();
    assert!((r - p.rho).abs() < 3.0 * se, "{r} vs {} (se {se})", p.rho);
}

#[test]
fn sv_zero_rho_gives_iid_latents() {
    let p = SvParams {
        mu: -0.5,
        rho: 0.0,
        sigma: 0.6,
        alpha: 1.7,
    };
    let theta = p.to_theta().unwrap();
    let mut rng = stream(33, &[]);
    let n = 100_000;
    let (mut x1, mut x2, mut prod) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x = sample_latent_block(&StableSv, 2, &theta, &mut rng)
            .unwrap()
            .0;
        x1.push((x[0] - p.mu).powi(2));
        x2.push((x[1] - p.mu).powi(2));
        prod.push((x[0] - p.mu) * (x[1] - p.mu));
    }
    for v in [&x1, &x2] {
        let (m, se) = mean_and_se(v);
        assert!((m - 0.36).abs() < 3.0 * se, "{m}");
    }
    let (c, se) = mean_and_se(&prod);
    assert!(c.abs() < 3.0 * se, "{c}");
}

#[test]
fn sv_blocks_are_exchangeable() {
    let theta = sv_truth().to_theta().unwrap();
    let scheme = make_blocks(120, 2).unwrap();
    let mut rng = stream(34, &[]);
    // Median of |y| within a block's first coordinate, two disjoint call sets.
    let mut halves = [Vec::new(), Vec::new()];
    for k in 0..40_000 {
        let b = sample_block(k % scheme.n_s(), &scheme, &StableSv, &theta, &mut rng).unwrap();
        halves[k % 2].push(f64::from(u8::from(b[0].abs() < 1.0)));
    }
    let (m0, se0) = mean_and_se(&halves[0]);
    let (m1, se1) = mean_and_se(&halves[1]);
    assert!((m0 - m1).abs() < 3.0 * (se0 * se0 + se1 * se1).sqrt());
}

#[test]
fn non_stationary_sv_rejected() {
    let mut theta = sv_truth().to_theta().unwrap();
    theta[1] = f64::INFINITY;
    let mut rng = stream(35, &[]);
    assert!(matches!(
        sample_latent_block(&StableSv, 2, &theta, &mut rng),
        Err(epabc::Error::NonStationary(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reaction_times_in_range(
        m1 in -0.3f64..0.3,
        m2 in -0.3f64..0.3,
        c1 in 0.5f64..40.0,
        c2 in 0.5f64..40.0,
        s in -6.0f64..3.0,
        lapse in 0.0f64..=1.0,
        seed in 0u64..1000,
    ) {
        let consts = RaceConstants { lapse_prob: lapse, ..RaceConstants::default() };
        let p = RaceTrialParams { drifts: [m1, m2], thresholds: [c1, c2], s };
        let mut rng = stream(seed, &[]);
        for _ in 0..50 {
            let (d, r) = race_trial(&p, &consts, &mut rng);
            prop_assert!(d == 1 || d == 2);
            prop_assert!((consts.a_ms..=consts.ceiling_ms + consts.b_ms).contains(&r), "{r}");
        }
    }

    #[test]
    fn lapse_times_in_range(seed in 0u64..1000) {
        let consts = RaceConstants { lapse_prob: 1.0, ..RaceConstants::default() };
        let p = RaceTrialParams { drifts: [0.05, 0.05], thresholds: [10.0, 10.0], s: 0.0 };
        let mut rng = stream(seed, &[]);
        for _ in 0..50 {
            let (_, r) = race_trial(&p, &consts, &mut rng);
            prop_assert!((consts.a_ms..=consts.lapse_max_ms + consts.b_ms).contains(&r));
        }
    }
}
