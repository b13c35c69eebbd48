//! Gaussian expectation propagation: cavities, damped moment-matching site
//! updates, evidence, and the failure policy.

use serde::{Deserialize, Serialize};

use crate::abc::{HybridSample, MomentEstimate};
use crate::error::{Error, Result};
use crate::gauss::{
    cholesky, combine, damped_site, min_eigenvalue, MomentGaussian, NaturalGaussian, Sign,
};

/// One oracle call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    /// 1-based pass index.
    pub pass: usize,
    pub site: usize,
    pub seed: u64,
    /// Ask the oracle to return its weighted draws.
    pub harvest: bool,
}

/// Hybrid-moment source for the site updates.
pub trait MomentOracle {
    fn hybrid_moments(&mut self, cavity: &MomentGaussian, visit: &Visit) -> Result<MomentEstimate>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    SkipSite,
    Abort,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpConfig {
    pub passes: usize,
    pub alpha: f64,
    /// Passes from this one (1-based) on use undamped updates. `None`
    /// damps every pass.
    pub min_pass_for_full_update: Option<usize>,
    pub on_failure: FailurePolicy,
    /// Keep final-pass hybrid draws for the first-order correction.
    pub collect_hybrids: bool,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            alpha: 1.0,
            min_pass_for_full_update: None,
            on_failure: FailurePolicy::SkipSite,
            collect_hybrids: false,
        }
    }
}

impl EpConfig {
    pub fn alpha_for_pass(&self, pass: usize) -> f64 {
        match self.min_pass_for_full_update {
            Some(p) if pass >= p => 1.0,
            _ => self.alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 {
            return Err(Error::InvalidConfig("passes must be >= 1".to_string()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub nat: NaturalGaussian,
    pub log_c: f64,
    /// Normalizer estimate of the site's last successful update.
    pub z_hat: Option<f64>,
}

impl Site {
    pub fn vacuous(d: usize) -> Self {
        Self {
            nat: NaturalGaussian::zeros(d),
            log_c: 0.0,
            z_hat: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub pass: usize,
    pub site: usize,
    /// Global mean after the visit.
    pub mean: Vec<f64>,
    /// Smallest eigenvalue of the global covariance after the visit.
    pub min_eig: f64,
    pub skipped: bool,
    pub draws: u64,
}

/// Why an update was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    CavityNotPd,
    HybridNotPd,
    GlobalNotPd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Updated,
    Skipped(SkipReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpState {
    pub prior: NaturalGaussian,
    pub sites: Vec<Site>,
    pub global: NaturalGaussian,
    pub trace: Vec<TraceRow>,
    pub skips: usize,
}

impl EpState {
    pub fn new(prior: NaturalGaussian, n: usize) -> Result<Self> {
        cholesky(prior.q())?;
        let d = prior.dim();
        Ok(Self {
            global: prior.clone(),
            prior,
            sites: vec![Site::vacuous(d); n],
            trace: Vec::new(),
            skips: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior.dim()
    }

    /// Global minus site `i`.
    pub fn cavity(&self, i: usize) -> Result<NaturalGaussian> {
        combine(&self.global, &self.sites[i].nat, Sign::Minus)
    }

    /// Prior plus every site, summed in site order.
    pub fn resum(&self) -> Result<NaturalGaussian> {
        self.sites.iter().try_fold(self.prior.clone(), |acc, s| {
            combine(&acc, &s.nat, Sign::Plus)
        })
    }

    /// Largest absolute entry of `global - resum()`.
    pub fn audit(&self) -> Result<f64> {
        let diff = combine(&self.global, &self.resum()?, Sign::Minus)?;
        Ok(diff
            .r()
            .iter()
            .chain(diff.q().iter())
            .fold(0.0f64, |m, v| m.max(v.abs())))
    }

    fn record(&mut self, pass: usize, site: usize, skipped: bool, draws: u64) {
        let (mean, min_eig) = match self.global.to_moments() {
            Ok(m) => (m.mu().iter().copied().collect(), min_eigenvalue(m.sigma())),
            Err(_) => (vec![f64::NAN; self.dim()], f64::NAN),
        };
        self.trace.push(TraceRow {
            pass,
            site,
            mean,
            min_eig,
            skipped,
            draws,
        });
    }

    fn refuse(
        &mut self,
        pass: usize,
        i: usize,
        reason: SkipReason,
        draws: u64,
        policy: FailurePolicy,
    ) -> Result<UpdateOutcome> {
        match policy {
            FailurePolicy::Abort => Err(Error::AbortedOnFailure { site: i }),
            FailurePolicy::SkipSite => {
                self.skips += 1;
                self.record(pass, i, true, draws);
                Ok(UpdateOutcome::Skipped(reason))
            }
        }
    }

    /// Moment-matched damped update of site `i`, recomputing its `log C_i`
    /// and appending a trace row.
    pub fn update_site(
        &mut self,
        pass: usize,
        i: usize,
        moments: &MomentEstimate,
        alpha: f64,
        policy: FailurePolicy,
    ) -> Result<UpdateOutcome> {
        if !(moments.z_hat > 0.0 && moments.z_hat.is_finite()) {
            return Err(Error::ZeroAcceptance {
                site: i,
                draws: moments.m_total,
            });
        }
        let cavity = self.cavity(i)?;
        let Ok(psi_cavity) = cavity.log_partition() else {
            return self.refuse(pass, i, SkipReason::CavityNotPd, moments.m_total, policy);
        };
        let hybrid = match moments.moments().and_then(|m| m.to_natural()) {
            Ok(h) if h.is_finite() => h,
            _ => return self.refuse(pass, i, SkipReason::HybridNotPd, moments.m_total, policy),
        };
        let full_new = combine(&hybrid, &cavity, Sign::Minus)?;
        let site = damped_site(&self.sites[i].nat, &full_new, alpha)?;
        let global = combine(&cavity, &site, Sign::Plus)?;
        let psi_global = match global.log_partition() {
            Ok(v) if v.is_finite() => v,
            _ => return self.refuse(pass, i, SkipReason::GlobalNotPd, moments.m_total, policy),
        };
        self.sites[i] = Site {
            nat: site,
            log_c: moments.z_hat.ln() - psi_global + psi_cavity,
            z_hat: Some(moments.z_hat),
        };
        self.global = global;
        self.record(pass, i, false, moments.m_total);
        Ok(UpdateOutcome::Updated)
    }

    /// `sum log C_i + Psi(global) - Psi(prior) - log_volume_correction`.
    pub fn log_evidence(&self, log_volume_correction: f64) -> Result<f64> {
        let sum_c: f64 = self.sites.iter().map(|s| s.log_c).sum();
        Ok(sum_c + self.global.log_partition()?
            - self.prior.log_partition()?
            - log_volume_correction)
    }
}

/// Final-pass hybrid of one site, for the first-order correction.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridRecord {
    pub site: usize,
    /// `log Z_i`, the hybrid normalizer relative to the prior.
    pub log_z: f64,
    pub samples: HybridSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpRun {
    pub state: EpState,
    pub hybrids: Vec<HybridRecord>,
    pub draws: u64,
}

/// `passes` sweeps over the sites in order `0..n`.
pub fn run_ep(
    prior: &NaturalGaussian,
    n_sites: usize,
    oracle: &mut dyn MomentOracle,
    config: &EpConfig,
    seed: u64,
) -> Result<EpRun> {
    config.validate()?;
    let mut state = EpState::new(prior.clone(), n_sites)?;
    let psi_prior = prior.log_partition()?;
    let mut hybrids = Vec::new();
    let mut draws = 0u64;
    for pass in 1..=config.passes {
        let alpha = config.alpha_for_pass(pass);
        let harvest = config.collect_hybrids && pass == config.passes;
        let mut skipped = 0;
        for i in 0..n_sites {
            let cavity = state.cavity(i)?;
            let cavity_m = match cavity.to_moments() {
                Ok(m) => m,
                Err(_) => {
                    state.refuse(pass, i, SkipReason::CavityNotPd, 0, config.on_failure)?;
                    skipped += 1;
                    continue;
                }
            };
            let visit = Visit {
                pass,
                site: i,
                seed,
                harvest,
            };
            let est = oracle.hybrid_moments(&cavity_m, &visit)?;
            draws += est.m_total;
            let log_z = if harvest {
                let others: f64 = state
                    .sites
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, s)| s.log_c)
                    .sum();
                Some(est.z_hat.ln() + others + cavity.log_partition()? - psi_prior)
            } else {
                None
            };
            match state.update_site(pass, i, &est, alpha, config.on_failure)? {
                UpdateOutcome::Updated => {}
                UpdateOutcome::Skipped(_) => skipped += 1,
            }
            if let (Some(log_z), Some(samples)) = (log_z, est.samples) {
                hybrids.push(HybridRecord {
                    site: i,
                    log_z,
                    samples,
                });
            }
        }
        state.global = state.resum()?;
        if n_sites > 0 && skipped == n_sites {
            return Err(Error::TooManySkips { pass });
        }
    }
    Ok(EpRun {
        state,
        hybrids,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::ConjugateGaussianOracle;
    use nalgebra::{DMatrix, DVector};

    fn nat1(r: f64, q: f64) -> NaturalGaussian {
        NaturalGaussian::new(DVector::from_element(1, r), DMatrix::from_element(1, 1, q)).unwrap()
    }

    fn estimate(mu: f64, var: f64) -> MomentEstimate {
        MomentEstimate {
            z_hat: 0.5,
            mu_hat: DVector::from_element(1, mu),
            sigma_hat: DMatrix::from_element(1, 1, var),
            m_total: 10,
            m_acc: 5,
            ess: 5.0,
            samples: None,
        }
    }

    #[test]
    fn vacuous_update_keeps_global() {
        let mut st = EpState::new(nat1(0.0, 1.0), 1).unwrap();
        st.update_site(1, 0, &estimate(0.0, 1.0), 1.0, FailurePolicy::SkipSite)
            .unwrap();
        assert!(st.sites[0].nat.q()[(0, 0)].abs() < 1e-15);
        assert!(st.sites[0].nat.r()[0].abs() < 1e-15);
        assert!((st.global.q()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn conjugate_site_update() {
        let mut st = EpState::new(nat1(0.0, 1.0), 1).unwrap();
        st.update_site(1, 0, &estimate(0.0, 0.5), 1.0, FailurePolicy::SkipSite)
            .unwrap();
        assert!((st.sites[0].nat.q()[(0, 0)] - 1.0).abs() < 1e-14);
        assert!(st.sites[0].nat.r()[0].abs() < 1e-14);

        let mut st = EpState::new(nat1(0.0, 1.0), 1).unwrap();
        st.update_site(1, 0, &estimate(1.0, 0.5), 1.0, FailurePolicy::SkipSite)
            .unwrap();
        assert!((st.sites[0].nat.q()[(0, 0)] - 1.0).abs() < 1e-14);
        assert!((st.sites[0].nat.r()[0] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn skip_leaves_global_bit_identical() {
        let mut st = EpState::new(nat1(0.0, 1.0), 2).unwrap();
        let before = st.global.clone();
        let mut bad = estimate(0.0, -1.0);
        let out = st
            .update_site(1, 0, &bad, 1.0, FailurePolicy::SkipSite)
            .unwrap();
        assert_eq!(out, UpdateOutcome::Skipped(SkipReason::HybridNotPd));
        assert_eq!(st.global, before);
        assert_eq!(st.skips, 1);
        assert_eq!(st.trace.len(), 1);
        // Damped global is alpha * Q_h + (1 - alpha) * old global, so it can
        // only fail from a non-PD global whose cavity is still PD.
        bad.sigma_hat[(0, 0)] = 1e7;
        let mut st2 = EpState::new(nat1(0.0, 1.0), 2).unwrap();
        st2.sites[0].nat = nat1(0.0, -1.5);
        st2.sites[1].nat = nat1(0.0, -0.5);
        st2.global = st2.resum().unwrap();
        let before = st2.global.clone();
        let out = st2
            .update_site(1, 0, &bad, 0.5, FailurePolicy::SkipSite)
            .unwrap();
        assert_eq!(out, UpdateOutcome::Skipped(SkipReason::GlobalNotPd));
        assert_eq!(st2.global, before);
        let err = st2
            .update_site(1, 0, &bad, 0.5, FailurePolicy::Abort)
            .unwrap_err();
        assert_eq!(err, Error::AbortedOnFailure { site: 0 });
    }

    #[test]
    fn zero_normalizer_is_an_error() {
        let mut st = EpState::new(nat1(0.0, 1.0), 1).unwrap();
        let mut e = estimate(0.0, 0.5);
        e.z_hat = 0.0;
        assert!(matches!(
            st.update_site(1, 0, &e, 1.0, FailurePolicy::SkipSite),
            Err(Error::ZeroAcceptance { .. })
        ));
    }

    #[test]
    fn vacuous_evidence_is_zero() {
        let st = EpState::new(nat1(0.3, 2.0), 5).unwrap();
        assert_eq!(st.log_evidence(0.0).unwrap(), 0.0);
    }

    struct CavityEcho;

    impl MomentOracle for CavityEcho {
        fn hybrid_moments(&mut self, cavity: &MomentGaussian, _: &Visit) -> Result<MomentEstimate> {
            Ok(MomentEstimate {
                z_hat: 1.0,
                mu_hat: cavity.mu().clone(),
                sigma_hat: cavity.sigma().clone(),
                m_total: 0,
                m_acc: 0,
                ess: 0.0,
                samples: None,
            })
        }
    }

    #[test]
    fn exact_cavity_oracle_is_a_fixed_point() {
        let prior = NaturalGaussian::new(
            DVector::from_vec(vec![0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let cfg = EpConfig {
            passes: 3,
            ..EpConfig::default()
        };
        let run = run_ep(&prior, 4, &mut CavityEcho, &cfg, 0).unwrap();
        assert_eq!(run.state.trace.len(), 12);
        for s in &run.state.sites {
            assert!(s.log_c.abs() < 1e-12);
            assert!(s.nat.q().iter().all(|v| v.abs() < 1e-12));
        }
        assert!(run.state.log_evidence(0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn conjugate_model_one_pass_exact() {
        let y: Vec<f64> = (0..50)
            .map(|k| 1.0 + ((k * 37 % 17) as f64 - 8.0) / 8.0)
            .collect();
        let prior = nat1(0.0, 1e-2);
        let mut oracle = ConjugateGaussianOracle::iid(&y, 1.0);
        let cfg = EpConfig {
            passes: 3,
            ..EpConfig::default()
        };
        let run = run_ep(&prior, y.len(), &mut oracle, &cfg, 0).unwrap();
        let post = run.state.global.to_moments().unwrap();
        let sum: f64 = y.iter().sum();
        let n = y.len() as f64;
        assert!((post.mu()[0] - sum / (n + 1e-2)).abs() < 1e-10);
        assert!((post.sigma()[(0, 0)] - 1.0 / (n + 1e-2)).abs() < 1e-12);
        let after_pass1 = &run.state.trace[y.len() - 1].mean;
        assert!((after_pass1[0] - sum / (n + 1e-2)).abs() < 1e-10);
        assert!(run.state.audit().unwrap() < 1e-10);
    }

    #[test]
    fn single_site_evidence() {
        // y ~ N(theta, 1), theta ~ N(0, 1), y* = 0: p(y*) = N(0; 0, 2).
        let prior = nat1(0.0, 1.0);
        let mut oracle = ConjugateGaussianOracle::iid(&[0.0], 1.0);
        let run = run_ep(&prior, 1, &mut oracle, &EpConfig::default(), 0).unwrap();
        let want = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert!((want + 1.265_512_123_484_645).abs() < 1e-12);
        assert!((run.state.log_evidence(0.0).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn damping_schedule() {
        let cfg = EpConfig {
            alpha: 0.2,
            min_pass_for_full_update: Some(3),
            ..EpConfig::default()
        };
        assert_eq!(cfg.alpha_for_pass(1), 0.2);
        assert_eq!(cfg.alpha_for_pass(2), 0.2);
        assert_eq!(cfg.alpha_for_pass(3), 1.0);
        assert_eq!(EpConfig::default().alpha_for_pass(9), 1.0);
    }

    #[test]
    fn all_skipped_pass_fails() {
        struct Bad;
        impl MomentOracle for Bad {
            fn hybrid_moments(&mut self, _: &MomentGaussian, _: &Visit) -> Result<MomentEstimate> {
                Ok(estimate(0.0, -1.0))
            }
        }
        let err = run_ep(&nat1(0.0, 1.0), 3, &mut Bad, &EpConfig::default(), 0).unwrap_err();
        assert_eq!(err, Error::TooManySkips { pass: 1 });
    }
}
