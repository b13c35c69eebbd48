//! Experiment configuration: one JSON document per run, unknown fields
//! rejected everywhere. Reaction times are in milliseconds.

use std::path::{Path, PathBuf};

use epabc::baselines::DatasetSummary;
use epabc::models::race::{RaceConstants, RaceParams, RtWindow};
use epabc::{FailurePolicy, Norm};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub prior: PriorSpec,
    pub kernel: KernelSpec,
    #[serde(default)]
    pub sampling: SamplingSpec,
    #[serde(default)]
    pub ep: EpSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub composite: Option<CompositeSpec>,
    #[serde(default)]
    pub corrections: CorrectionsSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictive: Option<PredictiveSpec>,
    #[serde(default)]
    pub seed: u64,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StableNative {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvNative {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvNative {
    pub mu: f64,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DifficultNative {
    pub m1: f64,
    pub m2: f64,
    pub c1: f64,
}

/// `truth` is the native parameter used for synthetic data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "id",
    content = "params",
    rename_all = "snake_case",
    deny_unknown_fields
)]
pub enum ModelSpec {
    GaussianIid {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<f64>,
    },
    Multimodal {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<f64>,
    },
    AlphaStable {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<StableNative>,
    },
    LotkaVolterra {
        y0: [u64; 2],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_events: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<LvNative>,
    },
    RaceFull {
        n_conditions: usize,
        #[serde(default)]
        constants: RaceConstants,
        #[serde(default)]
        window: RtWindow,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<RaceParams>,
    },
    RaceDifficult {
        c2: f64,
        s: f64,
        #[serde(default)]
        constants: RaceConstants,
        #[serde(default)]
        window: RtWindow,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<DifficultNative>,
    },
    StableSv {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        truth: Option<SvNative>,
    },
}

impl ModelSpec {
    pub fn id(&self) -> &'static str {
        match self {
            ModelSpec::GaussianIid { .. } => "gaussian_iid",
            ModelSpec::Multimodal { .. } => "multimodal",
            ModelSpec::AlphaStable { .. } => "alpha_stable",
            ModelSpec::LotkaVolterra { .. } => "lotka_volterra",
            ModelSpec::RaceFull { .. } => "race_full",
            ModelSpec::RaceDifficult { .. } => "race_difficult",
            ModelSpec::StableSv { .. } => "stable_sv",
        }
    }

    pub fn is_race(&self) -> bool {
        matches!(
            self,
            ModelSpec::RaceFull { .. } | ModelSpec::RaceDifficult { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Simulated at the model's `truth`. The seed defaults to one derived
    /// from the run seed.
    Synthetic {
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
    },
}

/// Gaussian prior on theta; exactly one of `var` (diagonal) and `cov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub epsilon: f64,
    #[serde(default)]
    pub norm: Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    #[default]
    Basic,
    Recycled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSpec {
    pub m_batch: usize,
    pub m_min: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_cap: Option<u64>,
    pub ess_min: f64,
    #[serde(default)]
    pub use_qmc: bool,
    pub qmc_table_len: usize,
    #[serde(default)]
    pub scheme: SchemeSpec,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        let d = epabc::SamplingConfig::new(1.0);
        Self {
            m_batch: d.m_batch,
            m_min: d.m_min,
            m_cap: d.m_cap,
            ess_min: d.ess_min,
            use_qmc: d.use_qmc,
            qmc_table_len: d.qmc_table_len,
            scheme: SchemeSpec::Basic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpSpec {
    pub passes: usize,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_pass_for_full_update: Option<usize>,
    #[serde(default)]
    pub on_failure: FailurePolicy,
}

impl Default for EpSpec {
    fn default() -> Self {
        let d = epabc::EpConfig::default();
        Self {
            passes: d.passes,
            alpha: d.alpha,
            min_pass_for_full_update: d.min_pass_for_full_update,
            on_failure: d.on_failure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositeSpec {
    pub l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CorrectionsSpec {
    #[serde(default)]
    pub pwo: bool,
    /// Coordinates to correct; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coords: Option<Vec<usize>>,
}

/// Random-walk MCMC-ABC run after EP. Proposal scales default to
/// `proposal_fraction` times the EP posterior sd; the chain starts at the
/// EP mean unless `init` is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub summary: DatasetSummary,
    pub epsilon: f64,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default = "default_fraction")]
    pub proposal_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal_scales: Option<Vec<f64>>,
    pub iterations: usize,
    #[serde(default = "default_thin")]
    pub thin: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

fn default_fraction() -> f64 {
    0.5
}

fn default_thin() -> usize {
    1
}

/// Posterior-predictive datasets, each the size of the observed one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveSpec {
    pub draws: usize,
}

/// A parsed config plus the directory its relative paths resolve against.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    // A run_meta.json carries the resolved config under "config".
    let value = match value {
        serde_json::Value::Object(mut map)
            if map.contains_key("config") && map.contains_key("versions") =>
        {
            map.remove("config").unwrap_or_default()
        }
        v => v,
    };
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> CliResult<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let config = parse_config(&text)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedConfig { config, base_dir })
}

fn bad<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

impl ExperimentConfig {
    /// Model-dimension-independent checks; the rest happen when the model
    /// is built.
    pub fn validate(&self) -> CliResult<()> {
        if !(self.kernel.epsilon > 0.0) {
            return bad("kernel.epsilon must be > 0");
        }
        let p = &self.prior;
        match (&p.var, &p.cov) {
            (Some(v), None) => {
                if v.len() != p.mean.len() {
                    return bad("prior.var and prior.mean differ in length");
                }
                if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                    return bad("prior.var entries must be positive and finite");
                }
            }
            (None, Some(c)) => {
                if c.len() != p.mean.len() || c.iter().any(|row| row.len() != p.mean.len()) {
                    return bad("prior.cov must be square and match prior.mean");
                }
            }
            _ => return bad("prior needs exactly one of var and cov"),
        }
        if p.mean.iter().any(|x| !x.is_finite()) {
            return bad("prior.mean must be finite");
        }
        match (&self.model, &self.composite) {
            (ModelSpec::StableSv { .. }, None) => {
                return bad("stable_sv needs a composite block length")
            }
            (ModelSpec::StableSv { .. }, Some(_)) => {}
            (_, Some(_)) => return bad("composite blocks apply only to stable_sv"),
            _ => {}
        }
        if self.predictive.is_some() && !self.model.is_race() {
            return bad("posterior-predictive draws are supported for race models only");
        }
        if let DataSpec::Synthetic { n, .. } = self.data {
            if n == 0 {
                return bad("data.n must be >= 1");
            }
        }
        if let Some(b) = &self.baseline {
            if b.iterations == 0 || b.thin == 0 {
                return bad("baseline.iterations and baseline.thin must be >= 1");
            }
            if !(b.epsilon > 0.0) || !(b.proposal_fraction > 0.0) {
                return bad("baseline.epsilon and baseline.proposal_fraction must be > 0");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "t",
        "model": {"id": "gaussian_iid", "params": {"sigma": 1.0, "truth": 1.0}},
        "data": {"source": "synthetic", "n": 5},
        "prior": {"mean": [0.0], "var": [100.0]},
        "kernel": {"epsilon": 0.1}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.model.id(), "gaussian_iid");
        assert_eq!(c.sampling, SamplingSpec::default());
        assert_eq!(c.ep, EpSpec::default());
        c.validate().unwrap();
    }

    #[test]
    fn serialized_config_round_trips() {
        let c = parse_config(MINIMAL).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn unknown_fields_are_rejected_at_every_level() {
        let top = MINIMAL.replace("\"name\"", "\"bogus\": 1, \"name\"");
        assert!(parse_config(&top).is_err());
        let nested = MINIMAL.replace("\"sigma\": 1.0", "\"sigma\": 1.0, \"tau\": 2");
        assert!(parse_config(&nested).is_err());
        let kernel = MINIMAL.replace("\"epsilon\": 0.1", "\"epsilon\": 0.1, \"x\": 0");
        assert!(parse_config(&kernel).is_err());
    }

    #[test]
    fn unknown_model_id_is_a_config_error() {
        let c = MINIMAL.replace("gaussian_iid", "no_such_model");
        let e = parse_config(&c).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn prior_needs_exactly_one_covariance_form() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.prior.cov = Some(vec![vec![1.0]]);
        assert!(c.validate().is_err());
        c.prior.var = None;
        c.validate().unwrap();
    }

    #[test]
    fn run_meta_wrapper_is_unwrapped() {
        let inner: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        let meta = serde_json::json!({"config": inner, "versions": {}, "seed": 0});
        let c = parse_config(&meta.to_string()).unwrap();
        assert_eq!(c.name, "t");
    }
}
