//! From config to simulator, prior and observed chunks.

use std::path::Path;

use epabc::baselines::DatasetSummary;
use epabc::composite::{composite_target, make_blocks};
use epabc::gauss::cholesky;
use epabc::models::lv::{LotkaVolterra, LvParams};
use epabc::models::race::{RaceModel, RaceParametrization};
use epabc::models::stable::{StableIid, StableParams};
use epabc::models::sv::{StableSv, SvParams};
use epabc::models::toy::{GaussianIid, MultimodalToy};
use epabc::models::{simulate_dataset, Simulator};
use epabc::rng::{child_seed, stream};
use epabc::{EpConfig, MomentGaussian, NaturalGaussian, SamplingConfig, Scheme};
use nalgebra::{DMatrix, DVector};

use crate::config::{DataSpec, ExperimentConfig, ModelSpec, SchemeSpec};
use crate::error::{CliError, CliResult};

/// Column names of the dataset CSV for a model.
pub fn data_header(model: &ModelSpec) -> &'static [&'static str] {
    match model {
        ModelSpec::LotkaVolterra { .. } => &["prey", "predator"],
        ModelSpec::RaceFull { .. } | ModelSpec::RaceDifficult { .. } => {
            &["condition", "choice", "rt_ms"]
        }
        _ => &["y"],
    }
}

pub fn model_dim(model: &ModelSpec) -> usize {
    match model {
        ModelSpec::GaussianIid { .. } | ModelSpec::Multimodal { .. } => 1,
        ModelSpec::AlphaStable { .. } | ModelSpec::StableSv { .. } => 4,
        ModelSpec::LotkaVolterra { .. } | ModelSpec::RaceDifficult { .. } => 3,
        ModelSpec::RaceFull { n_conditions, .. } => 2 * n_conditions + 3,
    }
}

/// The true theta, when the model carries one.
pub fn truth_theta(model: &ModelSpec) -> CliResult<Option<Vec<f64>>> {
    let t = match model {
        ModelSpec::GaussianIid { truth, .. } | ModelSpec::Multimodal { truth } => {
            truth.map(|t| vec![t])
        }
        ModelSpec::AlphaStable { truth } => truth
            .map(|p| {
                StableParams {
                    alpha: p.alpha,
                    beta: p.beta,
                    gamma: p.gamma,
                    delta: p.delta,
                }
                .to_theta()
                .map(|t| t.to_vec())
            })
            .transpose()?,
        ModelSpec::LotkaVolterra { truth, .. } => truth
            .map(|p| {
                LvParams {
                    r1: p.r1,
                    r2: p.r2,
                    r3: p.r3,
                }
                .to_theta()
                .map(|t| t.to_vec())
            })
            .transpose()?,
        ModelSpec::RaceFull {
            n_conditions,
            truth,
            ..
        } => match truth {
            Some(p) if p.drifts.len() != *n_conditions => {
                return Err(CliError::Config(format!(
                    "truth has {} drift pairs for {} conditions",
                    p.drifts.len(),
                    n_conditions
                )))
            }
            Some(p) => Some(p.to_theta()?),
            None => None,
        },
        ModelSpec::RaceDifficult { truth, .. } => match truth {
            Some(p) if !(p.m1 > 0.0 && p.m2 > 0.0 && p.c1 > 0.0) => {
                return Err(CliError::Config(
                    "difficult race truth needs positive m1, m2 and c1".to_string(),
                ))
            }
            Some(p) => Some(vec![p.m1.ln(), p.m2.ln(), p.c1.ln()]),
            None => None,
        },
        ModelSpec::StableSv { truth } => truth
            .map(|p| {
                SvParams {
                    mu: p.mu,
                    rho: p.rho,
                    sigma: p.sigma,
                    alpha: p.alpha,
                }
                .to_theta()
                .map(|t| t.to_vec())
            })
            .transpose()?,
    };
    Ok(t)
}

/// Native parameters at `theta`, as JSON, for readable summaries.
pub fn native_json(model: &ModelSpec, theta: &[f64]) -> serde_json::Value {
    use serde_json::json;
    match model {
        ModelSpec::GaussianIid { .. } | ModelSpec::Multimodal { .. } => json!({"theta": theta[0]}),
        ModelSpec::AlphaStable { .. } => {
            let p = StableParams::from_theta(theta);
            json!({"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma, "delta": p.delta})
        }
        ModelSpec::LotkaVolterra { .. } => {
            let p = LvParams::from_theta(theta);
            json!({"r1": p.r1, "r2": p.r2, "r3": p.r3})
        }
        ModelSpec::RaceFull { .. } => {
            serde_json::to_value(epabc::models::race::RaceParams::from_theta(theta))
                .unwrap_or_default()
        }
        ModelSpec::RaceDifficult { .. } => {
            json!({"m1": theta[0].exp(), "m2": theta[1].exp(), "c1": theta[2].exp()})
        }
        ModelSpec::StableSv { .. } => {
            let p = SvParams::from_theta(theta);
            json!({"mu": p.mu, "rho": p.rho, "sigma": p.sigma, "alpha": p.alpha})
        }
    }
}

pub fn prior_of(cfg: &ExperimentConfig) -> CliResult<NaturalGaussian> {
    let d = cfg.prior.mean.len();
    let cov = match (&cfg.prior.var, &cfg.prior.cov) {
        (Some(v), _) => DMatrix::from_diagonal(&DVector::from_column_slice(v)),
        (None, Some(c)) => DMatrix::from_fn(d, d, |a, b| c[a][b]),
        (None, None) => return Err(CliError::Config("prior covariance missing".to_string())),
    };
    if cov.iter().any(|v| !v.is_finite()) || (&cov - cov.transpose()).amax() > 1e-12 {
        return Err(CliError::Config(
            "prior.cov must be finite and symmetric".to_string(),
        ));
    }
    cholesky(&cov)
        .map_err(|_| CliError::Config("prior covariance is not positive definite".to_string()))?;
    let m = MomentGaussian::new(DVector::from_column_slice(&cfg.prior.mean), cov)?;
    Ok(m.to_natural()?)
}

pub fn sampling_of(cfg: &ExperimentConfig) -> CliResult<(SamplingConfig, Scheme)> {
    let s = &cfg.sampling;
    let sc = SamplingConfig {
        m_batch: s.m_batch,
        m_min: s.m_min,
        m_cap: s.m_cap,
        ess_min: s.ess_min,
        epsilon: cfg.kernel.epsilon,
        norm: cfg.kernel.norm,
        use_qmc: s.use_qmc,
        qmc_table_len: s.qmc_table_len,
    };
    sc.validate()?;
    let scheme = match s.scheme {
        SchemeSpec::Basic => Scheme::Basic,
        SchemeSpec::Recycled => Scheme::Recycled,
    };
    Ok((sc, scheme))
}

pub fn ep_of(cfg: &ExperimentConfig) -> CliResult<EpConfig> {
    let e = EpConfig {
        passes: cfg.ep.passes,
        alpha: cfg.ep.alpha,
        min_pass_for_full_update: cfg.ep.min_pass_for_full_update,
        on_failure: cfg.ep.on_failure,
        collect_hybrids: cfg.corrections.pwo,
    };
    e.validate()?;
    Ok(e)
}

/// Every check that needs no data and no simulation.
pub fn validate_all(cfg: &ExperimentConfig) -> CliResult<()> {
    cfg.validate()?;
    let d = model_dim(&cfg.model);
    let mismatch = |what: &str, got: usize| {
        Err(CliError::Config(format!(
            "{what} has length {got}, the {} model has dimension {d}",
            cfg.model.id()
        )))
    };
    if cfg.prior.mean.len() != d {
        return mismatch("prior.mean", cfg.prior.mean.len());
    }
    prior_of(cfg)?;
    sampling_of(cfg)?;
    ep_of(cfg)?;
    let truth = truth_theta(&cfg.model)?;
    match &cfg.model {
        ModelSpec::GaussianIid { sigma, .. } if !(*sigma > 0.0) => {
            return Err(CliError::Config("sigma must be > 0".to_string()))
        }
        ModelSpec::RaceFull {
            n_conditions,
            constants,
            ..
        } => {
            if *n_conditions == 0 {
                return Err(CliError::Config("n_conditions must be >= 1".to_string()));
            }
            constants.validate()?;
        }
        ModelSpec::RaceDifficult { c2, constants, .. } => {
            if !(*c2 > 0.0) {
                return Err(CliError::Config("c2 must be > 0".to_string()));
            }
            constants.validate()?;
        }
        _ => {}
    }
    if matches!(cfg.sampling.scheme, SchemeSpec::Recycled)
        && matches!(cfg.model, ModelSpec::LotkaVolterra { .. })
    {
        return Err(CliError::Config(
            "recycling needs exchangeable sites; lotka_volterra is Markov".to_string(),
        ));
    }
    if let DataSpec::Synthetic { n, .. } = cfg.data {
        if truth.is_none() {
            return Err(CliError::Config(
                "synthetic data needs model.params.truth".to_string(),
            ));
        }
        if let Some(c) = cfg.composite {
            make_blocks(n, c.l)?;
        }
    }
    if let Some(coords) = &cfg.corrections.coords {
        if let Some(&k) = coords.iter().find(|&&k| k >= d) {
            return Err(CliError::Config(format!(
                "correction coordinate {k} >= {d}"
            )));
        }
    }
    if let Some(b) = &cfg.baseline {
        if matches!(cfg.model, ModelSpec::StableSv { .. }) {
            return Err(CliError::Config(
                "MCMC-ABC needs a joint simulator; composite targets have none".to_string(),
            ));
        }
        if matches!(b.summary, DatasetSummary::RtQuantiles { .. }) && !cfg.model.is_race() {
            return Err(CliError::Config(
                "rt_quantiles summary applies to race models only".to_string(),
            ));
        }
        if let Some(v) = &b.init {
            if v.len() != d {
                return mismatch("baseline.init", v.len());
            }
        }
        if let Some(v) = &b.proposal_scales {
            if v.len() != d {
                return mismatch("baseline.proposal_scales", v.len());
            }
            if v.iter().any(|s| !(*s > 0.0)) {
                return Err(CliError::Config("proposal scales must be > 0".to_string()));
            }
        }
    }
    Ok(())
}

/// Seed of the synthetic dataset.
pub fn data_seed(cfg: &ExperimentConfig) -> u64 {
    match cfg.data {
        DataSpec::Synthetic { seed: Some(s), .. } => s,
        _ => child_seed(cfg.seed, &[1]),
    }
}

/// Simulate the dataset rows (CSV layout) at the model's truth.
pub fn generate_rows(cfg: &ExperimentConfig, n: usize, seed: u64) -> CliResult<Vec<Vec<f64>>> {
    let theta = truth_theta(&cfg.model)?
        .ok_or_else(|| CliError::Config("synthetic data needs model.params.truth".to_string()))?;
    let mut rng = stream(seed, &[]);
    let rows = match &cfg.model {
        ModelSpec::StableSv { .. } => {
            let (_, y) = epabc::composite::sample_latent_block(&StableSv, n, &theta, &mut rng)?;
            y.into_iter().map(|v| vec![v]).collect()
        }
        ModelSpec::RaceFull { n_conditions, .. } => {
            let conds = (0..n).map(|t| t % n_conditions).collect();
            let sim = race_model(&cfg.model, conds).expect("race model");
            simulate_dataset(&sim, n, &theta, &mut rng)
        }
        ModelSpec::RaceDifficult { .. } => {
            let sim = race_model(&cfg.model, vec![0; n]).expect("race model");
            simulate_dataset(&sim, n, &theta, &mut rng)
        }
        other => {
            let sim = plain_simulator(other).expect("plain model");
            simulate_dataset(sim.as_ref(), n, &theta, &mut rng)
        }
    };
    Ok(rows)
}

fn race_model(model: &ModelSpec, conditions: Vec<usize>) -> Option<RaceModel> {
    match model {
        ModelSpec::RaceFull {
            n_conditions,
            constants,
            window,
            ..
        } => Some(RaceModel {
            param: RaceParametrization::Full {
                n_conditions: *n_conditions,
            },
            conditions,
            consts: *constants,
            window: *window,
        }),
        ModelSpec::RaceDifficult {
            c2,
            s,
            constants,
            window,
            ..
        } => Some(RaceModel {
            param: RaceParametrization::Difficult { c2: *c2, s: *s },
            conditions,
            consts: *constants,
            window: *window,
        }),
        _ => None,
    }
}

/// Models whose simulator needs nothing from the data.
fn plain_simulator(model: &ModelSpec) -> Option<Box<dyn Simulator>> {
    Some(match model {
        ModelSpec::GaussianIid { sigma, .. } => Box::new(GaussianIid::new(*sigma)),
        ModelSpec::Multimodal { .. } => Box::new(MultimodalToy),
        ModelSpec::AlphaStable { .. } => Box::new(StableIid),
        ModelSpec::LotkaVolterra { y0, max_events, .. } => {
            let mut lv = LotkaVolterra::new((y0[0], y0[1]));
            if let Some(m) = max_events {
                lv.max_events = *m;
            }
            Box::new(lv)
        }
        _ => return None,
    })
}

/// A model ready for inference.
pub struct Problem {
    pub sim: Box<dyn Simulator>,
    /// Dataset rows in CSV layout.
    pub rows: Vec<Vec<f64>>,
    /// What the sites compare against: the rows, or blocks of the series
    /// for composite targets.
    pub chunks: Vec<Vec<f64>>,
}

fn check_rows(model: &ModelSpec, rows: &[Vec<f64>]) -> Result<(), String> {
    if rows.is_empty() {
        return Err("no observations".to_string());
    }
    for (t, row) in rows.iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(format!("row {t}: non-finite value"));
        }
        match model {
            ModelSpec::LotkaVolterra { .. } => {
                if row.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
                    return Err(format!("row {t}: counts must be non-negative integers"));
                }
            }
            ModelSpec::RaceFull { n_conditions, .. } => {
                check_trial(row, *n_conditions).map_err(|e| format!("row {t}: {e}"))?
            }
            ModelSpec::RaceDifficult { .. } => {
                check_trial(row, 1).map_err(|e| format!("row {t}: {e}"))?
            }
            _ => {}
        }
    }
    Ok(())
}

fn check_trial(row: &[f64], k: usize) -> Result<(), String> {
    let c = row[0];
    if c < 0.0 || c.fract() != 0.0 || c as usize >= k {
        return Err(format!("condition {c} not in 0..{k}"));
    }
    if row[1] != 1.0 && row[1] != 2.0 {
        return Err(format!("choice {} is not 1 or 2", row[1]));
    }
    if !(row[2] > 0.0) {
        return Err("reaction time must be > 0".to_string());
    }
    Ok(())
}

/// Pair the simulator with `rows`. `source` names the data for errors.
pub fn build_problem(
    cfg: &ExperimentConfig,
    rows: Vec<Vec<f64>>,
    source: &Path,
) -> CliResult<Problem> {
    check_rows(&cfg.model, &rows).map_err(|msg| CliError::Data {
        path: source.to_path_buf(),
        msg,
    })?;
    let (sim, chunks): (Box<dyn Simulator>, Vec<Vec<f64>>) = match &cfg.model {
        ModelSpec::StableSv { .. } => {
            let l = cfg.composite.map(|c| c.l).unwrap_or(0);
            let series: Vec<f64> = rows.iter().map(|r| r[0]).collect();
            let scheme = make_blocks(series.len(), l)?;
            let chunks = scheme.split(&series)?;
            (Box::new(composite_target(StableSv, scheme)), chunks)
        }
        m if m.is_race() => {
            let conds = RaceModel::conditions_of(&rows);
            (
                Box::new(race_model(m, conds).expect("race model")),
                rows.clone(),
            )
        }
        m => (plain_simulator(m).expect("plain model"), rows.clone()),
    };
    Ok(Problem { sim, rows, chunks })
}

pub fn read_rows(model: &ModelSpec, path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let header = data_header(model);
    let data_err = |msg: String| CliError::Data {
        path: path.to_path_buf(),
        msg,
    };
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| data_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if got != header {
        return Err(data_err(format!(
            "expected header {header:?}, found {got:?}"
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|e| data_err(format!("{f:?}: {e}")))
            })
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_rows<W: std::io::Write>(
    model: &ModelSpec,
    rows: &[Vec<f64>],
    w: W,
) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(data_header(model))?;
    for row in rows {
        wtr.write_record(row.iter().map(|v| format_value(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same float.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}
