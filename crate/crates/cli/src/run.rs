//! The `run` pipeline: validate, load or simulate data, run EP-ABC, then
//! the optional correction, MCMC baseline and predictive draws.

use std::path::{Path, PathBuf};
use std::time::Instant;

use epabc::baselines::{mcmc_abc, McmcAbcConfig};
use epabc::corrections::{pwo_grid, PWO_GRID_POINTS};
use epabc::ep::EpRun;
use epabc::gauss::FactoredGaussian;
use epabc::models::simulate_dataset;
use epabc::rng::{child_seed, stream};
use epabc::{
    pwo_first_order, run_ep, AbcOracle, CorrectedMarginal, MomentGaussian, PwoAccumulator,
};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{DataSpec, ExperimentConfig, LoadedConfig};
use crate::error::{CliError, CliResult};
use crate::problem::{
    build_problem, data_seed, ep_of, format_value, generate_rows, native_json, prior_of, read_rows,
    sampling_of, validate_all, write_rows, Problem,
};

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: None,
            threads: 1,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalOut {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub sd: Vec<f64>,
    pub r: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteOut {
    pub r: Vec<f64>,
    pub q: Vec<Vec<f64>>,
    pub log_c: f64,
    pub z_hat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOut {
    pub coord: usize,
    pub param: String,
    pub mean: f64,
    pub violation: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcOut {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub acceptance_rate: f64,
    pub iterations: usize,
    pub accepted: usize,
    pub draws: u64,
    pub proposal_scales: Vec<f64>,
}

/// Contents of posterior.json. Deterministic given config, seed and
/// thread count; nothing time-dependent goes here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorOut {
    pub name: String,
    pub model: String,
    pub param_names: Vec<String>,
    pub n_sites: usize,
    pub passes: usize,
    pub global: GlobalOut,
    pub native_at_mean: serde_json::Value,
    /// `None` when not finite.
    pub log_evidence_raw: Option<f64>,
    /// Raw evidence minus the summed log kernel volumes, when every site's
    /// kernel has a known volume.
    pub log_evidence_corrected: Option<f64>,
    pub log_kernel_volume: Option<f64>,
    pub skips: usize,
    /// Simulator draws over all visits; equals the sum of the trace column.
    pub draws: u64,
    pub sites: Vec<SiteOut>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrections: Option<Vec<CorrectionOut>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub epabc_core: String,
    pub epabc_cli: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// Fully resolved: seeds explicit, paths absolute. Feeding this file
    /// back to `run` repeats the run.
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub seed: u64,
    pub threads: usize,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub posterior: PosteriorOut,
    pub meta: RunMeta,
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect())
        .collect()
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn absolutize(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    std::env::current_dir()
        .map(|d| d.join(p))
        .unwrap_or_else(|_| p.to_path_buf())
}

/// Resolve overrides and paths so the config alone determines the run.
pub fn resolve(loaded: &LoadedConfig, opts: &RunOptions) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = loaded.config.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if opts.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".to_string()));
    }
    let seed = data_seed(&cfg);
    match &mut cfg.data {
        DataSpec::Synthetic { seed: s, .. } => *s = Some(seed),
        DataSpec::Csv { path } => *path = absolutize(&loaded.resolve(path)),
    }
    let out = match (&opts.out, &cfg.output) {
        (Some(o), _) => absolutize(o),
        (None, Some(o)) => absolutize(&loaded.resolve(o)),
        (None, None) => absolutize(&Path::new("runs").join(&cfg.name)),
    };
    cfg.output = Some(out.clone());
    Ok((cfg, out))
}

/// Observed rows from the config: read or simulated.
pub fn load_rows(cfg: &ExperimentConfig) -> CliResult<(Vec<Vec<f64>>, PathBuf)> {
    match &cfg.data {
        DataSpec::Synthetic { n, .. } => Ok((
            generate_rows(cfg, *n, data_seed(cfg))?,
            PathBuf::from("<synthetic>"),
        )),
        DataSpec::Csv { path } => Ok((read_rows(&cfg.model, path)?, path.clone())),
    }
}

/// Everything a run computes, before anything is written.
pub struct RunResult {
    pub problem: Problem,
    pub ep: EpRun,
    pub posterior: PosteriorOut,
    pub corrected: Vec<CorrectedMarginal>,
    pub chain: Option<epabc::baselines::Chain>,
    pub predictive: Vec<(usize, Vec<Vec<f64>>)>,
}

/// The in-memory part of `run`. `cfg` must be resolved.
pub fn execute(cfg: &ExperimentConfig, threads: usize) -> CliResult<RunResult> {
    validate_all(cfg)?;
    let (rows, source) = load_rows(cfg)?;
    let problem = build_problem(cfg, rows, &source)?;
    execute_on(cfg, threads, problem)
}

fn execute_on(cfg: &ExperimentConfig, threads: usize, problem: Problem) -> CliResult<RunResult> {
    let prior = prior_of(cfg)?;
    let (sampling, scheme) = sampling_of(cfg)?;
    let ep_cfg = ep_of(cfg)?;
    let sim = problem.sim.as_ref();
    let n = problem.chunks.len();

    let mut oracle =
        AbcOracle::new(sim, &problem.chunks, sampling, scheme)?.with_threads(threads)?;
    let ep = run_ep(&prior, n, &mut oracle, &ep_cfg, child_seed(cfg.seed, &[2]))?;
    debug_assert_eq!(ep.draws, oracle.total_draws());
    let state = &ep.state;
    let q: MomentGaussian = state.global.to_moments()?;
    let d = q.dim();
    let names = sim.param_names();

    let raw = state.log_evidence(0.0)?;
    let log_volume: Option<f64> = (0..n)
        .map(|i| sim.kernel_log_volume(i, cfg.kernel.epsilon, cfg.kernel.norm))
        .sum();
    let corrected_ev = log_volume.map(|v| raw - v);

    let mut corrected = Vec::new();
    if cfg.corrections.pwo {
        let acc = PwoAccumulator {
            q: q.clone(),
            log_z_q: raw,
            hybrids: ep.hybrids.clone(),
        };
        let coords: Vec<usize> = cfg
            .corrections
            .coords
            .clone()
            .unwrap_or_else(|| (0..d).collect());
        for k in coords {
            let grid = pwo_grid(&q, k, PWO_GRID_POINTS);
            corrected.push(pwo_first_order(&acc, k, &grid)?);
        }
    }

    let chain = match &cfg.baseline {
        Some(b) => {
            let scales = b
                .proposal_scales
                .clone()
                .unwrap_or_else(|| (0..d).map(|k| b.proposal_fraction * q.sd(k)).collect());
            let init = b
                .init
                .clone()
                .unwrap_or_else(|| q.mu().iter().copied().collect());
            let mc = McmcAbcConfig {
                summary: b.summary.clone(),
                epsilon: b.epsilon,
                norm: b.norm,
                proposal_scales: scales,
                iterations: b.iterations,
                init,
                thin: b.thin,
            };
            let mut rng = stream(child_seed(cfg.seed, &[3]), &[]);
            Some((
                mcmc_abc(sim, &problem.chunks, &mc, &prior, &mut rng)?,
                mc.proposal_scales,
            ))
        }
        None => None,
    };

    let mut predictive = Vec::new();
    if let Some(p) = cfg.predictive {
        let fq = FactoredGaussian::new(&q)?;
        let base = child_seed(cfg.seed, &[4]);
        let mut theta = vec![0.0; d];
        for k in 0..p.draws {
            let mut rng = stream(base, &[k as u64]);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            fq.transform_into(&z, &mut theta);
            predictive.push((k, simulate_dataset(sim, n, &theta, &mut rng)));
        }
    }

    let posterior = PosteriorOut {
        name: cfg.name.clone(),
        model: cfg.model.id().to_string(),
        param_names: names.clone(),
        n_sites: n,
        passes: ep_cfg.passes,
        global: GlobalOut {
            mean: q.mu().iter().copied().collect(),
            cov: rows_of(q.sigma()),
            sd: (0..d).map(|k| q.sd(k)).collect(),
            r: state.global.r().iter().copied().collect(),
            q: rows_of(state.global.q()),
        },
        native_at_mean: native_json(&cfg.model, q.mu().as_slice()),
        log_evidence_raw: finite(raw),
        log_evidence_corrected: corrected_ev.and_then(finite),
        log_kernel_volume: log_volume,
        skips: state.skips,
        draws: ep.draws,
        sites: state
            .sites
            .iter()
            .map(|s| SiteOut {
                r: s.nat.r().iter().copied().collect(),
                q: rows_of(s.nat.q()),
                log_c: s.log_c,
                z_hat: s.z_hat,
            })
            .collect(),
        corrections: cfg.corrections.pwo.then(|| {
            corrected
                .iter()
                .map(|c| CorrectionOut {
                    coord: c.coord,
                    param: names[c.coord].clone(),
                    mean: c.mean(),
                    violation: c.violation,
                    flagged: c.flagged,
                })
                .collect()
        }),
        mcmc: chain
            .as_ref()
            .map(|(c, scales)| mcmc_summary(c, scales.clone())),
    };
    Ok(RunResult {
        problem,
        ep,
        posterior,
        corrected,
        chain: chain.map(|(c, _)| c),
        predictive,
    })
}

fn mcmc_summary(c: &epabc::baselines::Chain, proposal_scales: Vec<f64>) -> McmcOut {
    let mean = c.mean();
    let m = c.samples.len() as f64;
    let sd = (0..mean.len())
        .map(|k| {
            let ss: f64 = c.samples.iter().map(|s| (s.1[k] - mean[k]).powi(2)).sum();
            (ss / (m - 1.0).max(1.0)).sqrt()
        })
        .collect();
    McmcOut {
        mean,
        sd,
        acceptance_rate: c.acceptance_rate(),
        iterations: c.iterations,
        accepted: c.accepted,
        draws: c.draws,
        proposal_scales,
    }
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Writer<'_> {
    fn file(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let path = self.dir.join(name);
        let io = |e: csv::Error| CliError::io(&path, std::io::Error::other(e));
        wtr.write_record(header).map_err(io)?;
        for r in rows {
            wtr.write_record(r).map_err(io)?;
        }
        let bytes = wtr
            .into_inner()
            .map_err(|e| CliError::io(&path, std::io::Error::other(e.to_string())))?;
        self.file(name, &bytes)
    }
}

fn strs<'a>(v: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    v.into_iter().map(str::to_string).collect()
}

/// `run <config>`: writes every artifact into the output directory.
/// Nothing is written unless the config validates and the data load.
pub fn run(loaded: &LoadedConfig, opts: &RunOptions) -> CliResult<RunSummary> {
    let start = Instant::now();
    let (cfg, out) = resolve(loaded, opts)?;
    validate_all(&cfg)?;
    let (rows, source) = load_rows(&cfg)?;
    let problem = build_problem(&cfg, rows, &source)?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;

    let res = execute_on(&cfg, opts.threads, problem)?;
    let names = res.posterior.param_names.clone();
    let mut w = Writer {
        dir: &out,
        written: Vec::new(),
    };

    let post = serde_json::to_string_pretty(&res.posterior).expect("posterior serializes");
    w.file("posterior.json", post.as_bytes())?;

    let mut data = Vec::new();
    write_rows(&cfg.model, &res.problem.rows, &mut data)
        .map_err(|e| CliError::io(&out.join("data.csv"), std::io::Error::other(e)))?;
    w.file("data.csv", &data)?;

    let mut header = strs(["pass", "site", "skipped", "draws", "min_eig"]);
    header.extend(names.iter().map(|n| format!("mean_{n}")));
    let trace: Vec<Vec<String>> = res
        .ep
        .state
        .trace
        .iter()
        .map(|t| {
            let mut r = vec![
                t.pass.to_string(),
                t.site.to_string(),
                u8::from(t.skipped).to_string(),
                t.draws.to_string(),
                format_value(t.min_eig),
            ];
            r.extend(t.mean.iter().map(|v| format_value(*v)));
            r
        })
        .collect();
    w.csv("trace.csv", &header, &trace)?;

    if !res.corrected.is_empty() {
        let header = strs([
            "coord",
            "param",
            "x",
            "q_cdf",
            "raw_cdf",
            "raw_density",
            "clipped_cdf",
            "clipped_density",
        ]);
        let mut rows = Vec::new();
        for c in &res.corrected {
            for k in 0..c.grid.len() {
                rows.push(vec![
                    c.coord.to_string(),
                    names[c.coord].clone(),
                    format_value(c.grid[k]),
                    format_value(c.q_cdf[k]),
                    format_value(c.raw_cdf[k]),
                    format_value(c.raw_density[k]),
                    format_value(c.clipped_cdf[k]),
                    format_value(c.clipped_density[k]),
                ]);
            }
        }
        w.csv("corrected_marginals.csv", &header, &rows)?;
    }

    if let Some(chain) = &res.chain {
        let mut header = strs(["iteration", "accepted"]);
        header.extend(names.iter().cloned());
        let rows: Vec<Vec<String>> = chain
            .samples
            .iter()
            .map(|(it, theta, acc)| {
                let mut r = vec![it.to_string(), u8::from(*acc).to_string()];
                r.extend(theta.iter().map(|v| format_value(*v)));
                r
            })
            .collect();
        w.csv("chain.csv", &header, &rows)?;
    }

    if !res.predictive.is_empty() {
        let header = strs(["draw", "trial", "condition", "choice", "rt_ms"]);
        let mut rows = Vec::new();
        for (k, ds) in &res.predictive {
            for (t, trial) in ds.iter().enumerate() {
                let mut r = vec![k.to_string(), t.to_string()];
                r.extend(trial.iter().map(|v| format_value(*v)));
                rows.push(r);
            }
        }
        w.csv("predictive.csv", &header, &rows)?;
    }

    let mut outputs = w.written.clone();
    outputs.push("run_meta.json".to_string());
    let meta = RunMeta {
        seed: cfg.seed,
        config: cfg,
        versions: Versions {
            epabc_core: epabc::VERSION.to_string(),
            epabc_cli: env!("CARGO_PKG_VERSION").to_string(),
        },
        threads: opts.threads,
        wall_time_s: start.elapsed().as_secs_f64(),
        outputs,
    };
    let text = serde_json::to_string_pretty(&meta).expect("run meta serializes");
    w.file("run_meta.json", text.as_bytes())?;
    Ok(RunSummary {
        out_dir: out,
        posterior: res.posterior,
        meta,
    })
}

/// `gen-data <config>`: the synthetic dataset, in CSV layout.
pub fn gen_data<W: std::io::Write>(
    loaded: &LoadedConfig,
    seed: Option<u64>,
    n_override: Option<usize>,
    w: W,
) -> CliResult<usize> {
    let mut cfg = loaded.config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    validate_all(&cfg)?;
    let n = match (&cfg.data, n_override) {
        (_, Some(n)) => n,
        (DataSpec::Synthetic { n, .. }, None) => *n,
        (DataSpec::Csv { .. }, None) => {
            return Err(CliError::Config(
                "config reads its data from CSV; pass --n to simulate".to_string(),
            ))
        }
    };
    if n == 0 {
        return Err(CliError::Config("n must be >= 1".to_string()));
    }
    let rows = generate_rows(&cfg, n, data_seed(&cfg))?;
    write_rows(&cfg.model, &rows, w)
        .map_err(|e| CliError::io(Path::new("<output>"), std::io::Error::other(e)))?;
    Ok(rows.len())
}
