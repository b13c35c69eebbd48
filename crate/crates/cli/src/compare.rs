//! `compare <dir>...`: side-by-side posterior summaries of finished runs.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::run::{PosteriorOut, RunMeta};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub method: String,
    pub param: String,
    pub mean: f64,
    pub sd: f64,
    pub log_evidence: Option<f64>,
    pub wall_time_s: f64,
    pub draws: u64,
    /// Across-site variance of `ln Zhat`; blank for MCMC rows.
    pub var_log_zhat: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn variance(x: &[f64]) -> Option<f64> {
    if x.len() < 2 || x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    Some(x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64)
}

pub fn compare(dirs: &[PathBuf]) -> CliResult<Vec<CompareRow>> {
    if dirs.len() < 2 {
        return Err(CliError::IncompatibleRuns(format!(
            "need at least two runs, got {}",
            dirs.len()
        )));
    }
    let mut runs = Vec::new();
    for d in dirs {
        let post: PosteriorOut = read_json(&d.join("posterior.json"))?;
        let meta: RunMeta = read_json(&d.join("run_meta.json"))?;
        runs.push((d, post, meta));
    }
    let (_, first, _) = &runs[0];
    for (d, p, _) in &runs[1..] {
        if p.model != first.model || p.param_names != first.param_names {
            return Err(CliError::IncompatibleRuns(format!(
                "{} fits {} ({}), the first run fits {} ({})",
                d.display(),
                p.model,
                p.param_names.join(","),
                first.model,
                first.param_names.join(",")
            )));
        }
    }
    let mut rows = Vec::new();
    for (d, p, meta) in &runs {
        let run = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| d.display().to_string());
        let lz: Vec<f64> = p
            .sites
            .iter()
            .filter_map(|s| s.z_hat)
            .map(f64::ln)
            .collect();
        let var_lz = variance(&lz);
        let evidence = p.log_evidence_corrected.or(p.log_evidence_raw);
        for (k, name) in p.param_names.iter().enumerate() {
            rows.push(CompareRow {
                run: run.clone(),
                method: "ep_abc".to_string(),
                param: name.clone(),
                mean: p.global.mean[k],
                sd: p.global.sd[k],
                log_evidence: evidence,
                wall_time_s: meta.wall_time_s,
                draws: p.draws,
                var_log_zhat: var_lz,
            });
        }
        if let Some(mc) = &p.mcmc {
            for (k, name) in p.param_names.iter().enumerate() {
                rows.push(CompareRow {
                    run: run.clone(),
                    method: "mcmc_abc".to_string(),
                    param: name.clone(),
                    mean: mc.mean[k],
                    sd: mc.sd[k],
                    log_evidence: None,
                    wall_time_s: meta.wall_time_s,
                    draws: mc.draws,
                    var_log_zhat: None,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_table<W: std::io::Write>(rows: &[CompareRow], w: W) -> csv::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}
