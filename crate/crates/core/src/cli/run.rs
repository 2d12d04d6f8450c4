//! The `run` command: executes a scenario for each requested method and
//! writes `report.json`, `estimates.csv` and optionally `trace.csv`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dirac::format_f64;
use crate::error::{Error, Result};
use crate::filter::{kalman_reference, run_scenario, Method, ScenarioRun};

use super::config::LoadedConfig;

/// One estimate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub method: String,
    pub mean: Vec<f64>,
    /// Row-major `N x N`.
    pub covariance: Vec<f64>,
    pub ess: f64,
    pub wall_time_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorStats {
    pub mean: Vec<f64>,
    pub covariance: Vec<f64>,
    pub ess: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub scenario: String,
    pub config_hash: String,
    pub seed: u64,
    pub methods: Vec<String>,
    pub dim: usize,
    pub particles: usize,
    pub prior: PriorStats,
    pub records: Vec<Record>,
    /// Kalman filter means per measurement for linear-Gaussian scenarios.
    pub kalman_means: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub seed: Option<u64>,
    pub trace: bool,
}

/// Number of worker threads for independent method runs.
pub fn worker_count() -> usize {
    std::env::var("FLOWFILT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every method, writes the artifacts and returns the report together
/// with the output directory.
pub fn execute(mut loaded: LoadedConfig, opts: &RunOptions) -> Result<(RunReport, PathBuf)> {
    if let Some(seed) = opts.seed {
        loaded.scenario.seed = seed;
    }
    if opts.trace {
        loaded.scenario.flow.trace = true;
    }
    let methods = opts.methods.clone().unwrap_or_else(|| loaded.methods.clone());
    let out = opts.out.clone().unwrap_or_else(|| {
        loaded
            .base_dir
            .join(loaded.config.output.dir.clone().unwrap_or_else(|| "out".to_string()))
    });

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Domain(format!("thread pool: {e}")))?;
    let scenario = &loaded.scenario;
    let runs: Vec<Result<ScenarioRun>> =
        pool.install(|| methods.par_iter().map(|m| run_scenario(scenario, *m)).collect());
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;

    let n = scenario.prior.dim();
    let prior = &scenario.prior;
    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        scenario: loaded.config.scenario.name.clone(),
        config_hash: loaded.hash.clone(),
        seed: scenario.seed,
        methods: methods.iter().map(|m| m.name().to_string()).collect(),
        dim: n,
        particles: prior.len(),
        prior: PriorStats {
            mean: prior.mean().as_slice().to_vec(),
            covariance: row_major(&prior.covariance()),
            ess: prior.ess(),
        },
        records: runs
            .iter()
            .flat_map(|run| {
                run.records.iter().skip(1).map(move |r| Record {
                    step: r.step,
                    method: run.method.name().to_string(),
                    mean: r.mean.clone(),
                    covariance: r.covariance.clone(),
                    ess: r.ess,
                    wall_time_ms: r.runtime_ms,
                })
            })
            .collect(),
        kalman_means: kalman_reference(scenario)
            .map(|k| k.iter().skip(1).map(|(m, _)| m.as_slice().to_vec()).collect()),
    };

    fs::create_dir_all(&out)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Domain(e.to_string()))?;
    fs::write(out.join("report.json"), json + "\n")?;
    write_estimates(&out.join("estimates.csv"), &report)?;
    if scenario.flow.trace {
        write_trace(&out, &runs)?;
    }
    Ok((report, out))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn estimates_header(n: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "method".to_string(), "ess".to_string()];
    h.extend((1..=n).map(|d| format!("mean_{d}")));
    for a in 1..=n {
        for b in 1..=n {
            h.push(format!("cov_{a}_{b}"));
        }
    }
    h.extend((1..=n).map(|d| format!("kalman_mean_{d}")));
    h
}

/// Wall times are kept out of this file so that it is reproducible.
fn write_estimates(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(estimates_header(report.dim))?;
    for r in &report.records {
        let mut row = vec![r.step.to_string(), r.method.clone(), format_f64(r.ess)];
        row.extend(r.mean.iter().map(|v| format_f64(*v)));
        row.extend(r.covariance.iter().map(|v| format_f64(*v)));
        match report.kalman_means.as_ref().and_then(|k| k.get(r.step - 1)) {
            Some(k) => row.extend(k.iter().map(|v| format_f64(*v))),
            None => row.extend(std::iter::repeat_n(String::new(), report.dim)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `estimates.csv` back into records (wall times are zero).
pub fn read_estimates(path: &Path) -> Result<Vec<Record>> {
    let mut reader = csv::Reader::from_path(path)?;
    let n = reader.headers()?.iter().filter(|h| h.starts_with("mean_")).count();
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|e| Error::Domain(format!("estimates.csv: {e}")))
        };
        out.push(Record {
            step: rec[0].parse().map_err(|e| Error::Domain(format!("estimates.csv: {e}")))?,
            method: rec[1].to_string(),
            ess: num(2)?,
            mean: (0..n).map(|d| num(3 + d)).collect::<Result<_>>()?,
            covariance: (0..n * n).map(|d| num(3 + n + d)).collect::<Result<_>>()?,
            wall_time_ms: 0.0,
        });
    }
    Ok(out)
}

fn write_trace(out: &Path, runs: &[ScenarioRun]) -> Result<()> {
    let mut file = fs::File::create(out.join("trace.csv"))?;
    let mut header_written = false;
    let mut diagnostics = Vec::new();
    for run in runs {
        for rec in &run.records {
            let Some(trace) = &rec.trace else { continue };
            let mut buf = Vec::new();
            trace.write_csv(&mut buf)?;
            let text = String::from_utf8(buf).map_err(|e| Error::Domain(e.to_string()))?;
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            if !header_written {
                writeln!(file, "step,method,{header}")?;
                header_written = true;
            }
            for line in lines {
                writeln!(file, "{},{},{line}", rec.step, run.method.name())?;
            }
            diagnostics.push(serde_json::json!({
                "step": rec.step,
                "method": run.method.name(),
                "diagnostics": trace.diagnostics_json(),
            }));
        }
    }
    if !header_written {
        writeln!(file, "step,method,gamma,particle_index")?;
    }
    let json = serde_json::to_string_pretty(&diagnostics).map_err(|e| Error::Domain(e.to_string()))?;
    fs::write(out.join("trace_diagnostics.json"), json + "\n")?;
    Ok(())
}

/// Largest deviation of the flow means from the Kalman means, in units of
/// the Kalman posterior standard deviation of each component.
pub fn kalman_deviation(report: &RunReport, kalman: &[(DVector<f64>, DMatrix<f64>)], method: &str) -> f64 {
    report
        .records
        .iter()
        .filter(|r| r.method == method)
        .map(|r| {
            let (m, p) = &kalman[r.step];
            (0..m.len())
                .map(|d| (r.mean[d] - m[d]).abs() / p[(d, d)].sqrt())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}
