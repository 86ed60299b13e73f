//! Evaluation of an inference run: ensemble reconstruction of every state
//! component by re-integrating the ODE over the parameter sample, trajectory
//! RMSE against the truth, observation bands and the report files.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::ode::{integrate_from_origin, OdeSystem, ParamVector, TimeGrid, Trajectory};
use crate::wgan::{column_moments, summarize, InferenceResult, Summary};

pub const DEFAULT_EVAL_POINTS: usize = 161;

/// Bumped whenever the layout of `run.json` changes.
pub const RUN_SCHEMA_VERSION: u32 = 1;

/// `n` uniform points on `[0, horizon]`.
pub fn eval_grid(horizon: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(0.0, horizon, n)
}

/// Reporting multiplier per system (protein errors are tabulated ×10³).
pub fn rmse_scale(system_name: &str) -> f64 {
    if system_name.starts_with("protein_transduction") {
        1e3
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub component_names: Vec<String>,
    /// One natural-scale trajectory per retained draw.
    pub ensemble: Vec<Trajectory>,
    pub mean: Trajectory,
    /// Pointwise minimum and maximum across the ensemble, `[t][component]`.
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
    pub dropped: usize,
}

/// Integrates every draw from the system's initial state on `grid` and
/// aggregates the ensemble in natural scale. Draws whose integration blows up
/// are dropped; more than 10% dropped is an error.
pub fn reconstruct_missing(
    system: &OdeSystem,
    draws: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<Reconstruction> {
    if draws.is_empty() {
        return Err(Error::config("reconstruction needs at least one parameter draw"));
    }
    let mut ensemble = Vec::with_capacity(draws.len());
    let mut dropped = 0;
    for p in draws {
        match integrate_from_origin(system, &ParamVector(p.clone()), grid, None) {
            Ok(traj) if system.log_space => ensemble.push(traj.exponentiated()),
            Ok(traj) => ensemble.push(traj),
            Err(Error::BlowUp { time }) => {
                warn!("draw {p:?} blew up at t = {time}; dropped from the ensemble");
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if dropped * 10 > draws.len() {
        return Err(Error::Numerical(format!(
            "{dropped} of {} draws blew up during reconstruction",
            draws.len()
        )));
    }

    let d_y = system.d_y();
    let kept = ensemble.len() as f64;
    let mut mean = vec![vec![0.0; d_y]; grid.len()];
    let mut lo = vec![vec![f64::INFINITY; d_y]; grid.len()];
    let mut hi = vec![vec![f64::NEG_INFINITY; d_y]; grid.len()];
    for traj in &ensemble {
        for (k, state) in traj.states.iter().enumerate() {
            for (i, &v) in state.iter().enumerate() {
                mean[k][i] += v;
                lo[k][i] = lo[k][i].min(v);
                hi[k][i] = hi[k][i].max(v);
            }
        }
    }
    for row in &mut mean {
        for v in row.iter_mut() {
            *v /= kept;
        }
    }
    let (param_mean, _) = column_moments(draws);
    Ok(Reconstruction {
        component_names: system.component_names.clone(),
        ensemble,
        mean: Trajectory {
            grid: grid.clone(),
            states: mean,
            params: ParamVector(param_mean),
        },
        lo,
        hi,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub component_names: Vec<String>,
    pub values: Vec<f64>,
    pub grid_points: usize,
    pub draws: usize,
    /// Multiplier applied in the tabulated `scaled` column.
    pub scale: f64,
}

/// Per-component RMSE of `estimate` against `truth` on their shared grid.
pub fn trajectory_rmse(
    estimate: &Trajectory,
    truth: &Trajectory,
    component_names: &[String],
    draws: usize,
    scale: f64,
) -> Result<RmseReport> {
    if component_names.len() != truth.dim() {
        return Err(Error::dim("rmse component names", truth.dim(), component_names.len()));
    }
    Ok(RmseReport {
        component_names: component_names.to_vec(),
        values: estimate.rmse_against(truth)?,
        grid_points: truth.grid.len(),
        draws,
        scale,
    })
}

/// Per observed entry (flattening order): mean and `mean ± 1.96·std` across
/// replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedBand {
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn observed_band(dataset: &Dataset) -> Result<ObservedBand> {
    if dataset.n_obs() < 2 {
        return Err(Error::config("observation band needs at least two replicates"));
    }
    let (mean, var) = column_moments(&dataset.replicates);
    let half: Vec<f64> = var.iter().map(|v| 1.96 * v.sqrt()).collect();
    Ok(ObservedBand {
        lo: mean.iter().zip(&half).map(|(m, h)| m - h).collect(),
        hi: mean.iter().zip(&half).map(|(m, h)| m + h).collect(),
        mean,
    })
}

/// Everything a report is computed from.
pub struct ReportInputs<'a> {
    pub system: &'a OdeSystem,
    pub dataset: &'a Dataset,
    pub result: &'a InferenceResult,
    pub eval_points: usize,
    /// Free-form provenance (configs, seeds, wall times) copied into `run.json`.
    pub run_info: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub summary: Summary,
    pub rmse: RmseReport,
    pub truth: Trajectory,
    pub reconstruction: Reconstruction,
    pub band: ObservedBand,
}

pub fn build_report(inputs: &ReportInputs) -> Result<Report> {
    let ReportInputs {
        system,
        dataset,
        result,
        ..
    } = inputs;
    if result.system_name != system.name || dataset.system_name() != system.name {
        return Err(Error::Mismatch(format!(
            "result `{}`, dataset `{}`, system `{}`",
            result.system_name,
            dataset.system_name(),
            system.name
        )));
    }
    if result.param_draws.is_empty() {
        return Err(Error::config("inference result has an empty parameter sample"));
    }
    let grid = eval_grid(system.horizon, inputs.eval_points)?;
    let mut truth = integrate_from_origin(system, &system.true_params, &grid, None)?;
    if system.log_space {
        truth = truth.exponentiated();
    }
    let reconstruction = reconstruct_missing(system, &result.param_draws, &grid)?;
    let rmse = trajectory_rmse(
        &reconstruction.mean,
        &truth,
        &system.component_names,
        reconstruction.ensemble.len(),
        rmse_scale(&system.name),
    )?;
    Ok(Report {
        summary: summarize(result),
        rmse,
        truth,
        reconstruction,
        band: observed_band(dataset)?,
    })
}

fn observed_names(dataset: &Dataset) -> Vec<&str> {
    dataset
        .schedule
        .observed_components
        .iter()
        .map(|&i| dataset.component_names[i].as_str())
        .collect()
}

pub fn rmse_csv(report: &RmseReport, observed: &[&str]) -> String {
    let mut out = String::from("component,observed,rmse,scale,scaled_rmse\n");
    for (name, v) in report.component_names.iter().zip(&report.values) {
        writeln!(
            out,
            "{name},{},{v:.16e},{:e},{:.16e}",
            observed.contains(&name.as_str()),
            report.scale,
            v * report.scale
        )
        .expect("string write");
    }
    out
}

pub fn params_csv(summary: &Summary, true_values: &[f64]) -> String {
    let mut out = String::from("param,true_value,mean,std\n");
    for (k, name) in summary.param_names.iter().enumerate() {
        writeln!(
            out,
            "{name},{:.16e},{:.16e},{:.16e}",
            true_values[k], summary.param_mean[k], summary.param_std[k]
        )
        .expect("string write");
    }
    out
}

pub fn reconstruction_csv(rec: &Reconstruction, truth: &Trajectory) -> String {
    let mut out = String::from("t,component,truth,mean,lo,hi\n");
    for (k, &t) in truth.grid.points().iter().enumerate() {
        for (i, name) in rec.component_names.iter().enumerate() {
            writeln!(
                out,
                "{t:.16e},{name},{:.16e},{:.16e},{:.16e},{:.16e}",
                truth.states[k][i], rec.mean.states[k][i], rec.lo[k][i], rec.hi[k][i]
            )
            .expect("string write");
        }
    }
    out
}

/// Writes `rmse.csv`, `params.csv`, `reconstruction.csv` and `run.json` into
/// `dir`. Nothing is written if the report cannot be computed.
pub fn write_report(inputs: &ReportInputs, dir: &Path) -> Result<Report> {
    let report = build_report(inputs)?;
    std::fs::create_dir_all(dir)?;
    let observed = observed_names(inputs.dataset);
    std::fs::write(dir.join("rmse.csv"), rmse_csv(&report.rmse, &observed))?;
    std::fs::write(
        dir.join("params.csv"),
        params_csv(&report.summary, &inputs.system.true_params.0),
    )?;
    std::fs::write(
        dir.join("reconstruction.csv"),
        reconstruction_csv(&report.reconstruction, &report.truth),
    )?;
    let run = serde_json::json!({
        "schema_version": RUN_SCHEMA_VERSION,
        "crate_version": env!("CARGO_PKG_VERSION"),
        "system": inputs.system.name,
        "observed_components": observed,
        "eval_points": inputs.eval_points,
        "dropped_draws": report.reconstruction.dropped,
        "summary": report.summary,
        "rmse": report.rmse,
        "gan_config": inputs.result.config,
        "gan_wall_seconds": inputs.result.wall_seconds,
        "run": inputs.run_info,
    });
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&run)?)?;
    Ok(report)
}
