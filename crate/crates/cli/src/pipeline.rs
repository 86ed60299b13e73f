//! Stage functions shared by the subcommands and the full pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde_json::json;
use sigmoid_core::datagen::{generate_dataset, Dataset};
use sigmoid_core::evalreport::{write_report, Report, ReportInputs};
use sigmoid_core::hyperpinn::{cached_training_set, train_hyperpinn, HyperPinnModel};
use sigmoid_core::wgan::{train_wgan, InferenceResult};
use sigmoid_core::{Error, Result};

use crate::config::{resolve_system, RunConfig};

pub const CACHE_ENV: &str = "SIGMOID_CACHE_DIR";

pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

pub fn simulate(cfg: &RunConfig) -> Result<Dataset> {
    generate_dataset(&cfg.system()?, &cfg.scenario)
}

pub fn train_solver(cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<HyperPinnModel> {
    let sys = cfg.system()?;
    let (set, hit) = cached_training_set(
        cache_dir,
        &sys,
        &cfg.bounds,
        cfg.pinn.n_p,
        cfg.pinn.t_col,
        cfg.training_set_seed(),
    )?;
    if !hit {
        info!("training set built: {} parameters × {} times", set.n_p(), set.t_col());
    }
    train_hyperpinn(&sys, &set, &cfg.pinn)
}

pub fn infer(cfg: &RunConfig, model: &HyperPinnModel, dataset: &Dataset) -> Result<InferenceResult> {
    let sys = cfg.system()?;
    if dataset.system_name() != sys.name {
        return Err(Error::Mismatch(format!(
            "config runs `{}`, dataset comes from `{}`",
            sys.name,
            dataset.system_name()
        )));
    }
    train_wgan(model, dataset, &sys.param_names, &cfg.gan)
}

/// `epoch,total,data,physics` rows of the solver's loss history.
pub fn solver_loss_csv(model: &HyperPinnModel) -> String {
    let mut out = String::from("epoch,total,data,physics\n");
    if let Some(meta) = &model.metadata {
        for r in &meta.loss_history {
            let physics = r.loss.physics.map_or(String::new(), |v| format!("{v:.16e}"));
            writeln!(out, "{},{:.16e},{:.16e},{physics}", r.epoch, r.loss.total, r.loss.data)
                .expect("string write");
        }
    }
    out
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("dataset.json");
    dataset.save(&path)?;
    std::fs::write(dir.join("dataset.csv"), dataset.to_csv())?;
    Ok(path)
}

pub fn write_model(model: &HyperPinnModel, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("model.json");
    model.save(&path)?;
    std::fs::write(dir.join("solver_loss.csv"), solver_loss_csv(model))?;
    Ok(path)
}

pub fn write_result(result: &InferenceResult, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("result.json");
    result.save(&path)?;
    std::fs::write(dir.join("draws.csv"), result.params_csv())?;
    Ok(path)
}

pub fn report(
    dataset: &Dataset,
    result: &InferenceResult,
    eval_points: usize,
    run_info: serde_json::Value,
    dir: &Path,
) -> Result<Report> {
    let system = resolve_system(&result.system_name)?;
    write_report(
        &ReportInputs {
            system: &system,
            dataset,
            result,
            eval_points,
            run_info,
        },
        dir,
    )
}

pub struct PipelineOutcome {
    pub dataset: Dataset,
    pub model: HyperPinnModel,
    pub result: InferenceResult,
    pub report: Report,
}

/// Every stage in order, writing all artifacts into `out`.
pub fn run_pipeline(cfg: &RunConfig, out: &Path, cache_dir: Option<&Path>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;

    let t0 = Instant::now();
    let dataset = simulate(cfg)?;
    write_dataset(&dataset, out)?;
    let simulate_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let model = train_solver(cfg, cache_dir)?;
    write_model(&model, out)?;
    let solver_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let result = infer(cfg, &model, &dataset)?;
    write_result(&result, out)?;
    let infer_s = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let run_info = json!({
        "config": cfg,
        "seeds": {
            "master": cfg.seed,
            "datagen": cfg.scenario.seed,
            "training_set": cfg.training_set_seed(),
            "solver": cfg.pinn.seed,
            "gan": cfg.gan.seed,
        },
        "solver_fidelity": model.metadata.as_ref().and_then(|m| m.fidelity.clone()),
        "wall_seconds": {
            "simulate": simulate_s,
            "train_solver": solver_s,
            "infer": infer_s,
        },
    });
    let report = report(&dataset, &result, cfg.eval_points, run_info, out)?;
    info!("report written in {:.1}s", t0.elapsed().as_secs_f64());
    Ok(PipelineOutcome {
        dataset,
        model,
        result,
        report,
    })
}
