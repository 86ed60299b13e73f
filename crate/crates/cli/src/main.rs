use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::json;
use sigmoid_cli::config::{RunConfig, PRESETS};
use sigmoid_cli::pipeline::{self, cache_dir_from_env};
use sigmoid_core::datagen::Dataset;
use sigmoid_core::evalreport::DEFAULT_EVAL_POINTS;
use sigmoid_core::hyperpinn::HyperPinnModel;
use sigmoid_core::wgan::InferenceResult;
use sigmoid_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sigmoid", version, about = "Parameter inference for partially observed ODE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// JSON run config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in run config by name.
    #[arg(long)]
    preset: Option<String>,
    /// Master seed; every stage seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[command(flatten)]
        src: Source,
    },
    /// Train the parameter-conditioned solver.
    TrainSolver {
        #[command(flatten)]
        src: Source,
        /// Override the number of training epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the physics-loss weight.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train the generators against a dataset.
    Infer {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Override the number of GAN epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated noise-loss weights; one result per value.
        #[arg(long, value_delimiter = ',')]
        lambda_e_sweep: Option<Vec<f64>>,
    },
    /// Reconstruct trajectories and write the report files.
    Report {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_POINTS)]
        eval_points: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every stage in order.
    Pipeline {
        #[command(flatten)]
        src: Source,
        #[arg(long)]
        solver_epochs: Option<usize>,
        #[arg(long)]
        gan_epochs: Option<usize>,
    },
    /// Print a resolved config as JSON.
    ShowConfig {
        #[command(flatten)]
        src: Source,
    },
}

fn load_config(src: &Source) -> Result<RunConfig> {
    let cfg = match (&src.config, &src.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => {
            return Err(Error::Config(format!(
                "pass --config <file> or --preset <{}>",
                PRESETS.join("|")
            )))
        }
    };
    Ok(match src.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn sweep_dir(out: &Path, lambda_e: f64) -> PathBuf {
    out.join(format!("lambda_e_{lambda_e}"))
}

fn run(command: Command) -> Result<()> {
    let cache = cache_dir_from_env();
    match command {
        Command::Simulate { src } => {
            let cfg = load_config(&src)?;
            let dataset = pipeline::simulate(&cfg)?;
            let path = pipeline::write_dataset(&dataset, &src.out)?;
            println!(
                "{}: flat_dim {}, N_o {}",
                path.display(),
                dataset.flat_dim(),
                dataset.n_obs()
            );
        }
        Command::TrainSolver { src, epochs, beta } => {
            let mut cfg = load_config(&src)?;
            if let Some(e) = epochs {
                cfg.pinn.epochs = e;
            }
            if let Some(b) = beta {
                cfg.pinn.beta = b;
            }
            cfg.validate()?;
            if cfg.pinn.beta == 0.0 {
                info!("beta = 0: physics loss disabled");
            }
            let model = pipeline::train_solver(&cfg, cache.as_deref())?;
            let path = pipeline::write_model(&model, &src.out)?;
            println!("{}", path.display());
        }
        Command::Infer {
            src,
            model,
            dataset,
            epochs,
            lambda_e_sweep,
        } => {
            let mut cfg = load_config(&src)?;
            if let Some(e) = epochs {
                cfg.gan.epochs = e;
            }
            cfg.validate()?;
            let model = HyperPinnModel::load(&model)?;
            let dataset = Dataset::load(&dataset)?;
            match lambda_e_sweep {
                Some(values) => {
                    for lambda_e in values {
                        let mut run = cfg.clone();
                        run.gan.lambda_e = lambda_e;
                        run.validate()?;
                        info!("lambda_e = {lambda_e}");
                        let result = pipeline::infer(&run, &model, &dataset)?;
                        let path = pipeline::write_result(&result, &sweep_dir(&src.out, lambda_e))?;
                        println!("{}", path.display());
                    }
                }
                None => {
                    let result = pipeline::infer(&cfg, &model, &dataset)?;
                    let path = pipeline::write_result(&result, &src.out)?;
                    println!("{}", path.display());
                }
            }
        }
        Command::Report {
            result,
            dataset,
            eval_points,
            out,
        } => {
            let info = json!({
                "result": result.display().to_string(),
                "dataset": dataset.display().to_string(),
            });
            let result = InferenceResult::load(&result)?;
            let dataset = Dataset::load(&dataset)?;
            pipeline::report(&dataset, &result, eval_points, info, &out)?;
            println!("{}", out.display());
        }
        Command::Pipeline {
            src,
            solver_epochs,
            gan_epochs,
        } => {
            let mut cfg = load_config(&src)?;
            if let Some(e) = solver_epochs {
                cfg.pinn.epochs = e;
            }
            if let Some(e) = gan_epochs {
                cfg.gan.epochs = e;
            }
            let outcome = pipeline::run_pipeline(&cfg, &src.out, cache.as_deref())?;
            let s = &outcome.report.summary;
            for (k, name) in s.param_names.iter().enumerate() {
                println!("{name}: {:.4} ± {:.4}", s.param_mean[k], s.param_std[k]);
            }
            let r = &outcome.report.rmse;
            for (name, v) in r.component_names.iter().zip(&r.values) {
                println!("rmse {name}: {v:.4}");
            }
        }
        Command::ShowConfig { src } => {
            let cfg = load_config(&src)?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
