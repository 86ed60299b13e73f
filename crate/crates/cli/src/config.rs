//! Run configuration, per-system presets and master-seed fan-out.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sigmoid_core::datagen::{NoiseModel, ScenarioConfig};
use sigmoid_core::evalreport::DEFAULT_EVAL_POINTS;
use sigmoid_core::hyperpinn::{ParamBounds, PinnTrainConfig};
use sigmoid_core::ode::{make_system, OdeSystem, TimeGrid};
use sigmoid_core::rng::derive_seed;
use sigmoid_core::wgan::WganConfig;
use sigmoid_core::{Error, Result};

pub const PRESETS: [&str; 8] = [
    "fn_ns",
    "fn_nsmc",
    "protein_ns",
    "protein_nsmc",
    "hes1_nsmc",
    "lorenz_ns",
    "lorenz_nsmc",
    "toy",
];

/// Name of the closed-form test system accepted in configs besides the registry.
pub const TOY_SYSTEM: &str = "exponential_decay";

/// One complete run. Stage seeds inside `scenario`, `pinn` and `gan` are
/// always overwritten from the master `seed` (see [`RunConfig::with_seed`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub name: String,
    pub system: String,
    pub scenario: ScenarioConfig,
    pub bounds: ParamBounds,
    pub pinn: PinnTrainConfig,
    pub gan: WganConfig,
    pub eval_points: usize,
    pub seed: u64,
}

/// Seed of a named stage under a master seed.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    derive_seed(master, stage)
}

pub fn resolve_system(name: &str) -> Result<OdeSystem> {
    if name == TOY_SYSTEM {
        Ok(OdeSystem::exponential_decay())
    } else {
        make_system(name)
    }
}

fn grid(start: f64, end: f64, n: usize) -> TimeGrid {
    TimeGrid::uniform(start, end, n).expect("preset grid")
}

fn pinn(alpha: f64, beta: f64, n_p: usize, lr: f64, epochs: usize) -> PinnTrainConfig {
    PinnTrainConfig {
        alpha,
        beta,
        n_p,
        t_col: 101,
        batch_size: 10_000,
        learning_rate: lr,
        epochs,
        seed: 0,
        hyper_hidden: vec![64, 64, 64],
        main_hidden: vec![32, 32],
        log_every: 100,
        fidelity_draws: 20,
        fidelity_threshold: 0.05,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "fn_ns" | "fn_nsmc" => {
                let sys = make_system("fitzhugh_nagumo")?;
                let mut scenario = ScenarioConfig::uniform(
                    &sys,
                    &["V", "R"],
                    &grid(0.0, 20.0, 41),
                    100,
                    NoiseModel::additive(0.2),
                    0,
                );
                if name == "fn_nsmc" {
                    scenario = scenario.with_masked(&["R"]);
                }
                Self::assemble(
                    name,
                    &sys,
                    scenario,
                    pinn(1.0, 0.001, 1000, 5e-4, 30_000),
                    WganConfig::new(100.0, 1e-5, 100_000, 0),
                )?
            }
            "protein_ns" | "protein_nsmc" => {
                let sys = make_system("protein_transduction")?;
                let all: Vec<&str> = sys.component_names.iter().map(String::as_str).collect();
                let mut scenario = ScenarioConfig::uniform(
                    &sys,
                    &all,
                    &grid(0.0, 100.0, 26),
                    100,
                    NoiseModel::additive(0.01),
                    0,
                );
                if name == "protein_nsmc" {
                    scenario = scenario.with_masked(&["S", "S_d", "R", "S_R"]);
                }
                Self::assemble(
                    name,
                    &sys,
                    scenario,
                    pinn(1.0, 0.0, 1000, 1e-5, 30_000),
                    WganConfig::new(1000.0, 1e-5, 100_000, 0),
                )?
            }
            "hes1_nsmc" => {
                let sys = make_system("hes1_log")?;
                let mut times = BTreeMap::new();
                times.insert("P".to_string(), grid(0.0, 240.0, 17));
                times.insert("M".to_string(), grid(7.5, 232.5, 16));
                let scenario = ScenarioConfig {
                    system_name: sys.name.clone(),
                    n_obs: 100,
                    observation_times: times,
                    noise: NoiseModel::lognormal(0.15),
                    masked_components: Vec::new(),
                    seed: 0,
                };
                Self::assemble(
                    name,
                    &sys,
                    scenario,
                    pinn(1.0, 0.0, 5000, 1e-4, 30_000),
                    WganConfig::new(1.0, 5e-5, 100_000, 0),
                )?
            }
            "lorenz_ns" | "lorenz_nsmc" => {
                let sys = make_system("lorenz")?;
                let observed: &[&str] = if name == "lorenz_ns" {
                    &["X", "Y", "Z"]
                } else {
                    &["X"]
                };
                let scenario = ScenarioConfig::uniform(
                    &sys,
                    observed,
                    &grid(0.0, 2.0, 9),
                    100,
                    NoiseModel::additive(0.1),
                    0,
                );
                Self::assemble(
                    name,
                    &sys,
                    scenario,
                    pinn(1.0, 0.0, 2000, 1e-4, 30_000),
                    WganConfig::new(1.0, 1e-5, 100_000, 0),
                )?
            }
            "toy" => {
                let sys = OdeSystem::exponential_decay();
                let scenario = ScenarioConfig::uniform(
                    &sys,
                    &["y"],
                    &grid(0.0, 2.0, 11),
                    100,
                    NoiseModel::additive(0.05),
                    0,
                );
                let mut solver = pinn(1.0, 0.0, 100, 1e-3, 5_000);
                solver.t_col = 41;
                solver.hyper_hidden = vec![32, 32, 32];
                solver.main_hidden = vec![16, 16];
                let mut gan = WganConfig::new(0.1, 3e-5, 20_000, 0);
                gan.critic_steps = 10;
                gan.generator_p_hidden = vec![32, 32, 32];
                gan.generator_e_hidden = vec![32, 32, 32];
                gan.discriminator_hidden = vec![64, 64, 64];
                let mut cfg = Self::assemble(name, &sys, scenario, solver, gan)?;
                // Asymmetric around p = 1 so the box midpoint is not the answer.
                cfg.bounds = ParamBounds::new(vec![0.5], vec![2.0])?;
                cfg
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}`; available: {}",
                    PRESETS.join(", ")
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn assemble(
        name: &str,
        sys: &OdeSystem,
        scenario: ScenarioConfig,
        pinn: PinnTrainConfig,
        gan: WganConfig,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            system: sys.name.clone(),
            scenario,
            bounds: ParamBounds::scaled(&sys.true_params.0, 0.5, 1.5)?,
            pinn,
            gan,
            eval_points: DEFAULT_EVAL_POINTS,
            seed: 0,
        }
        .with_seed(0))
    }

    /// Sets the master seed and re-derives every stage seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.scenario.seed = stage_seed(seed, "datagen");
        self.pinn.seed = stage_seed(seed, "solver");
        self.gan.seed = stage_seed(seed, "gan");
        self
    }

    /// Seed of the solver's training-set draw.
    pub fn training_set_seed(&self) -> u64 {
        stage_seed(self.seed, "training_set")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn system(&self) -> Result<OdeSystem> {
        resolve_system(&self.system)
    }

    pub fn validate(&self) -> Result<()> {
        let sys = self.system()?;
        if self.scenario.system_name != sys.name {
            return Err(Error::Config(format!(
                "scenario names system `{}` but the run uses `{}`",
                self.scenario.system_name, sys.name
            )));
        }
        if self.bounds.dim() != sys.d_p() {
            return Err(Error::Config(format!(
                "bounds have {} entries, `{}` has {} parameters",
                self.bounds.dim(),
                sys.name,
                sys.d_p()
            )));
        }
        for (comp, times) in &self.scenario.observation_times {
            sys.component_index(comp)?;
            times.check_within(sys.horizon)?;
        }
        if self.scenario.n_obs < 2 {
            return Err(Error::Config("at least two replicates are needed".into()));
        }
        if self.eval_points < 2 {
            return Err(Error::Config("eval_points must be at least 2".into()));
        }
        self.pinn.validate()?;
        self.gan.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid() {
        for name in PRESETS {
            let cfg = RunConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn master_seed_fans_out() {
        let a = RunConfig::preset("fn_ns").unwrap().with_seed(7);
        let b = RunConfig::preset("fn_ns").unwrap().with_seed(8);
        assert_eq!(a.seed, 7);
        assert_ne!(a.scenario.seed, b.scenario.seed);
        assert_ne!(a.pinn.seed, b.pinn.seed);
        assert_ne!(a.gan.seed, b.gan.seed);
        assert_ne!(a.training_set_seed(), b.training_set_seed());
        assert_eq!(a, RunConfig::preset("fn_ns").unwrap().with_seed(7));
    }

    #[test]
    fn hes1_schedule_is_asynchronous() {
        let cfg = RunConfig::preset("hes1_nsmc").unwrap();
        assert_eq!(cfg.scenario.observation_times["P"].len(), 17);
        assert_eq!(cfg.scenario.observation_times["M"].len(), 16);
    }
}
