//! Synthetic noisy, sparse, and partially observed datasets.
//!
//! Observations are flattened component-major, then time-major: for each
//! observed component in ascending index order, every scheduled time at which
//! that component is observed, in time order. This order is shared by the
//! replicate rows, the noise generator output, and the discriminator input.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{integrate_from_origin, OdeSystem, TimeGrid, Trajectory};
use crate::rng::{derive_indexed_seed, standard_normal, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    AdditiveGaussian,
    MultiplicativeLognormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub sigma: f64,
}

impl NoiseModel {
    pub fn additive(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::AdditiveGaussian,
            sigma,
        }
    }

    pub fn lognormal(sigma: f64) -> Self {
        Self {
            kind: NoiseKind::MultiplicativeLognormal,
            sigma,
        }
    }
}

/// Merged observation times with a per-component mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSchedule {
    /// Observed system component indices, ascending.
    pub observed_components: Vec<usize>,
    pub times: TimeGrid,
    /// `mask[k][j]`: component `observed_components[k]` is observed at `times[j]`.
    pub mask: Vec<Vec<bool>>,
}

impl ObservationSchedule {
    /// Number of observed (component, time) pairs.
    pub fn flat_dim(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    /// `(component index, time index)` of every flat entry, in flattening order.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.flat_dim());
        for (k, &comp) in self.observed_components.iter().enumerate() {
            for (j, &m) in self.mask[k].iter().enumerate() {
                if m {
                    out.push((comp, j));
                }
            }
        }
        out
    }

    /// Flat observation vector extracted from states on `self.times`.
    pub fn flatten(&self, states: &[Vec<f64>]) -> Vec<f64> {
        self.entries()
            .into_iter()
            .map(|(i, j)| states[j][i])
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.observed_components.is_empty() {
            return Err(Error::config("schedule observes no components"));
        }
        if self.mask.len() != self.observed_components.len()
            || self.mask.iter().any(|row| row.len() != self.times.len())
        {
            return Err(Error::config(
                "schedule mask does not match components x times",
            ));
        }
        if self.flat_dim() == 0 {
            return Err(Error::config("schedule has no observed entries"));
        }
        Ok(())
    }
}

/// Sorted union of the per-component grids (exact-equality deduplication).
pub fn merged_schedule(per_component: &BTreeMap<usize, TimeGrid>) -> Result<ObservationSchedule> {
    if per_component.is_empty() {
        return Err(Error::config("no observed components"));
    }
    let mut all: Vec<f64> = per_component
        .values()
        .flat_map(|g| g.points().iter().copied())
        .collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let times = TimeGrid::new(all)?;
    let mask = per_component
        .values()
        .map(|g| {
            times
                .points()
                .iter()
                .map(|t| g.points().contains(t))
                .collect()
        })
        .collect();
    let schedule = ObservationSchedule {
        observed_components: per_component.keys().copied().collect(),
        times,
        mask,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub system_name: String,
    pub n_obs: usize,
    /// Observation times keyed by component name.
    pub observation_times: BTreeMap<String, TimeGrid>,
    pub noise: NoiseModel,
    /// Components dropped after generation (empty for NS data).
    #[serde(default)]
    pub masked_components: Vec<String>,
    pub seed: u64,
}

impl ScenarioConfig {
    /// Same observation times for every listed component.
    pub fn uniform(
        system: &OdeSystem,
        components: &[&str],
        grid: &TimeGrid,
        n_obs: usize,
        noise: NoiseModel,
        seed: u64,
    ) -> Self {
        Self {
            system_name: system.name.clone(),
            n_obs,
            observation_times: components
                .iter()
                .map(|c| (c.to_string(), grid.clone()))
                .collect(),
            noise,
            masked_components: Vec::new(),
            seed,
        }
    }

    pub fn with_masked(mut self, masked: &[&str]) -> Self {
        self.masked_components = masked.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: ScenarioConfig,
    pub component_names: Vec<String>,
    pub schedule: ObservationSchedule,
    /// `N_o` rows of `flat_dim` observations.
    pub replicates: Vec<Vec<f64>>,
    /// True states on `schedule.times`, every component, in the system's state
    /// space (log space for log-transformed systems).
    pub true_trajectory: Trajectory,
}

impl Dataset {
    pub fn n_obs(&self) -> usize {
        self.replicates.len()
    }

    pub fn flat_dim(&self) -> usize {
        self.schedule.flat_dim()
    }

    pub fn system_name(&self) -> &str {
        &self.meta.system_name
    }

    /// Noise-free observation vector in flattening order.
    pub fn masked_truth(&self) -> Vec<f64> {
        self.schedule.flatten(&self.true_trajectory.states)
    }

    /// Realized observation errors `e^o = Y^o − truth`.
    pub fn observed_errors(&self) -> Vec<Vec<f64>> {
        let truth = self.masked_truth();
        self.replicates
            .iter()
            .map(|row| row.iter().zip(&truth).map(|(y, t)| y - t).collect())
            .collect()
    }

    /// Row-major `N_o × flat_dim` copy of the replicates.
    pub fn replicate_matrix(&self) -> Vec<f64> {
        self.replicates.iter().flatten().copied().collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("replicate,component,t,value\n");
        let entries = self.schedule.entries();
        let times = self.schedule.times.points();
        for (n, row) in self.replicates.iter().enumerate() {
            for (&(i, j), v) in entries.iter().zip(row) {
                writeln!(
                    out,
                    "{n},{},{:.16e},{v:.16e}",
                    self.component_names[i], times[j]
                )
                .expect("string write");
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data: Dataset = serde_json::from_slice(&std::fs::read(path)?)?;
        data.validate()?;
        Ok(data)
    }

    fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.replicates.is_empty() {
            return Err(Error::config("dataset has no replicates"));
        }
        let flat = self.flat_dim();
        for (n, row) in self.replicates.iter().enumerate() {
            if row.len() != flat {
                return Err(Error::dim(format!("replicate {n}"), flat, row.len()));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    component: format!("replicate {n}"),
                    context: "dataset".into(),
                });
            }
        }
        if self.true_trajectory.grid != self.schedule.times {
            return Err(Error::config("true trajectory grid differs from schedule"));
        }
        Ok(())
    }
}

/// Integrates the true system and draws `N_o` noisy replicates.
///
/// Replicate `n` draws its errors from its own sub-stream, so the dataset
/// does not depend on generation order.
pub fn generate_dataset(system: &OdeSystem, scenario: &ScenarioConfig) -> Result<Dataset> {
    if scenario.system_name != system.name {
        return Err(Error::Mismatch(format!(
            "scenario is for `{}`, system is `{}`",
            scenario.system_name, system.name
        )));
    }
    if scenario.n_obs == 0 {
        return Err(Error::config("n_obs must be at least 1"));
    }
    if !(scenario.noise.sigma >= 0.0 && scenario.noise.sigma.is_finite()) {
        return Err(Error::config(format!(
            "noise sigma must be nonnegative, got {}",
            scenario.noise.sigma
        )));
    }
    let mut per_component = BTreeMap::new();
    for (name, grid) in &scenario.observation_times {
        grid.check_within(system.horizon)?;
        per_component.insert(system.component_index(name)?, grid.clone());
    }
    let schedule = merged_schedule(&per_component)?;
    let truth = integrate_from_origin(system, &system.true_params, &schedule.times, None)?;
    let clean = schedule.flatten(&truth.states);

    let multiplicative = scenario.noise.kind == NoiseKind::MultiplicativeLognormal;
    if multiplicative && !system.log_space {
        if let Some(k) = clean.iter().position(|&v| v <= 0.0) {
            let (i, j) = schedule.entries()[k];
            return Err(Error::Numerical(format!(
                "multiplicative noise on nonpositive true value {} of `{}` at t = {}",
                clean[k],
                system.component_names[i],
                schedule.times.points()[j]
            )));
        }
    }

    let sigma = scenario.noise.sigma;
    let replicates = (0..scenario.n_obs)
        .map(|n| {
            let mut rng = stream(derive_indexed_seed(scenario.seed, "replicate", n));
            clean
                .iter()
                .map(|&y| {
                    let eps = sigma * standard_normal(&mut rng);
                    // Log-space states already carry log y, where the
                    // lognormal factor becomes an additive Gaussian error.
                    if multiplicative && !system.log_space {
                        y * eps.exp()
                    } else {
                        y + eps
                    }
                })
                .collect()
        })
        .collect();

    let dataset = Dataset {
        meta: scenario.clone(),
        component_names: system.component_names.clone(),
        schedule,
        replicates,
        true_trajectory: truth,
    };
    if scenario.masked_components.is_empty() {
        return Ok(dataset);
    }
    let masked = scenario
        .masked_components
        .iter()
        .map(|name| system.component_index(name))
        .collect::<Result<Vec<_>>>()?;
    let keep: Vec<usize> = dataset
        .schedule
        .observed_components
        .iter()
        .copied()
        .filter(|i| !masked.contains(i))
        .collect();
    mask_components(&dataset, &keep)
}

/// Keeps only the listed components. The merged times and the stored true
/// trajectory are unchanged.
pub fn mask_components(dataset: &Dataset, keep: &[usize]) -> Result<Dataset> {
    if keep.is_empty() {
        return Err(Error::config("cannot mask every observed component"));
    }
    let current = &dataset.schedule.observed_components;
    if let Some(bad) = keep.iter().find(|i| !current.contains(i)) {
        return Err(Error::config(format!(
            "component {bad} is not observed in this dataset (observed: {current:?})"
        )));
    }
    let kept_rows: Vec<usize> = current
        .iter()
        .enumerate()
        .filter(|(_, i)| keep.contains(i))
        .map(|(k, _)| k)
        .collect();

    // Flat positions to retain, in the original flattening order.
    let mut retain = Vec::new();
    let mut pos = 0;
    for (k, row) in dataset.schedule.mask.iter().enumerate() {
        for &m in row {
            if m {
                if kept_rows.contains(&k) {
                    retain.push(pos);
                }
                pos += 1;
            }
        }
    }

    let schedule = ObservationSchedule {
        observed_components: kept_rows.iter().map(|&k| current[k]).collect(),
        times: dataset.schedule.times.clone(),
        mask: kept_rows
            .iter()
            .map(|&k| dataset.schedule.mask[k].clone())
            .collect(),
    };
    let replicates = dataset
        .replicates
        .iter()
        .map(|row| retain.iter().map(|&p| row[p]).collect())
        .collect();
    let mut meta = dataset.meta.clone();
    for (i, name) in dataset.component_names.iter().enumerate() {
        if current.contains(&i) && !keep.contains(&i) && !meta.masked_components.contains(name) {
            meta.masked_components.push(name.clone());
        }
    }
    Ok(Dataset {
        meta,
        component_names: dataset.component_names.clone(),
        schedule,
        replicates,
        true_trajectory: dataset.true_trajectory.clone(),
    })
}
