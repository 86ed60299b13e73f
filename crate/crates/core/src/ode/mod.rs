//! Benchmark dynamical systems and a fixed-step RK4 integrator.

pub mod algebra;
mod rk4;
mod systems;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use algebra::{Algebra, Real};
pub use rk4::{integrate_from_origin, integrate_rk4};
pub use systems::{
    eval_rhs, log_transform_system, make_system, CustomDynamics, Dynamics, OdeSystem, REGISTRY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Strictly increasing, nonnegative time points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid(Vec<f64>);

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time point".into()));
        }
        if points[0] < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first point {} is negative",
                points[0]
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self(points))
    }

    /// `n` evenly spaced points from `start` to `end` inclusive.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        match n {
            0 => Err(Error::InvalidGrid("empty grid".into())),
            1 => Self::new(vec![start]),
            _ => {
                let step = (end - start) / (n - 1) as f64;
                let mut pts: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
                pts[n - 1] = end;
                Self::new(pts)
            }
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.0.last().expect("grids are nonempty")
    }

    pub fn check_within(&self, horizon: f64) -> Result<()> {
        if self.last() > horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidGrid(format!(
                "last point {} exceeds horizon {horizon}",
                self.last()
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.0
    }
}

/// States of one parameter vector on a time grid (`states[k]` at `grid[k]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
    pub params: ParamVector,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Values of one component over the grid.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|s| s[i]).collect()
    }

    /// Exponentiates every state (log-space trajectories to natural scale).
    pub fn exponentiated(&self) -> Trajectory {
        Trajectory {
            grid: self.grid.clone(),
            states: self
                .states
                .iter()
                .map(|s| s.iter().map(|v| v.exp()).collect())
                .collect(),
            params: self.params.clone(),
        }
    }

    /// Per-component root-mean-square difference over the shared grid.
    pub fn rmse_against(&self, other: &Trajectory) -> Result<Vec<f64>> {
        if self.grid != other.grid {
            return Err(Error::Mismatch(
                "trajectories are defined on different grids".into(),
            ));
        }
        if self.dim() != other.dim() {
            return Err(Error::dim("trajectory rmse", self.dim(), other.dim()));
        }
        let n = self.states.len() as f64;
        Ok((0..self.dim())
            .map(|i| {
                let ss: f64 = self
                    .states
                    .iter()
                    .zip(&other.states)
                    .map(|(a, b)| (a[i] - b[i]).powi(2))
                    .sum();
                (ss / n).sqrt()
            })
            .collect())
    }

    /// CSV with header `t,<names...>` and 17 significant digits per value.
    pub fn to_csv(&self, names: &[String]) -> Result<String> {
        if names.len() != self.dim() {
            return Err(Error::dim("trajectory csv header", self.dim(), names.len()));
        }
        let mut out = String::from("t");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (t, s) in self.grid.points().iter().zip(&self.states) {
            write!(out, "{t:.16e}").expect("string write");
            for v in s {
                write!(out, ",{v:.16e}").expect("string write");
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        std::fs::write(path, self.to_csv(names)?)?;
        Ok(())
    }
}
