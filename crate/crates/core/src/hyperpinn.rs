//! Hypernetwork-driven surrogate solver.
//!
//! A hypernetwork `h` maps a normalized parameter vector to the flat weights
//! `θ_m` of a small main network `m(t)`, trained so that `m(t; h(p))` tracks
//! the RK4 solution for every `p` in a bounds box. Both networks live in one
//! graph: each distinct `p` of a batch yields one row of `θ_m`, and the main
//! network reads its weights from those rows through grouped affine layers.

use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    time_derivative, AdamConfig, AdamState, Graph, Mlp, MlpSpec, NetGraph, NodeId, Segment, Tensor,
};
use crate::error::{Error, Result};
use crate::ode::{integrate_from_origin, OdeSystem, ParamVector, TimeGrid, Trajectory};
use crate::rng::{content_hash, derive_seed, stream};

/// Closed box `[lower, upper]` of admissible parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::dim("parameter bounds", lower.len(), upper.len()));
        }
        for (k, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::config(format!(
                    "bounds for parameter {k} must satisfy lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo·p, hi·p]` componentwise (endpoints swapped for negative entries).
    pub fn scaled(p: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let a: Vec<f64> = p.iter().map(|v| v * lo).collect();
        let b: Vec<f64> = p.iter().map(|v| v * hi).collect();
        let lower = a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect();
        let upper = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
        Self::new(lower, upper)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    pub fn halfwidth(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| 0.5 * (b - a))
            .collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Affine map of the box onto `[−1, 1]^d`.
    pub fn normalize(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.midpoint().iter().zip(self.halfwidth()))
            .map(|(v, (m, h))| (v - m) / h)
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect()
    }
}

/// `n` i.i.d. draws from the uniform distribution on the box.
pub fn sample_parameters(bounds: &ParamBounds, n: usize, seed: u64) -> Vec<ParamVector> {
    let mut rng = stream(seed);
    (0..n)
        .map(|_| ParamVector(bounds.sample(&mut rng)))
        .collect()
}

/// RK4 solutions for sampled parameters on a uniform collocation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    pub system_name: String,
    pub bounds: ParamBounds,
    pub seed: u64,
    pub params: Vec<ParamVector>,
    pub collocation: TimeGrid,
    /// `solutions[k][j][i]`: component `i` at collocation point `j` for `params[k]`.
    pub solutions: Vec<Vec<Vec<f64>>>,
    /// Number of draws replaced because integration blew up.
    pub resampled: usize,
}

impl TrainingSet {
    pub fn n_p(&self) -> usize {
        self.params.len()
    }

    pub fn t_col(&self) -> usize {
        self.collocation.len()
    }

    pub fn content_hash(&self) -> String {
        let params = self.params.iter().flat_map(|p| p.0.iter().copied());
        let grid = self.collocation.points().iter().copied();
        let sols = self.solutions.iter().flatten().flatten().copied();
        content_hash(params.chain(grid).chain(sols))
    }
}

/// Integrates the system from its initial state for `n_p` uniform draws.
///
/// A draw whose integration blows up is replaced by a fresh draw; more than
/// 10% replacements abort.
pub fn build_training_set(
    system: &OdeSystem,
    bounds: &ParamBounds,
    n_p: usize,
    t_col: usize,
    seed: u64,
) -> Result<TrainingSet> {
    if bounds.dim() != system.d_p() {
        return Err(Error::dim(
            "training-set bounds",
            system.d_p(),
            bounds.dim(),
        ));
    }
    if n_p == 0 || t_col < 2 {
        return Err(Error::config(format!(
            "training set needs n_p >= 1 and t_col >= 2, got {n_p} and {t_col}"
        )));
    }
    let collocation = TimeGrid::uniform(0.0, system.horizon, t_col)?;
    let mut rng = stream(seed);
    let mut params = Vec::with_capacity(n_p);
    let mut solutions = Vec::with_capacity(n_p);
    let mut resampled = 0;
    while params.len() < n_p {
        let p = ParamVector(bounds.sample(&mut rng));
        match integrate_from_origin(system, &p, &collocation, None) {
            Ok(traj) => {
                params.push(p);
                solutions.push(traj.states);
            }
            Err(Error::BlowUp { time }) => {
                resampled += 1;
                warn!(
                    "{}: integration blew up at t = {time} for p = {:?}; resampling",
                    system.name, p.0
                );
                if resampled * 10 > n_p {
                    return Err(Error::Numerical(format!(
                        "{}: {resampled} of {n_p} parameter draws blew up; shrink the bounds",
                        system.name
                    )));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainingSet {
        system_name: system.name.clone(),
        bounds: bounds.clone(),
        seed,
        params,
        collocation,
        solutions,
        resampled,
    })
}

fn cache_key(
    system: &OdeSystem,
    bounds: &ParamBounds,
    n_p: usize,
    t_col: usize,
    seed: u64,
) -> String {
    let descriptor = serde_json::json!({
        "system": system.name,
        "bounds": bounds,
        "n_p": n_p,
        "t_col": t_col,
        "seed": seed,
        "horizon": system.horizon,
        "initial_state": system.initial_state,
        "steps_per_unit": system.steps_per_unit,
    });
    let hash = content_hash(descriptor.to_string().bytes().map(f64::from));
    format!("{}-{}.json", system.name, &hash[..16])
}

/// Builds the training set, reusing a copy cached under `cache_dir` when one
/// exists for the same system, bounds, sizes, and seed. Returns whether the
/// cache was hit.
pub fn cached_training_set(
    cache_dir: Option<&Path>,
    system: &OdeSystem,
    bounds: &ParamBounds,
    n_p: usize,
    t_col: usize,
    seed: u64,
) -> Result<(TrainingSet, bool)> {
    let Some(dir) = cache_dir else {
        return Ok((build_training_set(system, bounds, n_p, t_col, seed)?, false));
    };
    let path: PathBuf = dir.join(cache_key(system, bounds, n_p, t_col, seed));
    if path.exists() {
        let set: TrainingSet = serde_json::from_slice(&std::fs::read(&path)?)?;
        info!("training-set cache hit: {}", path.display());
        return Ok((set, true));
    }
    let set = build_training_set(system, bounds, n_p, t_col, seed)?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(&path, serde_json::to_vec(&set)?)?;
    info!("training set cached at {}", path.display());
    Ok((set, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_p: usize,
    pub t_col: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hyper_hidden: Vec<usize>,
    pub main_hidden: Vec<usize>,
    /// Loss history is recorded every `log_every` epochs and at the last one.
    pub log_every: usize,
    pub fidelity_draws: usize,
    pub fidelity_threshold: f64,
}

impl PinnTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::config(format!(
                "loss weights must be nonnegative with a positive sum, got alpha = {}, beta = {}",
                self.alpha, self.beta
            )));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size and log_every must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Fixed affine maps around the networks: `t ↦ t_scale·t + t_shift` on the
/// main-network input and `y = output_center + output_scale ⊙ m` on its output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub p_center: Vec<f64>,
    pub p_halfwidth: Vec<f64>,
    pub t_scale: f64,
    pub t_shift: f64,
    pub output_center: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalization {
    fn identity_output(&self) -> bool {
        self.output_center.iter().all(|&c| c == 0.0) && self.output_scale.iter().all(|&s| s == 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    /// Absent when the physics term is disabled.
    pub physics: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub loss: LossParts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub draws: usize,
    /// Median over draws of the per-component RMSE against RK4.
    pub median_rmse: Vec<f64>,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub config: PinnTrainConfig,
    pub final_loss: LossParts,
    pub loss_history: Vec<LossRecord>,
    pub training_set_hash: String,
    pub resampled: usize,
    pub fidelity: Option<FidelityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperPinnModel {
    pub system_name: String,
    pub hyper_spec: MlpSpec,
    pub main_spec: MlpSpec,
    pub theta_h: Vec<f64>,
    pub bounds: ParamBounds,
    pub horizon: f64,
    pub log_space: bool,
    pub normalization: Normalization,
    #[serde(default)]
    pub metadata: Option<TrainingMetadata>,
}

/// Rows `[p_index · t_col + j]` grouped into runs sharing one parameter.
struct GroupedBatch {
    groups: Vec<usize>,
    segments: Rc<Vec<Segment>>,
    times: Vec<f64>,
    rows: Vec<(usize, usize)>,
}

fn group_pairs(pairs: &[(usize, usize)], set: &TrainingSet) -> Result<GroupedBatch> {
    if pairs.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let mut rows = pairs.to_vec();
    for &(k, j) in &rows {
        if k >= set.n_p() || j >= set.t_col() {
            return Err(Error::config(format!(
                "batch entry ({k}, {j}) outside the training set"
            )));
        }
    }
    rows.sort_unstable();
    let mut groups = Vec::new();
    let mut segments = Vec::new();
    for (r, &(k, _)) in rows.iter().enumerate() {
        if groups.last() != Some(&k) {
            groups.push(k);
            segments.push(Segment {
                group: groups.len() - 1,
                start: r,
                len: 0,
            });
        }
        segments.last_mut().expect("segment opened").len += 1;
    }
    let times = rows
        .iter()
        .map(|&(_, j)| set.collocation.points()[j])
        .collect();
    Ok(GroupedBatch {
        groups,
        segments: Rc::new(segments),
        times,
        rows,
    })
}

pub(crate) fn tile_rows(n: usize, row: &[f64]) -> Tensor {
    let data = (0..n).flat_map(|_| row.iter().copied()).collect();
    Tensor::from_vec(n, row.len(), data).expect("tile size")
}

/// Emulator state and (optionally) its time derivative inside a graph.
pub(crate) struct EmulatorNodes {
    pub state: NodeId,
    pub rate: Option<NodeId>,
}

impl HyperPinnModel {
    /// Untrained model. The hypernetwork's output bias starts at a freshly
    /// initialized main network, so every `p` begins from a usable `θ_m`.
    pub fn init(
        system: &OdeSystem,
        bounds: ParamBounds,
        hyper_hidden: &[usize],
        main_hidden: &[usize],
        output_center: Vec<f64>,
        output_scale: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        if bounds.dim() != system.d_p() {
            return Err(Error::dim("model bounds", system.d_p(), bounds.dim()));
        }
        if output_center.len() != system.d_y() || output_scale.len() != system.d_y() {
            return Err(Error::dim(
                "output normalization",
                system.d_y(),
                output_scale.len(),
            ));
        }
        let main_spec = MlpSpec::new(1, main_hidden, system.d_y())?;
        let hyper_spec = MlpSpec::new(system.d_p(), hyper_hidden, main_spec.param_count())?;
        let mut rng = stream(seed);
        let mut hyper = Mlp::init(hyper_spec.clone(), &mut rng);
        let main_init = Mlp::init(main_spec.clone(), &mut rng).to_flat();
        hyper
            .params
            .last_mut()
            .expect("output bias")
            .data_mut()
            .copy_from_slice(&main_init);
        Ok(Self {
            system_name: system.name.clone(),
            normalization: Normalization {
                p_center: bounds.midpoint(),
                p_halfwidth: bounds.halfwidth(),
                t_scale: 2.0 / system.horizon,
                t_shift: -1.0,
                output_center,
                output_scale,
            },
            hyper_spec,
            main_spec,
            theta_h: hyper.to_flat(),
            bounds,
            horizon: system.horizon,
            log_space: system.log_space,
            metadata: None,
        })
    }

    pub fn hyper(&self) -> Result<Mlp> {
        Mlp::from_flat(self.hyper_spec.clone(), &self.theta_h)
    }

    pub fn d_p(&self) -> usize {
        self.hyper_spec.input_dim
    }

    pub fn d_y(&self) -> usize {
        self.main_spec.output_dim
    }

    pub fn normalize_params(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(
                self.normalization
                    .p_center
                    .iter()
                    .zip(&self.normalization.p_halfwidth),
            )
            .map(|(v, (c, h))| (v - c) / h)
            .collect()
    }

    /// Flat main-network weights for `p`.
    pub fn emit_weights(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.d_p() {
            return Err(Error::dim("emit_weights parameters", self.d_p(), p.len()));
        }
        if !self.bounds.contains(p) {
            warn!("parameter {p:?} lies outside the training box");
        }
        let out = self.hyper()?.eval(&Tensor::row(&self.normalize_params(p)));
        Ok(out.into_vec())
    }

    /// Main network plus output map over parameter groups in a graph.
    ///
    /// `p_norm` holds one normalized parameter row per group, `t` one raw time
    /// per row, and `segments` assigns rows to groups.
    pub(crate) fn emulator(
        &self,
        g: &mut Graph,
        hyper: &NetGraph,
        p_norm: NodeId,
        t: NodeId,
        segments: Rc<Vec<Segment>>,
        with_rate: bool,
    ) -> EmulatorNodes {
        let theta = hyper.forward(g, p_norm);
        let main = NetGraph::grouped(&self.main_spec, theta, segments)
            .with_input_normalization(self.normalization.t_scale, self.normalization.t_shift);
        let (raw, raw_rate) = if with_rate {
            let dual = time_derivative(g, &main, t).expect("time input is a column");
            (dual.primal, Some(dual.tangent))
        } else {
            (main.forward(g, t), None)
        };
        if self.normalization.identity_output() {
            return EmulatorNodes {
                state: raw,
                rate: raw_rate,
            };
        }
        let n = g.shape(t).0;
        let scale = g.constant(tile_rows(n, &self.normalization.output_scale));
        let center = g.constant(Tensor::row(&self.normalization.output_center));
        let scaled = g.mul(raw, scale);
        let state = g.add_row(scaled, center);
        let rate = raw_rate.map(|r| g.mul(r, scale));
        EmulatorNodes { state, rate }
    }

    /// Emulated states (in the model's state space) at `times` for `p`.
    pub fn emulate_states(&self, p: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
        if p.len() != self.d_p() {
            return Err(Error::dim("solve parameters", self.d_p(), p.len()));
        }
        if !self.bounds.contains(p) {
            warn!("parameter {p:?} lies outside the training box");
        }
        let hyper = self.hyper()?;
        let mut g = Graph::new();
        let bound = hyper.bind(&mut g, false);
        let p_norm = g.constant(Tensor::row(&self.normalize_params(p)));
        let t = g.constant(Tensor::column(times));
        let segments = Rc::new(vec![Segment {
            group: 0,
            start: 0,
            len: times.len(),
        }]);
        let out = self.emulator(&mut g, &bound.net, p_norm, t, segments, false);
        let v = g.value(out.state);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }

    /// Emulated trajectory on `times`, exponentiated for log-space systems.
    pub fn solve(&self, p: &ParamVector, times: &TimeGrid) -> Result<Trajectory> {
        times.check_within(self.horizon)?;
        let states = self.emulate_states(&p.0, times.points())?;
        let traj = Trajectory {
            grid: times.clone(),
            states,
            params: p.clone(),
        };
        Ok(if self.log_space {
            traj.exponentiated()
        } else {
            traj
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if model.hyper_spec.output_dim != model.main_spec.param_count() {
            return Err(Error::Mismatch(format!(
                "hypernetwork emits {} weights but the main network has {}",
                model.hyper_spec.output_dim,
                model.main_spec.param_count()
            )));
        }
        if model.theta_h.len() != model.hyper_spec.param_count() {
            return Err(Error::dim(
                "theta_h",
                model.hyper_spec.param_count(),
                model.theta_h.len(),
            ));
        }
        Ok(model)
    }
}

/// Evaluates the raw main network with flat weights `theta_m` at time `t`,
/// fed as `2t/T − 1`.
pub fn main_forward(
    theta_m: &[f64],
    main_spec: &MlpSpec,
    horizon: f64,
    t: f64,
) -> Result<Vec<f64>> {
    let mlp = Mlp::from_flat(main_spec.clone(), theta_m)?;
    Ok(mlp
        .eval(&Tensor::scalar(2.0 * t / horizon - 1.0))
        .into_vec())
}

struct BatchGraph {
    graph: Graph,
    weights: Vec<NodeId>,
    data: NodeId,
    physics: Option<NodeId>,
    total: NodeId,
}

/// Data, physics, and weighted losses for one batch of `(p index, time index)`
/// pairs. `beta = 0` skips the physics graph.
fn batch_graph(
    model: &HyperPinnModel,
    hyper: &Mlp,
    system: &OdeSystem,
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    alpha: f64,
    beta: f64,
    n: usize,
) -> Result<BatchGraph> {
    let batch = group_pairs(pairs, set)?;
    let d_y = model.d_y();
    let mut g = Graph::new();
    let bound = hyper.bind(&mut g, true);
    let p_rows: Vec<f64> = batch
        .groups
        .iter()
        .flat_map(|&k| model.normalize_params(&set.params[k].0))
        .collect();
    let p_norm = g.constant(Tensor::from_vec(batch.groups.len(), model.d_p(), p_rows)?);
    let t = g.constant(Tensor::column(&batch.times));
    let with_physics = beta > 0.0;
    let out = model.emulator(
        &mut g,
        &bound.net,
        p_norm,
        t,
        batch.segments.clone(),
        with_physics,
    );

    let target: Vec<f64> = batch
        .rows
        .iter()
        .flat_map(|&(k, j)| set.solutions[k][j].iter().copied())
        .collect();
    let target = g.constant(Tensor::from_vec(batch.rows.len(), d_y, target)?);
    let diff = g.sub(out.state, target);
    let sq = g.square(diff);
    let sum = g.sum(sq);
    let data = g.scale(sum, 1.0 / n as f64);

    let physics = if let Some(rate) = out.rate {
        let cols: Vec<NodeId> = (0..d_y).map(|i| g.slice_cols(out.state, i, 1)).collect();
        let p_cols: Vec<NodeId> = (0..model.d_p())
            .map(|c| {
                let col: Vec<f64> = batch
                    .rows
                    .iter()
                    .map(|&(k, _)| set.params[k].0[c])
                    .collect();
                g.constant(Tensor::column(&col))
            })
            .collect();
        let f_cols = system.rhs_generic(&mut g, &cols, &p_cols);
        let f = g.concat_cols(&f_cols);
        let resid = g.sub(rate, f);
        let sq = g.square(resid);
        let sum = g.sum(sq);
        Some(g.scale(sum, 1.0 / n as f64))
    } else {
        None
    };

    let weighted = g.scale(data, alpha);
    let total = match physics {
        Some(ph) => {
            let wp = g.scale(ph, beta);
            g.add(weighted, wp)
        }
        None => weighted,
    };
    Ok(BatchGraph {
        graph: g,
        weights: bound.nodes,
        data,
        physics,
        total,
    })
}

/// Rows per evaluation chunk. A full batch of activations overflows the L2
/// cache, so the batch is evaluated piecewise (split at parameter-group
/// boundaries) and the chunk losses and gradients are summed in order.
const CHUNK_ROWS: usize = 1024;

fn batch_eval(
    model: &HyperPinnModel,
    hyper: &Mlp,
    system: &OdeSystem,
    set: &TrainingSet,
    pairs: &[(usize, usize)],
    alpha: f64,
    beta: f64,
    with_grad: bool,
) -> Result<(LossParts, Option<Vec<Tensor>>)> {
    let mut rows = pairs.to_vec();
    rows.sort_unstable();
    let n = rows.len();
    let mut lp = LossParts {
        total: 0.0,
        data: 0.0,
        physics: (beta > 0.0).then_some(0.0),
    };
    let mut grads: Option<Vec<Tensor>> = None;
    let mut start = 0;
    while start < n {
        let mut end = (start + CHUNK_ROWS).min(n);
        while end < n && end > start && rows[end].0 == rows[end - 1].0 {
            end += 1;
        }
        let bg = batch_graph(model, hyper, system, set, &rows[start..end], alpha, beta, n)?;
        let part = parts(&bg);
        lp.total += part.total;
        lp.data += part.data;
        if let (Some(acc), Some(p)) = (lp.physics.as_mut(), part.physics) {
            *acc += p;
        }
        if with_grad {
            let gr = bg.graph.grad(bg.total)?;
            let chunk: Vec<Tensor> = bg.weights.iter().map(|&w| gr.get(w)).collect();
            match grads.as_mut() {
                None => grads = Some(chunk),
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(&chunk) {
                        a.add_assign(c);
                    }
                }
            }
        }
        start = end;
    }
    Ok((lp, grads))
}

fn parts(bg: &BatchGraph) -> LossParts {
    LossParts {
        total: bg.graph.value(bg.total).item(),
        data: bg.graph.value(bg.data).item(),
        physics: bg.physics.map(|p| bg.graph.value(p).item()),
    }
}

fn check_model_system(model: &HyperPinnModel, system: &OdeSystem, set: &TrainingSet) -> Result<()> {
    if model.system_name != system.name || set.system_name != system.name {
        return Err(Error::Mismatch(format!(
            "model `{}`, training set `{}`, system `{}`",
            model.system_name, set.system_name, system.name
        )));
    }
    Ok(())
}

/// Mean squared Euclidean distance between emulator and stored solutions.
pub fn loss_data(
    model: &HyperPinnModel,
    system: &OdeSystem,
    set: &TrainingSet,
    batch: &[(usize, usize)],
) -> Result<f64> {
    check_model_system(model, system, set)?;
    let (lp, _) = batch_eval(model, &model.hyper()?, system, set, batch, 1.0, 0.0, false)?;
    Ok(lp.data)
}

/// Mean squared residual `‖dm/dt − f(m, p)‖²` with `f` evaluated on the
/// emulator's own output.
pub fn loss_physics(
    model: &HyperPinnModel,
    system: &OdeSystem,
    set: &TrainingSet,
    batch: &[(usize, usize)],
) -> Result<f64> {
    check_model_system(model, system, set)?;
    let (lp, _) = batch_eval(model, &model.hyper()?, system, set, batch, 0.0, 1.0, false)?;
    Ok(lp.physics.expect("physics requested"))
}

/// `α·L_data + β·L_physics` and its gradient with respect to the flat `θ_h`.
pub fn loss_and_gradient(
    model: &HyperPinnModel,
    system: &OdeSystem,
    set: &TrainingSet,
    batch: &[(usize, usize)],
    alpha: f64,
    beta: f64,
) -> Result<(LossParts, Vec<f64>)> {
    check_model_system(model, system, set)?;
    let (lp, grads) = batch_eval(model, &model.hyper()?, system, set, batch, alpha, beta, true)?;
    let flat = grads
        .expect("gradient requested")
        .into_iter()
        .flat_map(Tensor::into_vec)
        .collect();
    Ok((lp, flat))
}

/// Output normalization from the per-component mean and standard deviation of
/// the training solutions.
pub fn output_normalization(set: &TrainingSet, d_y: usize) -> (Vec<f64>, Vec<f64>) {
    let values: Vec<&Vec<f64>> = set.solutions.iter().flatten().collect();
    let n = values.len() as f64;
    let mean: Vec<f64> = (0..d_y)
        .map(|i| values.iter().map(|s| s[i]).sum::<f64>() / n)
        .collect();
    let scale = (0..d_y)
        .map(|i| {
            let var = values.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-8 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// Median per-component RMSE of the emulator against RK4 over uniform draws
/// from the bounds, on `eval_points` uniform times in natural scale.
pub fn solver_fidelity(
    model: &HyperPinnModel,
    system: &OdeSystem,
    draws: usize,
    eval_points: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let grid = TimeGrid::uniform(0.0, model.horizon, eval_points)?;
    let mut per_component: Vec<Vec<f64>> = vec![Vec::new(); model.d_y()];
    for p in sample_parameters(&model.bounds, draws, seed) {
        let reference = match integrate_from_origin(system, &p, &grid, None) {
            Ok(t) => t,
            Err(Error::BlowUp { .. }) => continue,
            Err(e) => return Err(e),
        };
        let reference = if system.log_space {
            reference.exponentiated()
        } else {
            reference
        };
        let emulated = model.solve(&p, &grid)?;
        for (i, r) in emulated.rmse_against(&reference)?.into_iter().enumerate() {
            per_component[i].push(r);
        }
    }
    if per_component[0].is_empty() {
        return Err(Error::Numerical(
            "no fidelity draw could be integrated".into(),
        ));
    }
    Ok(per_component
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 {
                v[m / 2]
            } else {
                0.5 * (v[m / 2 - 1] + v[m / 2])
            }
        })
        .collect())
}

/// Minimizes `α·L_data + β·L_physics` with Adam over shuffled minibatches of
/// `(p, t)` pairs, visiting every pair once per epoch.
pub fn train_hyperpinn(
    system: &OdeSystem,
    set: &TrainingSet,
    config: &PinnTrainConfig,
) -> Result<HyperPinnModel> {
    config.validate()?;
    let (center, scale) = output_normalization(set, system.d_y());
    let model = HyperPinnModel::init(
        system,
        set.bounds.clone(),
        &config.hyper_hidden,
        &config.main_hidden,
        center,
        scale,
        derive_seed(config.seed, "init"),
    )?;
    train_from(model, system, set, config)
}

/// Continues training an existing model.
pub fn train_from(
    mut model: HyperPinnModel,
    system: &OdeSystem,
    set: &TrainingSet,
    config: &PinnTrainConfig,
) -> Result<HyperPinnModel> {
    config.validate()?;
    check_model_system(&model, system, set)?;
    if config.beta == 0.0 {
        info!("physics loss disabled (beta = 0); data loss only");
    }
    let started = Instant::now();
    let mut hyper = model.hyper()?;
    let mut adam = AdamState::new(AdamConfig::new(config.learning_rate), &hyper.params);
    let mut shuffle = stream(derive_seed(config.seed, "batches"));
    let t_col = set.t_col();
    let mut order: Vec<(usize, usize)> = (0..set.n_p())
        .flat_map(|k| (0..t_col).map(move |j| (k, j)))
        .collect();
    let mut history = Vec::new();
    let mut last = LossParts {
        total: f64::NAN,
        data: f64::NAN,
        physics: None,
    };

    // Equal-sized batches: a small remainder batch would cost a full
    // hypernetwork pass while contributing few pairs.
    let n_batches = (order.len() / config.batch_size).max(1);
    let chunk = order.len().div_ceil(n_batches);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle);
        let (mut total, mut data, mut physics) = (0.0, 0.0, 0.0);
        for (b, pairs) in order.chunks(chunk).enumerate() {
            let (lp, g) = batch_eval(
                &model,
                &hyper,
                system,
                set,
                pairs,
                config.alpha,
                config.beta,
                true,
            )?;
            if !lp.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite solver loss at epoch {epoch}, batch {b}: {lp:?}"
                )));
            }
            adam.step(&mut hyper.params, &g.expect("gradient requested"))?;
            let w = pairs.len() as f64 / order.len() as f64;
            total += w * lp.total;
            data += w * lp.data;
            physics += w * lp.physics.unwrap_or(0.0);
        }
        last = LossParts {
            total,
            data,
            physics: (config.beta > 0.0).then_some(physics),
        };
        if epoch % config.log_every == 0 || epoch + 1 == config.epochs {
            history.push(LossRecord { epoch, loss: last });
            info!(
                "solver epoch {epoch}: loss {total:.6e} (data {data:.6e}, physics {physics:.6e}) [{:.1}s]",
                started.elapsed().as_secs_f64()
            );
        }
    }

    model.theta_h = hyper.to_flat();
    let fidelity = if config.fidelity_draws > 0 {
        let median = solver_fidelity(
            &model,
            system,
            config.fidelity_draws,
            161,
            derive_seed(config.seed, "fidelity"),
        )?;
        let passed = median.iter().all(|&r| r < config.fidelity_threshold);
        info!(
            "solver fidelity: median rmse {median:?} (threshold {})",
            config.fidelity_threshold
        );
        Some(FidelityReport {
            draws: config.fidelity_draws,
            median_rmse: median,
            threshold: config.fidelity_threshold,
            passed,
        })
    } else {
        None
    };
    model.metadata = Some(TrainingMetadata {
        config: config.clone(),
        final_loss: last,
        loss_history: history,
        training_set_hash: set.content_hash(),
        resampled: set.resampled,
        fidelity,
    });
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::make_system;

    #[test]
    fn bounds_validation_and_normalization() {
        assert!(ParamBounds::new(vec![1.0], vec![1.0]).is_err());
        assert!(ParamBounds::new(vec![1.0, 0.0], vec![2.0]).is_err());
        let b = ParamBounds::scaled(&[0.2, 0.2, 3.0], 0.5, 1.5).unwrap();
        assert_eq!(b.lower, vec![0.1, 0.1, 1.5]);
        for (lo, hi) in b.normalize(&b.lower).iter().zip(b.normalize(&b.upper)) {
            assert!((lo + 1.0).abs() < 1e-15 && (hi - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn samples_stay_in_box() {
        let b = ParamBounds::scaled(&[0.2, 0.2, 3.0], 0.5, 1.5).unwrap();
        for p in sample_parameters(&b, 1000, 4) {
            assert!(b.contains(&p.0));
        }
    }

    #[test]
    fn training_set_shape_and_determinism() {
        let sys = make_system("fitzhugh_nagumo").unwrap();
        let b = ParamBounds::scaled(&sys.true_params.0, 0.5, 1.5).unwrap();
        let set = build_training_set(&sys, &b, 5, 101, 3).unwrap();
        assert_eq!(set.solutions.len(), 5);
        assert_eq!(set.solutions[0].len(), 101);
        assert_eq!(set.solutions[0][0].len(), 2);
        for (p, sol) in set.params.iter().zip(&set.solutions) {
            let fresh = integrate_from_origin(&sys, p, &set.collocation, None).unwrap();
            assert_eq!(&fresh.states, sol);
        }
        assert_eq!(set, build_training_set(&sys, &b, 5, 101, 3).unwrap());
    }

    #[test]
    fn zero_hypernetwork_emits_zero_weights() {
        let sys = make_system("fitzhugh_nagumo").unwrap();
        let b = ParamBounds::scaled(&sys.true_params.0, 0.5, 1.5).unwrap();
        let mut model =
            HyperPinnModel::init(&sys, b, &[4], &[3], vec![0.0; 2], vec![1.0; 2], 1).unwrap();
        model.theta_h.iter_mut().for_each(|v| *v = 0.0);
        let w = model.emit_weights(&[0.2, 0.2, 3.0]).unwrap();
        assert_eq!(w.len(), model.main_spec.param_count());
        assert!(w.iter().all(|&v| v == 0.0));
        let out = model.emulate_states(&[0.2, 0.2, 3.0], &[0.0, 7.0]).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn main_forward_single_affine_layer() {
        let spec = MlpSpec::new(1, &[], 1).unwrap();
        let y = main_forward(&[2.5, -0.5], &spec, 4.0, 3.0).unwrap();
        assert!((y[0] - (2.5 * 0.5 - 0.5)).abs() < 1e-15);
        assert!(main_forward(&[1.0], &spec, 4.0, 3.0).is_err());
    }

    #[test]
    fn solve_rejects_times_beyond_horizon() {
        let sys = make_system("fitzhugh_nagumo").unwrap();
        let b = ParamBounds::scaled(&sys.true_params.0, 0.5, 1.5).unwrap();
        let model =
            HyperPinnModel::init(&sys, b, &[4], &[3], vec![0.0; 2], vec![1.0; 2], 1).unwrap();
        let grid = TimeGrid::uniform(0.0, 25.0, 5).unwrap();
        assert!(model.solve(&sys.true_params, &grid).is_err());
    }
}
