//! Adversarial inference of parameters and observation noise.
//!
//! Two generators map standard-normal latents to parameters `p^G` (squashed
//! into the solver's bounds box) and to observation noise `e^G`. Fake
//! observation sets are `m(t_j; θ_m(p^G)) + e^G` on the dataset's schedule, and
//! a critic `D` with gradient penalty scores them against the replicates.

use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    input_gradient_norm, AdamConfig, AdamState, Graph, Mlp, MlpSpec, NetGraph, NodeId, Segment,
    Tensor,
};
use crate::datagen::{Dataset, ObservationSchedule};
use crate::error::{Error, Result};
use crate::hyperpinn::{tile_rows, HyperPinnModel, ParamBounds};
use crate::rng::{derive_seed, normal_matrix, stream, StageRng};

/// Critic scores beyond this magnitude abort training.
const SCORE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WganConfig {
    pub noise_dim: usize,
    pub lambda_d: f64,
    pub lambda_e: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub critic_steps: usize,
    pub seed: u64,
    pub generator_p_hidden: Vec<usize>,
    pub generator_e_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Size of the terminal parameter/noise sample.
    pub terminal_draws: usize,
    pub log_every: usize,
}

impl WganConfig {
    /// Defaults for everything except the per-system weights.
    pub fn new(lambda_e: f64, learning_rate: f64, epochs: usize, seed: u64) -> Self {
        Self {
            noise_dim: 32,
            lambda_d: 10.0,
            lambda_e,
            learning_rate,
            beta1: 0.0,
            beta2: 0.9,
            epochs,
            critic_steps: 5,
            seed,
            generator_p_hidden: vec![64, 64, 64],
            generator_e_hidden: vec![64, 64, 64],
            discriminator_hidden: vec![128, 128, 128],
            terminal_draws: 10_000,
            log_every: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(Error::config("noise dimension must be at least 1"));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_e >= 0.0) {
            return Err(Error::config(format!(
                "lambda_d and lambda_e must be nonnegative, got {} and {}",
                self.lambda_d, self.lambda_e
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        if self.critic_steps == 0 || self.log_every == 0 || self.terminal_draws < 2 {
            return Err(Error::config(
                "critic_steps and log_every must be positive and terminal_draws at least 2",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanNets {
    pub generator_p: Mlp,
    pub generator_e: Mlp,
    pub discriminator: Mlp,
}

impl GanNets {
    pub fn init(config: &WganConfig, d_p: usize, flat_dim: usize) -> Result<Self> {
        let d_n = config.noise_dim;
        let gp = MlpSpec::new(d_n, &config.generator_p_hidden, d_p)?;
        let ge = MlpSpec::new(d_n, &config.generator_e_hidden, flat_dim)?;
        let d = MlpSpec::new(flat_dim, &config.discriminator_hidden, 1)?;
        Ok(Self {
            generator_p: Mlp::init(gp, &mut stream(derive_seed(config.seed, "init/generator_p"))),
            generator_e: Mlp::init(ge, &mut stream(derive_seed(config.seed, "init/generator_e"))),
            discriminator: Mlp::init(d, &mut stream(derive_seed(config.seed, "init/discriminator"))),
        })
    }

    pub fn d_p(&self) -> usize {
        self.generator_p.spec.output_dim
    }

    pub fn flat_dim(&self) -> usize {
        self.generator_e.spec.output_dim
    }

    fn check(&self) -> Result<()> {
        let flat = self.flat_dim();
        if self.discriminator.spec.input_dim != flat || self.discriminator.spec.output_dim != 1 {
            return Err(Error::Mismatch(format!(
                "discriminator maps {} -> {}, noise generator emits {flat}",
                self.discriminator.spec.input_dim, self.discriminator.spec.output_dim
            )));
        }
        if self.generator_p.spec.input_dim != self.generator_e.spec.input_dim {
            return Err(Error::Mismatch("generators disagree on noise dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBatch {
    pub z_p: Tensor,
    pub z_e: Tensor,
    pub params: Tensor,
    pub noise: Tensor,
    pub fakes: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanLossRecord {
    pub epoch: usize,
    pub generator: f64,
    pub discriminator: f64,
    pub loss_e: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub system_name: String,
    pub param_names: Vec<String>,
    pub config: WganConfig,
    pub nets: GanNets,
    pub bounds: ParamBounds,
    pub sample_seed: u64,
    /// Terminal sample, one row per draw.
    pub param_draws: Vec<Vec<f64>>,
    pub noise_draws: Vec<Vec<f64>>,
    /// Per observed `(i, j)` entry, in the dataset's flattening order.
    pub noise_mean: Vec<f64>,
    pub noise_var: Vec<f64>,
    pub history: Vec<GanLossRecord>,
    pub wall_seconds: f64,
}

impl InferenceResult {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let result: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if result.param_draws.is_empty()
            || result
                .param_draws
                .iter()
                .any(|r| r.len() != result.param_names.len() || r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(format!(
                "{}: parameter sample is empty or malformed",
                path.display()
            )));
        }
        Ok(result)
    }

    /// `draw,<param names...>` with one line per terminal draw.
    pub fn params_csv(&self) -> String {
        let mut out = format!("draw,{}\n", self.param_names.join(","));
        for (n, row) in self.param_draws.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&format!("{n},{}\n", cells.join(",")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub param_names: Vec<String>,
    pub param_mean: Vec<f64>,
    pub param_std: Vec<f64>,
    pub noise_mean: Vec<f64>,
    pub noise_var: Vec<f64>,
}

/// Column means and unbiased variances of `rows`.
pub(crate) fn column_moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let width = rows.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..width)
        .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n)
        .collect();
    let var = (0..width)
        .map(|c| {
            let ss: f64 = rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum();
            if rows.len() > 1 {
                ss / (n - 1.0)
            } else {
                0.0
            }
        })
        .collect();
    (mean, var)
}

pub fn summarize(result: &InferenceResult) -> Summary {
    let (param_mean, param_var) = column_moments(&result.param_draws);
    Summary {
        param_names: result.param_names.clone(),
        param_mean,
        param_std: param_var.into_iter().map(f64::sqrt).collect(),
        noise_mean: result.noise_mean.clone(),
        noise_var: result.noise_var.clone(),
    }
}

/// `N × d_n` matrix of i.i.d. standard normal latents.
pub fn sample_latent(n: usize, d_n: usize, seed: u64) -> Tensor {
    latent(&mut stream(seed), n, d_n)
}

fn latent(rng: &mut StageRng, n: usize, d_n: usize) -> Tensor {
    Tensor::from_vec(n, d_n, normal_matrix(rng, n, d_n)).expect("latent size")
}

/// Per-entry unbiased variance of the replicates across `n`.
pub fn observed_variance(dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.n_obs() < 2 {
        return Err(Error::config("variance needs at least two replicates"));
    }
    Ok(column_moments(&dataset.replicates).1)
}

fn generate_nodes(
    g: &mut Graph,
    gp: &NetGraph,
    ge: &NetGraph,
    z_p: NodeId,
    z_e: NodeId,
    bounds: &ParamBounds,
) -> (NodeId, NodeId) {
    let n = g.shape(z_p).0;
    let raw = gp.forward(g, z_p);
    let squashed = g.tanh(raw);
    let hw = g.constant(tile_rows(n, &bounds.halfwidth()));
    let spread = g.mul(squashed, hw);
    let mid = g.constant(Tensor::row(&bounds.midpoint()));
    let p = g.add_row(spread, mid);
    let e = ge.forward(g, z_e);
    (p, e)
}

/// Generated parameters `mid + halfwidth · tanh(G^p(z^p))` and noise `G^e(z^e)`.
pub fn generate(
    nets: &GanNets,
    z_p: &Tensor,
    z_e: &Tensor,
    bounds: &ParamBounds,
) -> Result<(Tensor, Tensor)> {
    nets.check()?;
    check_latents(nets, z_p, z_e)?;
    if bounds.dim() != nets.d_p() {
        return Err(Error::dim("parameter bounds", nets.d_p(), bounds.dim()));
    }
    let mut g = Graph::new();
    let gp = nets.generator_p.bind(&mut g, false);
    let ge = nets.generator_e.bind(&mut g, false);
    let (zp, ze) = (g.constant(z_p.clone()), g.constant(z_e.clone()));
    let (p, e) = generate_nodes(&mut g, &gp.net, &ge.net, zp, ze, bounds);
    Ok((g.value(p).clone(), g.value(e).clone()))
}

fn check_latents(nets: &GanNets, z_p: &Tensor, z_e: &Tensor) -> Result<()> {
    let d_n = nets.generator_p.spec.input_dim;
    if z_p.cols() != d_n || z_e.cols() != d_n {
        return Err(Error::dim("latent width", d_n, z_p.cols().max(z_e.cols())));
    }
    if z_p.rows() != z_e.rows() {
        return Err(Error::dim("latent rows", z_p.rows(), z_e.rows()));
    }
    Ok(())
}

fn check_schedule(model: &HyperPinnModel, schedule: &ObservationSchedule) -> Result<()> {
    schedule.times.check_within(model.horizon)?;
    if let Some(&c) = schedule
        .observed_components
        .iter()
        .find(|&&c| c >= model.d_y())
    {
        return Err(Error::Mismatch(format!(
            "schedule observes component {c} but the solver emits {}",
            model.d_y()
        )));
    }
    Ok(())
}

/// Graph for `Y^G`: emulator trajectories of every row of `p` on the schedule
/// times, gathered into flattening order, plus `e`.
fn assemble_nodes(
    g: &mut Graph,
    model: &HyperPinnModel,
    hyper: &NetGraph,
    schedule: &ObservationSchedule,
    p: NodeId,
    e: NodeId,
) -> NodeId {
    let n = g.shape(p).0;
    let times = schedule.times.points();
    let t_len = times.len();
    let d_y = model.d_y();
    let neg_center: Vec<f64> = model.normalization.p_center.iter().map(|c| -c).collect();
    let inv_hw: Vec<f64> = model.normalization.p_halfwidth.iter().map(|h| 1.0 / h).collect();
    let neg_center = g.constant(Tensor::row(&neg_center));
    let inv_hw = g.constant(tile_rows(n, &inv_hw));
    let centered = g.add_row(p, neg_center);
    let p_norm = g.mul(centered, inv_hw);

    let t_col: Vec<f64> = (0..n).flat_map(|_| times.iter().copied()).collect();
    let t = g.constant(Tensor::column(&t_col));
    let segments = Rc::new(
        (0..n)
            .map(|r| Segment {
                group: r,
                start: r * t_len,
                len: t_len,
            })
            .collect::<Vec<_>>(),
    );
    let states = model.emulator(g, hyper, p_norm, t, segments, false).state;
    let entries = schedule.entries();
    let index: Vec<usize> = (0..n)
        .flat_map(|r| entries.iter().map(move |&(i, j)| (r * t_len + j) * d_y + i))
        .collect();
    let clean = g.gather(states, n, entries.len(), Rc::new(index));
    g.add(clean, e)
}

/// Fake observation rows `m(t_j; θ_m(p^G_n))_i + e^G_n` in flattening order.
pub fn assemble_fake(
    model: &HyperPinnModel,
    schedule: &ObservationSchedule,
    p_g: &Tensor,
    e_g: &Tensor,
) -> Result<Tensor> {
    check_schedule(model, schedule)?;
    if p_g.cols() != model.d_p() {
        return Err(Error::dim("generated parameters", model.d_p(), p_g.cols()));
    }
    if e_g.shape() != (p_g.rows(), schedule.flat_dim()) {
        return Err(Error::Shape {
            op: "assemble_fake noise",
            lhs: (p_g.rows(), schedule.flat_dim()),
            rhs: e_g.shape(),
        });
    }
    let mut g = Graph::new();
    let hyper = model.hyper()?.bind(&mut g, false);
    let (p, e) = (g.constant(p_g.clone()), g.constant(e_g.clone()));
    let y = assemble_nodes(&mut g, model, &hyper.net, schedule, p, e);
    Ok(g.value(y).clone())
}

fn loss_e_node(g: &mut Graph, e: NodeId, obs_var: &[f64]) -> Result<NodeId> {
    let (n, width) = g.shape(e);
    if n < 2 {
        return Err(Error::config("noise variance needs at least two generated rows"));
    }
    if width != obs_var.len() {
        return Err(Error::dim("observed variances", width, obs_var.len()));
    }
    let sq = g.square(e);
    let sum_sq = g.sum(sq);
    let mean_sq = g.scale(sum_sq, 1.0 / n as f64);

    let mean = g.column_mean(e);
    let neg_mean = g.scale(mean, -1.0);
    let centered = g.add_row(e, neg_mean);
    let csq = g.square(centered);
    let col = g.column_sum(csq);
    let var = g.scale(col, 1.0 / (n - 1) as f64);
    let target = g.constant(Tensor::row(obs_var));
    let gap = g.sub(target, var);
    let gap_sq = g.square(gap);
    let var_term = g.sum(gap_sq);
    Ok(g.add(mean_sq, var_term))
}

/// Mean-square plus variance-matching penalty on generated noise.
pub fn loss_e(e_g: &Tensor, dataset: &Dataset) -> Result<f64> {
    let obs_var = observed_variance(dataset)?;
    let mut g = Graph::new();
    let e = g.constant(e_g.clone());
    let l = loss_e_node(&mut g, e, &obs_var)?;
    Ok(g.value(l).item())
}

fn critic_mean(g: &mut Graph, d: &NetGraph, y: NodeId) -> NodeId {
    let scores = d.forward(g, y);
    g.mean(scores)
}

/// `mean_n (‖∇D(ŷ_n)‖ − 1)²` with `ŷ = γ·fake + (1 − γ)·real`, per-element
/// `γ ~ U[0, 1]`, after a random permutation of the real rows.
fn penalty_node(
    g: &mut Graph,
    d: &NetGraph,
    real: &Tensor,
    fake: NodeId,
    rng: &mut StageRng,
) -> Result<NodeId> {
    let (n, width) = g.shape(fake);
    if real.shape() != (n, width) {
        return Err(Error::Shape {
            op: "gradient penalty",
            lhs: real.shape(),
            rhs: (n, width),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let gamma: Vec<f64> = (0..n * width).map(|_| rng.gen::<f64>()).collect();
    let mut rest = Vec::with_capacity(n * width);
    for (r, &src) in order.iter().enumerate() {
        for c in 0..width {
            rest.push((1.0 - gamma[r * width + c]) * real.get(src, c));
        }
    }
    let gamma = g.constant(Tensor::from_vec(n, width, gamma)?);
    let rest = g.constant(Tensor::from_vec(n, width, rest)?);
    let mixed = g.mul(gamma, fake);
    let y_hat = g.add(mixed, rest);
    let norm = input_gradient_norm(g, d, y_hat)?;
    let gap = g.shift(norm, -1.0);
    let sq = g.square(gap);
    Ok(g.mean(sq))
}

struct CriticGraph {
    graph: Graph,
    weights: Vec<NodeId>,
    loss: NodeId,
    real_score: NodeId,
    fake_score: NodeId,
    penalty: NodeId,
}

fn critic_graph(
    d: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    lambda_d: f64,
    rng: &mut StageRng,
) -> Result<CriticGraph> {
    if real.cols() != d.spec.input_dim || fake.shape() != real.shape() {
        return Err(Error::Shape {
            op: "discriminator loss",
            lhs: real.shape(),
            rhs: fake.shape(),
        });
    }
    let mut g = Graph::new();
    let bound = d.bind(&mut g, true);
    let (y_o, y_g) = (g.constant(real.clone()), g.constant(fake.clone()));
    let real_score = critic_mean(&mut g, &bound.net, y_o);
    let fake_score = critic_mean(&mut g, &bound.net, y_g);
    let penalty = penalty_node(&mut g, &bound.net, real, y_g, rng)?;
    let gap = g.sub(fake_score, real_score);
    let weighted = g.scale(penalty, lambda_d);
    let loss = g.add(gap, weighted);
    Ok(CriticGraph {
        graph: g,
        weights: bound.nodes,
        loss,
        real_score,
        fake_score,
        penalty,
    })
}

fn flat_grads(graph: &Graph, loss: NodeId, weights: &[NodeId]) -> Result<Vec<Tensor>> {
    let grads = graph.grad(loss)?;
    Ok(weights.iter().map(|&w| grads.get(w)).collect())
}

/// Gradient penalty of `d` on `(real, fake)` with interpolation draws from `seed`.
pub fn gradient_penalty(d: &Mlp, real: &Tensor, fake: &Tensor, seed: u64) -> Result<f64> {
    let cg = critic_graph(d, real, fake, 0.0, &mut stream(seed))?;
    Ok(cg.graph.value(cg.penalty).item())
}

/// Penalty value and its gradient with respect to the flat critic weights.
pub fn gradient_penalty_and_gradient(
    d: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let cg = critic_graph(d, real, fake, 0.0, &mut stream(seed))?;
    let grads = flat_grads(&cg.graph, cg.penalty, &cg.weights)?;
    Ok((
        cg.graph.value(cg.penalty).item(),
        grads.into_iter().flat_map(Tensor::into_vec).collect(),
    ))
}

/// `−mean D(Y^o) + mean D(Y^G) + λ_D · penalty`, with `Y^G` held constant.
pub fn loss_discriminator(
    d: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    lambda_d: f64,
    seed: u64,
) -> Result<f64> {
    let cg = critic_graph(d, real, fake, lambda_d, &mut stream(seed))?;
    Ok(cg.graph.value(cg.loss).item())
}

pub fn loss_discriminator_and_gradient(
    d: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    lambda_d: f64,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    let cg = critic_graph(d, real, fake, lambda_d, &mut stream(seed))?;
    let grads = flat_grads(&cg.graph, cg.loss, &cg.weights)?;
    Ok((
        cg.graph.value(cg.loss).item(),
        grads.into_iter().flat_map(Tensor::into_vec).collect(),
    ))
}

/// `mean D(Y^o) − mean D(Y^G) + λ_e · L_e` evaluated on given fakes and noise.
pub fn generator_objective(
    d: &Mlp,
    real: &Tensor,
    fake: &Tensor,
    e_g: &Tensor,
    obs_var: &[f64],
    lambda_e: f64,
) -> Result<f64> {
    if fake.shape() != e_g.shape() || real.cols() != fake.cols() {
        return Err(Error::Shape {
            op: "generator loss",
            lhs: fake.shape(),
            rhs: e_g.shape(),
        });
    }
    let mut g = Graph::new();
    let bound = d.bind(&mut g, false);
    let (y_o, y_g, e) = (
        g.constant(real.clone()),
        g.constant(fake.clone()),
        g.constant(e_g.clone()),
    );
    let l = generator_loss_node(&mut g, &bound.net, y_o, y_g, e, obs_var, lambda_e)?;
    Ok(g.value(l.total).item())
}

struct GeneratorLoss {
    total: NodeId,
    loss_e: NodeId,
    fake_score: NodeId,
}

fn generator_loss_node(
    g: &mut Graph,
    d: &NetGraph,
    y_o: NodeId,
    y_g: NodeId,
    e: NodeId,
    obs_var: &[f64],
    lambda_e: f64,
) -> Result<GeneratorLoss> {
    let real_score = critic_mean(g, d, y_o);
    let fake_score = critic_mean(g, d, y_g);
    let gap = g.sub(real_score, fake_score);
    let le = loss_e_node(g, e, obs_var)?;
    let weighted = g.scale(le, lambda_e);
    Ok(GeneratorLoss {
        total: g.add(gap, weighted),
        loss_e: le,
        fake_score,
    })
}

struct GeneratorGraph {
    graph: Graph,
    gp_weights: Vec<NodeId>,
    ge_weights: Vec<NodeId>,
    loss: GeneratorLoss,
}

#[allow(clippy::too_many_arguments)]
fn generator_graph(
    nets: &GanNets,
    model: &HyperPinnModel,
    hyper: &Mlp,
    dataset: &Dataset,
    real: &Tensor,
    obs_var: &[f64],
    lambda_e: f64,
    z_p: Tensor,
    z_e: Tensor,
) -> Result<GeneratorGraph> {
    let mut g = Graph::new();
    let gp = nets.generator_p.bind(&mut g, true);
    let ge = nets.generator_e.bind(&mut g, true);
    let d = nets.discriminator.bind(&mut g, false);
    let h = hyper.bind(&mut g, false);
    let (zp, ze) = (g.constant(z_p), g.constant(z_e));
    let (p, e) = generate_nodes(&mut g, &gp.net, &ge.net, zp, ze, &model.bounds);
    let y_g = assemble_nodes(&mut g, model, &h.net, &dataset.schedule, p, e);
    let y_o = g.constant(real.clone());
    let loss = generator_loss_node(&mut g, &d.net, y_o, y_g, e, obs_var, lambda_e)?;
    Ok(GeneratorGraph {
        graph: g,
        gp_weights: gp.nodes,
        ge_weights: ge.nodes,
        loss,
    })
}

fn check_inputs(nets: &GanNets, model: &HyperPinnModel, dataset: &Dataset) -> Result<()> {
    nets.check()?;
    if model.system_name != dataset.system_name() {
        return Err(Error::Mismatch(format!(
            "solver trained for `{}`, dataset from `{}`",
            model.system_name,
            dataset.system_name()
        )));
    }
    if nets.d_p() != model.d_p() {
        return Err(Error::dim("parameter generator output", model.d_p(), nets.d_p()));
    }
    if nets.flat_dim() != dataset.flat_dim() {
        return Err(Error::dim("noise generator output", dataset.flat_dim(), nets.flat_dim()));
    }
    check_schedule(model, &dataset.schedule)
}

fn replicate_tensor(dataset: &Dataset) -> Result<Tensor> {
    Tensor::from_vec(dataset.n_obs(), dataset.flat_dim(), dataset.replicate_matrix())
}

/// Generator loss with `N_G = N_o` fresh latents drawn from `seed`.
pub fn loss_generator(
    nets: &GanNets,
    model: &HyperPinnModel,
    dataset: &Dataset,
    lambda_e: f64,
    seed: u64,
) -> Result<f64> {
    Ok(loss_generator_and_gradient(nets, model, dataset, lambda_e, seed)?.0)
}

/// Generator loss and its gradient with respect to the flat weights of `G^p`
/// followed by those of `G^e`.
pub fn loss_generator_and_gradient(
    nets: &GanNets,
    model: &HyperPinnModel,
    dataset: &Dataset,
    lambda_e: f64,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(nets, model, dataset)?;
    let real = replicate_tensor(dataset)?;
    let obs_var = observed_variance(dataset)?;
    let mut rng = stream(seed);
    let d_n = nets.generator_p.spec.input_dim;
    let z_p = latent(&mut rng, dataset.n_obs(), d_n);
    let z_e = latent(&mut rng, dataset.n_obs(), d_n);
    let gg = generator_graph(
        nets,
        model,
        &model.hyper()?,
        dataset,
        &real,
        &obs_var,
        lambda_e,
        z_p,
        z_e,
    )?;
    let weights: Vec<NodeId> = gg.gp_weights.iter().chain(&gg.ge_weights).copied().collect();
    let grads = flat_grads(&gg.graph, gg.loss.total, &weights)?;
    Ok((
        gg.graph.value(gg.loss.total).item(),
        grads.into_iter().flat_map(Tensor::into_vec).collect(),
    ))
}

/// Draws latents and produces parameters, noise and fake rows in one pass.
pub fn generate_batch(
    nets: &GanNets,
    model: &HyperPinnModel,
    schedule: &ObservationSchedule,
    n: usize,
    seed: u64,
) -> Result<GeneratedBatch> {
    let mut rng = stream(seed);
    let d_n = nets.generator_p.spec.input_dim;
    let z_p = latent(&mut rng, n, d_n);
    let z_e = latent(&mut rng, n, d_n);
    let (params, noise) = generate(nets, &z_p, &z_e, &model.bounds)?;
    let fakes = assemble_fake(model, schedule, &params, &noise)?;
    Ok(GeneratedBatch {
        z_p,
        z_e,
        params,
        noise,
        fakes,
    })
}

fn fake_rows(
    nets: &GanNets,
    model: &HyperPinnModel,
    hyper: &Mlp,
    schedule: &ObservationSchedule,
    z_p: Tensor,
    z_e: Tensor,
) -> Tensor {
    let mut g = Graph::new();
    let gp = nets.generator_p.bind(&mut g, false);
    let ge = nets.generator_e.bind(&mut g, false);
    let h = hyper.bind(&mut g, false);
    let (zp, ze) = (g.constant(z_p), g.constant(z_e));
    let (p, e) = generate_nodes(&mut g, &gp.net, &ge.net, zp, ze, &model.bounds);
    let y = assemble_nodes(&mut g, model, &h.net, schedule, p, e);
    g.value(y).clone()
}

fn check_score(epoch: usize, what: &str, value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite {what} at GAN epoch {epoch}"
        )));
    }
    if what.ends_with("score") && value.abs() > SCORE_LIMIT {
        return Err(Error::Numerical(format!(
            "discriminator diverged at GAN epoch {epoch}: {what} {value:.3e}"
        )));
    }
    Ok(())
}

/// Full-batch WGAN-GP training followed by the terminal sample.
pub fn train_wgan(
    model: &HyperPinnModel,
    dataset: &Dataset,
    param_names: &[String],
    config: &WganConfig,
) -> Result<InferenceResult> {
    config.validate()?;
    let mut nets = GanNets::init(config, model.d_p(), dataset.flat_dim())?;
    check_inputs(&nets, model, dataset)?;
    if param_names.len() != model.d_p() {
        return Err(Error::dim("parameter names", model.d_p(), param_names.len()));
    }
    let started = Instant::now();
    let n = dataset.n_obs();
    let d_n = config.noise_dim;
    let real = replicate_tensor(dataset)?;
    let obs_var = observed_variance(dataset)?;
    let hyper = model.hyper()?;

    let adam = AdamConfig::new(config.learning_rate).with_betas(config.beta1, config.beta2);
    let mut adam_d = AdamState::new(adam, &nets.discriminator.params);
    let mut adam_gp = AdamState::new(adam, &nets.generator_p.params);
    let mut adam_ge = AdamState::new(adam, &nets.generator_e.params);
    let mut latents = stream(derive_seed(config.seed, "latent"));
    let mut interpolation = stream(derive_seed(config.seed, "interpolation"));
    let mut history = Vec::new();

    for epoch in 0..config.epochs {
        let mut critic = (0.0, 0.0);
        for _ in 0..config.critic_steps {
            let z_p = latent(&mut latents, n, d_n);
            let z_e = latent(&mut latents, n, d_n);
            let fake = fake_rows(&nets, model, &hyper, &dataset.schedule, z_p, z_e);
            let cg = critic_graph(
                &nets.discriminator,
                &real,
                &fake,
                config.lambda_d,
                &mut interpolation,
            )?;
            let loss = cg.graph.value(cg.loss).item();
            check_score(epoch, "discriminator loss", loss)?;
            check_score(epoch, "real score", cg.graph.value(cg.real_score).item())?;
            check_score(epoch, "fake score", cg.graph.value(cg.fake_score).item())?;
            let grads = flat_grads(&cg.graph, cg.loss, &cg.weights)?;
            adam_d.step(&mut nets.discriminator.params, &grads)?;
            critic = (loss, cg.graph.value(cg.penalty).item());
        }

        let z_p = latent(&mut latents, n, d_n);
        let z_e = latent(&mut latents, n, d_n);
        let gg = generator_graph(
            &nets,
            model,
            &hyper,
            dataset,
            &real,
            &obs_var,
            config.lambda_e,
            z_p,
            z_e,
        )?;
        let loss_g = gg.graph.value(gg.loss.total).item();
        check_score(epoch, "generator loss", loss_g)?;
        check_score(epoch, "fake score", gg.graph.value(gg.loss.fake_score).item())?;
        let grads = gg.graph.grad(gg.loss.total)?;
        let g_p: Vec<Tensor> = gg.gp_weights.iter().map(|&w| grads.get(w)).collect();
        let g_e: Vec<Tensor> = gg.ge_weights.iter().map(|&w| grads.get(w)).collect();
        adam_gp.step(&mut nets.generator_p.params, &g_p)?;
        adam_ge.step(&mut nets.generator_e.params, &g_e)?;

        if epoch % config.log_every == 0 || epoch + 1 == config.epochs {
            let record = GanLossRecord {
                epoch,
                generator: loss_g,
                discriminator: critic.0,
                loss_e: gg.graph.value(gg.loss.loss_e).item(),
                penalty: critic.1,
            };
            info!(
                "gan epoch {epoch}: L_G {:.5e}, L_D {:.5e}, L_e {:.5e}, penalty {:.4e} [{:.1}s]",
                record.generator,
                record.discriminator,
                record.loss_e,
                record.penalty,
                started.elapsed().as_secs_f64()
            );
            history.push(record);
        }
    }

    let sample_seed = derive_seed(config.seed, "terminal");
    let mut rng = stream(sample_seed);
    let m = config.terminal_draws;
    let z_p = latent(&mut rng, m, d_n);
    let z_e = latent(&mut rng, m, d_n);
    let (params, noise) = generate(&nets, &z_p, &z_e, &model.bounds)?;
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect() };
    let param_draws = rows(&params);
    let noise_draws = rows(&noise);
    if !params.all_finite() {
        return Err(Error::Numerical("non-finite terminal parameter draw".into()));
    }
    let (noise_mean, noise_var) = column_moments(&noise_draws);
    Ok(InferenceResult {
        system_name: model.system_name.clone(),
        param_names: param_names.to_vec(),
        config: config.clone(),
        nets,
        bounds: model.bounds.clone(),
        sample_seed,
        param_draws,
        noise_draws,
        noise_mean,
        noise_var,
        history,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
