//! Fully connected tanh networks on top of [`Graph`].
//!
//! Hidden layers use `tanh`, the output layer is affine. A network is either
//! backed by shared weight nodes (one weight set for every row) or by rows of
//! a grouped weight matrix (one weight set per row group, as emitted by a
//! hypernetwork).

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId, Segment};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::standard_normal;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: &[usize], output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "network widths must be positive: {input_dim} -> {hidden:?} -> {output_dim}"
            )));
        }
        Ok(Self {
            input_dim,
            output_dim,
            hidden: hidden.to_vec(),
        })
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offsets of each layer's block in the flat `[W (row-major), b]*` layout.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layer_shapes()
            .iter()
            .map(|(i, o)| {
                let here = off;
                off += i * o + o;
                here
            })
            .collect()
    }
}

/// Weights of a shared-parameter network: `[W0, b0, W1, b1, ...]`,
/// with `W: fan_in × fan_out` and `b: 1 × fan_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = spec
            .layer_shapes()
            .into_iter()
            .flat_map(|(fan_in, fan_out)| {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let w: Vec<f64> = (0..fan_in * fan_out)
                    .map(|_| std * standard_normal(rng))
                    .collect();
                [
                    Tensor::from_vec(fan_in, fan_out, w).expect("layer size"),
                    Tensor::zeros(1, fan_out),
                ]
            })
            .collect();
        Self { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let params = spec
            .layer_shapes()
            .into_iter()
            .flat_map(|(i, o)| [Tensor::zeros(i, o), Tensor::zeros(1, o)])
            .collect();
        Self { spec, params }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(spec: MlpSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != spec.param_count() {
            return Err(Error::dim(
                "flat network weights",
                spec.param_count(),
                flat.len(),
            ));
        }
        let mut params = Vec::new();
        let mut off = 0;
        for (i, o) in spec.layer_shapes() {
            params.push(Tensor::from_vec(i, o, flat[off..off + i * o].to_vec())?);
            off += i * o;
            params.push(Tensor::from_vec(1, o, flat[off..off + o].to_vec())?);
            off += o;
        }
        Ok(Self { spec, params })
    }

    /// Adds the weights to `graph`. Trainable weights become variables.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundMlp {
        let nodes: Vec<NodeId> = self
            .params
            .iter()
            .map(|t| {
                if trainable {
                    graph.variable(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        let layers = self
            .spec
            .layer_shapes()
            .into_iter()
            .zip(nodes.chunks(2))
            .map(|((fan_in, fan_out), wb)| NetLayer {
                params: LayerParams::Shared { w: wb[0], b: wb[1] },
                fan_in,
                fan_out,
            })
            .collect();
        BoundMlp {
            net: NetGraph::new(layers),
            nodes,
        }
    }

    /// Plain forward pass without a graph, one input row per sample.
    pub fn eval(&self, input: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        let y = bound.net.forward(&mut g, x);
        g.value(y).clone()
    }
}

/// Network weights living in a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub net: NetGraph,
    /// Weight nodes in `Mlp::params` order.
    pub nodes: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub enum LayerParams {
    Shared {
        w: NodeId,
        b: NodeId,
    },
    Grouped {
        theta: NodeId,
        segments: Rc<Vec<Segment>>,
        offset: usize,
    },
}

#[derive(Debug, Clone)]
pub struct NetLayer {
    pub params: LayerParams,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Primal/tangent pair of graph nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualNode {
    pub primal: NodeId,
    pub tangent: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualTensor {
    pub primal: Tensor,
    pub tangent: Tensor,
}

impl DualNode {
    pub fn values(&self, graph: &Graph) -> DualTensor {
        DualTensor {
            primal: graph.value(self.primal).clone(),
            tangent: graph.value(self.tangent).clone(),
        }
    }
}

/// A tanh network expressed as graph-building steps, with an optional fixed
/// affine input normalization `x ↦ scale · x + shift`.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub layers: Vec<NetLayer>,
    pub input_scale: f64,
    pub input_shift: f64,
}

impl NetGraph {
    pub fn new(layers: Vec<NetLayer>) -> Self {
        Self {
            layers,
            input_scale: 1.0,
            input_shift: 0.0,
        }
    }

    pub fn with_input_normalization(mut self, scale: f64, shift: f64) -> Self {
        self.input_scale = scale;
        self.input_shift = shift;
        self
    }

    /// Network whose layer weights are rows of `theta` laid out per `spec`.
    pub fn grouped(spec: &MlpSpec, theta: NodeId, segments: Rc<Vec<Segment>>) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .zip(spec.layer_offsets())
            .map(|((fan_in, fan_out), offset)| NetLayer {
                params: LayerParams::Grouped {
                    theta,
                    segments: segments.clone(),
                    offset,
                },
                fan_in,
                fan_out,
            })
            .collect();
        Self::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("network has layers").fan_out
    }

    fn normalize(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut x = x;
        if self.input_scale != 1.0 {
            x = g.scale(x, self.input_scale);
        }
        if self.input_shift != 0.0 {
            x = g.shift(x, self.input_shift);
        }
        x
    }

    fn linear(&self, g: &mut Graph, layer: &NetLayer, x: NodeId, bias: bool) -> NodeId {
        match &layer.params {
            LayerParams::Shared { w, b } => {
                let xw = g.matmul(x, *w);
                if bias {
                    g.add_row(xw, *b)
                } else {
                    xw
                }
            }
            LayerParams::Grouped {
                theta,
                segments,
                offset,
            } => g.grouped_affine(
                x,
                *theta,
                segments.clone(),
                *offset,
                layer.fan_in,
                layer.fan_out,
                bias,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let mut h = self.normalize(g, x);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = self.linear(g, layer, h, true);
            if l < last {
                h = g.tanh(h);
            }
        }
        h
    }

    /// Forward-mode propagation of a tangent alongside the primal, built from
    /// ordinary graph nodes so the tangent stays differentiable in reverse mode.
    pub fn forward_dual(&self, g: &mut Graph, x: DualNode) -> DualNode {
        let mut h = self.normalize(g, x.primal);
        let mut dh = if self.input_scale != 1.0 {
            g.scale(x.tangent, self.input_scale)
        } else {
            x.tangent
        };
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            h = self.linear(g, layer, h, true);
            dh = self.linear(g, layer, dh, false);
            if l < last {
                h = g.tanh(h);
                let slope = g.tanh_deriv(h);
                dh = g.mul(slope, dh);
            }
        }
        DualNode {
            primal: h,
            tangent: dh,
        }
    }

    /// Gradient of the scalar network output with respect to each input row,
    /// built as an explicit transposed sweep (`n × input_dim`). Every node is
    /// an ordinary graph op, so the result is itself differentiable with
    /// respect to the weights.
    pub fn input_gradient(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if self.output_dim() != 1 {
            return Err(Error::Graph(format!(
                "input gradient needs a scalar-output network, got {} outputs",
                self.output_dim()
            )));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match &layer.params {
                LayerParams::Shared { w, .. } => weights.push(*w),
                LayerParams::Grouped { .. } => {
                    return Err(Error::Graph(
                        "input gradient is only built for shared-weight networks".into(),
                    ))
                }
            }
        }
        let rows = g.shape(x).0;
        let mut h = self.normalize(g, x);
        let last = self.layers.len() - 1;
        let mut hidden = Vec::with_capacity(last);
        for layer in self.layers.iter().take(last) {
            h = self.linear(g, layer, h, true);
            h = g.tanh(h);
            hidden.push(h);
        }
        let ones = g.constant(Tensor::filled(rows, 1, 1.0));
        let mut back = g.matmul_t(ones, weights[last]);
        for l in (0..last).rev() {
            let slope = g.tanh_deriv(hidden[l]);
            let delta = g.mul(back, slope);
            back = g.matmul_t(delta, weights[l]);
        }
        if self.input_scale != 1.0 {
            back = g.scale(back, self.input_scale);
        }
        Ok(back)
    }
}

/// `m(t)` and `dm/dt` for a column of scalar times `t` (`n × 1`), with
/// `tangent(t) = 1`.
pub fn time_derivative(g: &mut Graph, net: &NetGraph, t: NodeId) -> Result<DualNode> {
    let (rows, cols) = g.shape(t);
    if cols != 1 || net.input_dim() != 1 {
        return Err(Error::Graph(format!(
            "time derivative needs scalar time inputs, got {rows}x{cols} into a {}-input network",
            net.input_dim()
        )));
    }
    let seed = g.constant(Tensor::filled(rows, 1, 1.0));
    Ok(net.forward_dual(
        g,
        DualNode {
            primal: t,
            tangent: seed,
        },
    ))
}

/// `‖∇ₓ D(x)‖₂` for every row of `x`, as an `n × 1` differentiable node.
pub fn input_gradient_norm(g: &mut Graph, net: &NetGraph, x: NodeId) -> Result<NodeId> {
    let grad = net.input_gradient(g, x)?;
    Ok(g.row_norm(grad))
}
