//! Arithmetic back ends for right-hand-side evaluation.
//!
//! A system's right-hand side is written once against [`Algebra`] and then
//! evaluated either on plain `f64` scalars (integration) or on graph columns
//! (physics residuals that must be differentiable).

use super::systems::CustomDynamics;
use crate::autodiff::{Graph, NodeId};

pub trait Algebra {
    type V: Copy;

    fn add(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn sub(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn mul(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn div(&mut self, a: Self::V, b: Self::V) -> Self::V;
    fn scale(&mut self, a: Self::V, c: f64) -> Self::V;
    fn shift(&mut self, a: Self::V, c: f64) -> Self::V;
    fn exp(&mut self, a: Self::V) -> Self::V;

    /// Dispatches a user-supplied system to the matching back end.
    fn custom(
        &mut self,
        dynamics: &dyn CustomDynamics,
        y: &[Self::V],
        p: &[Self::V],
    ) -> Vec<Self::V>;

    fn neg(&mut self, a: Self::V) -> Self::V {
        self.scale(a, -1.0)
    }

    fn square(&mut self, a: Self::V) -> Self::V {
        self.mul(a, a)
    }
}

/// Scalar `f64` arithmetic.
#[derive(Debug, Clone, Copy, Default)]
pub struct Real;

impl Algebra for Real {
    type V = f64;

    #[inline]
    fn add(&mut self, a: f64, b: f64) -> f64 {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: f64, b: f64) -> f64 {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: f64, b: f64) -> f64 {
        a * b
    }
    #[inline]
    fn div(&mut self, a: f64, b: f64) -> f64 {
        a / b
    }
    #[inline]
    fn scale(&mut self, a: f64, c: f64) -> f64 {
        a * c
    }
    #[inline]
    fn shift(&mut self, a: f64, c: f64) -> f64 {
        a + c
    }
    #[inline]
    fn exp(&mut self, a: f64) -> f64 {
        a.exp()
    }
    fn custom(&mut self, dynamics: &dyn CustomDynamics, y: &[f64], p: &[f64]) -> Vec<f64> {
        dynamics.rhs_real(y, p)
    }
}

/// Column-wise arithmetic on graph nodes of identical shape.
impl Algebra for Graph {
    type V = NodeId;

    fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        Graph::add(self, a, b)
    }
    fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        Graph::sub(self, a, b)
    }
    fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        Graph::mul(self, a, b)
    }
    fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        Graph::div(self, a, b)
    }
    fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        Graph::scale(self, a, c)
    }
    fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        Graph::shift(self, a, c)
    }
    fn exp(&mut self, a: NodeId) -> NodeId {
        Graph::exp(self, a)
    }
    fn square(&mut self, a: NodeId) -> NodeId {
        Graph::square(self, a)
    }
    fn custom(&mut self, dynamics: &dyn CustomDynamics, y: &[NodeId], p: &[NodeId]) -> Vec<NodeId> {
        dynamics.rhs_graph(self, y, p)
    }
}
