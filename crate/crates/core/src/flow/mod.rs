//! Invertible primitives: squeeze, actnorm, 1x1 convolution, coupling.

mod actnorm;
mod coupling;
mod invconv;
mod layer;
pub mod squeeze;

pub use actnorm::ActnormLayer;
pub use coupling::{CouplingLayer, DEFAULT_HIDDEN};
pub use invconv::InvConv1x1;
pub use layer::{FlowLayer, FlowStep};
pub use squeeze::{squeeze_forward, squeeze_inverse, SqueezeRecord, SqueezeStack};

use crate::error::Result;
use crate::numerics::{Graph, Param, Real, Shape, Tensor, Var};

/// A bijection with a tractable log-determinant.
///
/// The `*_graph` methods record onto a tape so gradients reach the layer's
/// parameters; [`forward`](Invertible::forward) and
/// [`inverse`](Invertible::inverse) evaluate the same code on a throwaway
/// tape.
pub trait Invertible<T: Real> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var>;

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var>;

    /// `log|det d forward / dx|` for one sample of the given shape.
    fn logdet(&self, input: Shape) -> Result<f64>;

    fn params(&self) -> Vec<&Param<T>>;

    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = self.forward_graph(&mut g, v)?;
        Ok(g.value(y).clone())
    }

    fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(y.clone());
        let x = self.inverse_graph(&mut g, v)?;
        Ok(g.value(x).clone())
    }
}
