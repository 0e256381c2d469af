use rand::Rng;

use super::{ActnormLayer, CouplingLayer, InvConv1x1, Invertible};
use crate::error::Result;
use crate::numerics::{Graph, Param, Real, Shape, Tensor, Var};

/// One invertible transform of a flow step.
#[derive(Debug, Clone)]
pub enum FlowLayer<T: Real = f32> {
    Actnorm(ActnormLayer<T>),
    InvConv(InvConv1x1<T>),
    Coupling(CouplingLayer<T>),
}

impl<T: Real> FlowLayer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            FlowLayer::Actnorm(_) => "actnorm",
            FlowLayer::InvConv(_) => "invconv",
            FlowLayer::Coupling(_) => "coupling",
        }
    }

    fn inner(&self) -> &dyn Invertible<T> {
        match self {
            FlowLayer::Actnorm(l) => l,
            FlowLayer::InvConv(l) => l,
            FlowLayer::Coupling(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Invertible<T> {
        match self {
            FlowLayer::Actnorm(l) => l,
            FlowLayer::InvConv(l) => l,
            FlowLayer::Coupling(l) => l,
        }
    }
}

impl<T: Real> Invertible<T> for FlowLayer<T> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.inner().forward_graph(g, x)
    }

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        self.inner().inverse_graph(g, y)
    }

    fn logdet(&self, input: Shape) -> Result<f64> {
        self.inner().logdet(input)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.inner().params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.inner_mut().params_mut()
    }
}

/// Actnorm, then invertible 1x1 convolution, then coupling.
#[derive(Debug, Clone)]
pub struct FlowStep<T: Real = f32> {
    pub actnorm: ActnormLayer<T>,
    pub invconv: InvConv1x1<T>,
    pub coupling: CouplingLayer<T>,
}

impl<T: Real> FlowStep<T> {
    /// Actnorm awaiting data init, random orthogonal 1x1 conv, identity
    /// coupling.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            actnorm: ActnormLayer::new(channels),
            invconv: InvConv1x1::random_orthogonal(channels, rng),
            coupling: CouplingLayer::new(channels, hidden, rng)?,
        })
    }

    /// Every transform starts as the identity.
    pub fn identity<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            actnorm: ActnormLayer::new(channels),
            invconv: InvConv1x1::identity(channels),
            coupling: CouplingLayer::new(channels, hidden, rng)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.actnorm.channels()
    }

    pub fn layers(&self) -> [&dyn Invertible<T>; 3] {
        [&self.actnorm, &self.invconv, &self.coupling]
    }

    /// Forward with data-dependent actnorm initialization on first use.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.actnorm.initialize(x)?;
        self.forward(x)
    }

    /// Output and per-sample log-det.
    pub fn forward_with_logdet(&self, x: &Tensor<T>) -> Result<(Tensor<T>, f64)> {
        let y = self.forward(x)?;
        Ok((y, self.logdet(x.shape())?))
    }
}

impl<T: Real> Invertible<T> for FlowStep<T> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.actnorm.forward_graph(g, x)?;
        let h = self.invconv.forward_graph(g, h)?;
        self.coupling.forward_graph(g, h)
    }

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let h = self.coupling.inverse_graph(g, y)?;
        let h = self.invconv.inverse_graph(g, h)?;
        self.actnorm.inverse_graph(g, h)
    }

    /// Sum of the three layer log-dets (all shape-preserving).
    fn logdet(&self, input: Shape) -> Result<f64> {
        Ok(self.actnorm.logdet(input)?
            + self.invconv.logdet(input)?
            + self.coupling.logdet(input)?)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.actnorm.params();
        p.extend(self.invconv.params());
        p.extend(self.coupling.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.actnorm.params_mut();
        p.extend(self.invconv.params_mut());
        p.extend(self.coupling.params_mut());
        p
    }
}
