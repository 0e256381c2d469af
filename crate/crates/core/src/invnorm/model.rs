use rand::Rng;
use serde::{Deserialize, Serialize};

use super::instance_norm::{InstanceNormLayer, StyleStats, DEFAULT_EPS};
use crate::error::{shape_err, Error, Result};
use crate::flow::squeeze::{squeeze_graph, unsqueeze_graph};
use crate::flow::{FlowStep, Invertible, SqueezeStack, DEFAULT_HIDDEN};
use crate::numerics::{Graph, Param, Real, Shape, Tensor, Var};

/// Number of squeeze + flow blocks.
pub const BLOCKS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvNormConfig {
    pub input_channels: usize,
    pub steps_per_block: usize,
    pub hidden: usize,
    pub eps: f64,
}

impl InvNormConfig {
    pub fn new(input_channels: usize) -> Self {
        Self {
            input_channels,
            steps_per_block: 5,
            hidden: DEFAULT_HIDDEN,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_steps(self, steps_per_block: usize) -> Self {
        Self {
            steps_per_block,
            ..self
        }
    }

    pub fn with_hidden(self, hidden: usize) -> Self {
        Self { hidden, ..self }
    }

    /// Channels entering block `i` (0-based), after its squeeze.
    pub fn block_channels(&self, i: usize) -> usize {
        self.input_channels * 4usize.pow(i as u32 + 1)
    }

    /// Channels of the normalized feature space.
    pub fn feature_channels(&self) -> usize {
        self.block_channels(BLOCKS - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.steps_per_block == 0 || self.hidden == 0 {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Feature shape produced by encode for an input shape.
    pub fn feature_shape(&self, input: Shape) -> Shape {
        let (mut h, mut w) = (input.h, input.w);
        for _ in 0..BLOCKS {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Shape::new(input.b, self.feature_channels(), h, w)
    }
}

/// Squeeze followed by flow steps.
#[derive(Debug, Clone)]
pub struct FlowBlock<T: Real = f32> {
    pub steps: Vec<FlowStep<T>>,
}

/// Result of [`InvNormModel::encode`].
#[derive(Debug, Clone)]
pub struct Encoded<T: Real = f32> {
    pub features: Tensor<T>,
    /// Per-sample log-det of the whole encoder.
    pub logdet: Vec<f64>,
    /// Needed by [`InvNormModel::decode`].
    pub records: SqueezeStack,
}

/// Result of [`InvNormModel::forward`].
#[derive(Debug, Clone)]
pub struct InvNormOutput<T: Real = f32> {
    pub output: Tensor<T>,
    pub stats: StyleStats,
    pub logdet: Vec<f64>,
}

/// Two flow blocks around an instance-normalization layer:
/// encode, normalize, then decode with the exact inverse of the encoder.
///
/// The model holds no per-call state: squeeze records travel from encode to
/// decode in a [`SqueezeStack`], so one model can serve concurrent callers.
#[derive(Debug, Clone)]
pub struct InvNormModel<T: Real = f32> {
    config: InvNormConfig,
    blocks: Vec<FlowBlock<T>>,
    norm: InstanceNormLayer<T>,
}

impl<T: Real> InvNormModel<T> {
    /// Random orthogonal 1x1 convolutions, identity couplings, actnorm
    /// awaiting data-dependent initialization.
    pub fn new<R: Rng + ?Sized>(config: InvNormConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, rng, FlowStep::new)
    }

    /// Every flow transform starts as the identity.
    pub fn identity<R: Rng + ?Sized>(config: InvNormConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, rng, FlowStep::identity)
    }

    fn build<R: Rng + ?Sized>(
        config: InvNormConfig,
        rng: &mut R,
        step: fn(usize, usize, &mut R) -> Result<FlowStep<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let blocks = (0..BLOCKS)
            .map(|i| {
                let steps = (0..config.steps_per_block)
                    .map(|_| step(config.block_channels(i), config.hidden, rng))
                    .collect::<Result<_>>()?;
                Ok(FlowBlock { steps })
            })
            .collect::<Result<_>>()?;
        let norm = InstanceNormLayer::new(config.feature_channels(), config.eps)?;
        Ok(Self {
            config,
            blocks,
            norm,
        })
    }

    pub(crate) fn from_parts(
        config: InvNormConfig,
        blocks: Vec<FlowBlock<T>>,
        norm: InstanceNormLayer<T>,
    ) -> Result<Self> {
        config.validate()?;
        if blocks.len() != BLOCKS {
            return Err(Error::Format(format!(
                "expected {BLOCKS} blocks, got {}",
                blocks.len()
            )));
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.steps.len() != config.steps_per_block
                || b.steps
                    .iter()
                    .any(|s| s.channels() != config.block_channels(i))
            {
                return Err(Error::Format(format!(
                    "block {i} does not match {config:?}"
                )));
            }
        }
        if norm.channels() != config.feature_channels() {
            return Err(Error::Format(
                "instance norm width does not match config".into(),
            ));
        }
        Ok(Self {
            config,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &InvNormConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[FlowBlock<T>] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [FlowBlock<T>] {
        &mut self.blocks
    }

    pub fn norm(&self) -> &InstanceNormLayer<T> {
        &self.norm
    }

    pub fn norm_mut(&mut self) -> &mut InstanceNormLayer<T> {
        &mut self.norm
    }

    pub fn steps(&self) -> impl Iterator<Item = &FlowStep<T>> {
        self.blocks.iter().flat_map(|b| b.steps.iter())
    }

    pub fn steps_mut(&mut self) -> impl Iterator<Item = &mut FlowStep<T>> {
        self.blocks.iter_mut().flat_map(|b| b.steps.iter_mut())
    }

    pub fn is_initialized(&self) -> bool {
        self.steps().all(|s| s.actnorm.is_initialized())
    }

    /// Parameters in declaration order: block by block, step by step
    /// (actnorm, 1x1 conv, coupling), then instance norm.
    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.steps().flat_map(|s| s.params()).collect();
        p.extend(self.norm.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = Vec::new();
        for b in &mut self.blocks {
            for s in &mut b.steps {
                p.extend(s.params_mut());
            }
        }
        p.extend(self.norm.params_mut());
        p
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != self.config.input_channels {
            return Err(shape_err!(
                "model expects {} input channels, got {s}",
                self.config.input_channels
            ));
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization from one batch, propagating the
    /// batch through the encoder. Already-initialized layers are kept.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = crate::flow::squeeze_forward(&h).0;
            for step in &mut block.steps {
                h = step.initialize(&h)?;
            }
        }
        Ok(())
    }

    pub fn encode_graph(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, SqueezeStack)> {
        self.check_input(g.shape(x))?;
        let mut records = SqueezeStack::new();
        let mut h = x;
        for block in &self.blocks {
            let (v, rec) = squeeze_graph(g, h);
            records.push(rec);
            h = v;
            for step in &block.steps {
                h = step.forward_graph(g, h)?;
            }
        }
        Ok((h, records))
    }

    /// Undo [`encode_graph`](Self::encode_graph), consuming its records.
    pub fn decode_graph(
        &self,
        g: &mut Graph<T>,
        z: Var,
        records: &mut SqueezeStack,
    ) -> Result<Var> {
        let zs = g.shape(z);
        if zs.c != self.config.feature_channels() {
            return Err(shape_err!(
                "decode expects {} feature channels, got {zs}",
                self.config.feature_channels()
            ));
        }
        if records.len() < BLOCKS {
            return Err(Error::State(format!(
                "decode needs {BLOCKS} squeeze records, {} available",
                records.len()
            )));
        }
        let mut h = z;
        for block in self.blocks.iter().rev() {
            for step in block.steps.iter().rev() {
                h = step.inverse_graph(g, h)?;
            }
            let rec = records.pop()?;
            h = unsqueeze_graph(g, h, &rec).map_err(|e| match e {
                Error::Shape(m) => Error::State(format!("squeeze record mismatch: {m}")),
                other => other,
            })?;
        }
        Ok(h)
    }

    /// Encode, normalize, decode. Output has the input's shape.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, StyleStats)> {
        let (z, mut records) = self.encode_graph(g, x)?;
        let (n, stats) = self.norm.normalize_graph(g, z)?;
        let out = self.decode_graph(g, n, &mut records)?;
        Ok((out, stats))
    }

    /// Per-sample encoder log-det for an input shape.
    pub fn encode_logdet(&self, input: Shape) -> Result<f64> {
        let mut shape = input;
        let mut total = 0.0;
        for block in &self.blocks {
            shape = Shape::new(
                shape.b,
                shape.c * 4,
                shape.h.div_ceil(2),
                shape.w.div_ceil(2),
            );
            for step in &block.steps {
                total += step.logdet(shape)?;
            }
        }
        Ok(total)
    }

    pub fn encode(&self, x: &Tensor<T>) -> Result<Encoded<T>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let (z, records) = self.encode_graph(&mut g, v)?;
        let ld = self.encode_logdet(x.shape())?;
        Ok(Encoded {
            features: g.value(z).clone(),
            logdet: vec![ld; x.shape().b],
            records,
        })
    }

    pub fn decode(&self, z: &Tensor<T>, records: &mut SqueezeStack) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(z.clone());
        let x = self.decode_graph(&mut g, v, records)?;
        Ok(g.value(x).clone())
    }

    pub fn instance_normalize(&self, z: &Tensor<T>) -> Result<(Tensor<T>, StyleStats)> {
        self.norm.normalize(z)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<InvNormOutput<T>> {
        let mut enc = self.encode(x)?;
        let (n, stats) = self.instance_normalize(&enc.features)?;
        let output = self.decode(&n, &mut enc.records)?;
        Ok(InvNormOutput {
            output,
            stats,
            logdet: enc.logdet,
        })
    }

    pub fn cast<U: Real>(&self) -> InvNormModel<U> {
        let cast_step = |s: &FlowStep<T>| FlowStep {
            actnorm: crate::flow::ActnormLayer::from_parts(
                s.actnorm.scale().value().cast(),
                s.actnorm.shift().value().cast(),
                s.actnorm.is_initialized(),
            )
            .expect("valid layer stays valid"),
            invconv: {
                let p = s.invconv.params();
                crate::flow::InvConv1x1::from_parts(
                    s.invconv.perm().to_vec(),
                    s.invconv.sign().to_vec(),
                    p[0].value().cast(),
                    p[1].value().cast(),
                    p[2].value().cast(),
                )
                .expect("valid layer stays valid")
            },
            coupling: {
                let p = s.coupling.params();
                crate::flow::CouplingLayer::from_parts(
                    s.coupling.channels(),
                    s.coupling.split(),
                    p[0].value().cast(),
                    p[1].value().cast(),
                    p[2].value().cast(),
                    p[3].value().cast(),
                )
                .expect("valid layer stays valid")
            },
        };
        InvNormModel {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| FlowBlock {
                    steps: b.steps.iter().map(cast_step).collect(),
                })
                .collect(),
            norm: self.norm.cast(),
        }
    }
}
