//! Per-channel affine activation normalization, `y = s * x + b`.

use super::Invertible;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Param, Real, Shape, Tensor, Var};

/// Scales at or below this magnitude make the layer non-invertible.
pub const MIN_SCALE: f64 = 1e-8;

/// Channels whose batch std falls below this keep `s = 1, b = 0` at
/// data-dependent initialization.
pub const INIT_MIN_STD: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ActnormLayer<T: Real = f32> {
    scale: Param<T>,
    shift: Param<T>,
    initialized: bool,
}

impl<T: Real> ActnormLayer<T> {
    /// Identity layer (`s = 1`, `b = 0`) awaiting data-dependent init.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(
                "actnorm.scale",
                Tensor::full(Shape::new(1, channels, 1, 1), T::one()),
            ),
            shift: Param::new(
                "actnorm.shift",
                Tensor::zeros(Shape::new(1, channels, 1, 1)),
            ),
            initialized: false,
        }
    }

    /// Initialized layer with the given parameters.
    pub fn from_values(scale: &[T], shift: &[T]) -> Result<Self> {
        Self::from_parts(Tensor::vector(scale), Tensor::vector(shift), true)
    }

    pub fn from_parts(scale: Tensor<T>, shift: Tensor<T>, initialized: bool) -> Result<Self> {
        let c = scale.numel();
        if c == 0 || scale.shape() != Shape::new(1, c, 1, 1) || shift.shape() != scale.shape() {
            return Err(shape_err!(
                "actnorm needs matching (1, C, 1, 1) scale/shift, got {} and {}",
                scale.shape(),
                shift.shape()
            ));
        }
        let layer = Self {
            scale: Param::new("actnorm.scale", scale),
            shift: Param::new("actnorm.shift", shift),
            initialized,
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.scale.value().numel()
    }

    pub fn scale(&self) -> &Param<T> {
        &self.scale
    }

    pub fn shift(&self) -> &Param<T> {
        &self.shift
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Set `s = 1/sigma`, `b = -mu/sigma` from per-channel batch statistics so
    /// this batch leaves the layer with zero mean and unit std per channel.
    /// No-op once initialized.
    pub fn initialize(&mut self, x: &Tensor<T>) -> Result<()> {
        if self.initialized {
            return Ok(());
        }
        let s = x.shape();
        if s.c != self.channels() {
            return Err(shape_err!(
                "actnorm over {} channels got {s}",
                self.channels()
            ));
        }
        let count = (s.b * s.spatial()) as f64;
        let mut scale = Vec::with_capacity(s.c);
        let mut shift = Vec::with_capacity(s.c);
        for c in 0..s.c {
            let values = (0..s.b).flat_map(|b| x.plane(b, c).iter().map(|v| v.as_f64()));
            let mean = values.clone().sum::<f64>() / count;
            let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let std = var.sqrt();
            if std < INIT_MIN_STD {
                scale.push(T::one());
                shift.push(T::zero());
            } else {
                scale.push(T::from_f64(1.0 / std));
                shift.push(T::from_f64(-mean / std));
            }
        }
        self.scale.set_value(Tensor::vector(&scale))?;
        self.shift.set_value(Tensor::vector(&shift))?;
        self.initialized = true;
        Ok(())
    }

    pub fn check(&self) -> Result<()> {
        for (c, s) in self.scale.value().data().iter().enumerate() {
            let s = s.as_f64();
            if !s.is_finite() || s.abs() <= MIN_SCALE {
                return Err(Error::SingularLayer(format!("actnorm scale[{c}] = {s}")));
            }
        }
        Ok(())
    }
}

impl<T: Real> Invertible<T> for ActnormLayer<T> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check()?;
        let (s, b) = (g.param(&self.scale), g.param(&self.shift));
        g.channel_affine(x, s, b)
    }

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        self.check()?;
        let (s, b) = (g.param(&self.scale), g.param(&self.shift));
        g.channel_affine_inv(y, s, b)
    }

    fn logdet(&self, input: Shape) -> Result<f64> {
        self.check()?;
        if input.c != self.channels() {
            return Err(shape_err!(
                "actnorm over {} channels got {input}",
                self.channels()
            ));
        }
        let sum: f64 = self
            .scale
            .value()
            .data()
            .iter()
            .map(|s| s.as_f64().abs().ln())
            .sum();
        Ok(input.spatial() as f64 * sum)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.shift]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}
