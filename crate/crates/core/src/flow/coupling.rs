//! Subtractive coupling: the first `d` channels pass through and the rest
//! have `f(passive)` subtracted. `f` is conv3x3 -> ReLU -> conv3x3 with a
//! zero-initialized output stage, so a fresh layer is the identity.

use rand::Rng;

use super::Invertible;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Param, Real, Shape, Tensor, Var};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone)]
pub struct CouplingLayer<T: Real = f32> {
    channels: usize,
    split: usize,
    hidden_w: Param<T>,
    hidden_b: Param<T>,
    out_w: Param<T>,
    out_b: Param<T>,
}

impl<T: Real> CouplingLayer<T> {
    /// Passive partition is the first `channels / 2` channels.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if channels < 2 {
            return Err(shape_err!(
                "coupling needs at least 2 channels, got {channels}"
            ));
        }
        if hidden == 0 {
            return Err(Error::Config(
                "coupling hidden width must be positive".into(),
            ));
        }
        let split = channels / 2;
        let active = channels - split;
        let fan_in = (split * 9) as f64;
        Ok(Self {
            channels,
            split,
            hidden_w: Param::new(
                "coupling.hidden_w",
                Tensor::normal(Shape::new(hidden, split, 3, 3), (2.0 / fan_in).sqrt(), rng),
            ),
            hidden_b: Param::new(
                "coupling.hidden_b",
                Tensor::zeros(Shape::new(1, hidden, 1, 1)),
            ),
            out_w: Param::new(
                "coupling.out_w",
                Tensor::zeros(Shape::new(active, hidden, 3, 3)),
            ),
            out_b: Param::new("coupling.out_b", Tensor::zeros(Shape::new(1, active, 1, 1))),
        })
    }

    /// Assemble from stored weights (checkpoint loading).
    pub fn from_parts(
        channels: usize,
        split: usize,
        hidden_w: Tensor<T>,
        hidden_b: Tensor<T>,
        out_w: Tensor<T>,
        out_b: Tensor<T>,
    ) -> Result<Self> {
        if channels < 2 || split == 0 || split >= channels {
            return Err(shape_err!(
                "coupling split {split} invalid for {channels} channels"
            ));
        }
        let hidden = hidden_w.shape().b;
        let active = channels - split;
        if hidden_w.shape() != Shape::new(hidden, split, 3, 3)
            || hidden_b.shape() != Shape::new(1, hidden, 1, 1)
            || out_w.shape() != Shape::new(active, hidden, 3, 3)
            || out_b.shape() != Shape::new(1, active, 1, 1)
        {
            return Err(shape_err!(
                "coupling weights do not match split {split}/{channels}"
            ));
        }
        Ok(Self {
            channels,
            split,
            hidden_w: Param::new("coupling.hidden_w", hidden_w),
            hidden_b: Param::new("coupling.hidden_b", hidden_b),
            out_w: Param::new("coupling.out_w", out_w),
            out_b: Param::new("coupling.out_b", out_b),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn hidden(&self) -> usize {
        self.hidden_w.value().shape().b
    }

    /// Replace the zero output stage with random weights, making `f`
    /// non-trivial. Used by verification commands and tests.
    pub fn randomize_output<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let s = self.out_w.value().shape();
        *self.out_w.value_mut() = Tensor::normal(s, std, rng);
        let s = self.out_b.value().shape();
        *self.out_b.value_mut() = Tensor::normal(s, std, rng);
    }

    /// The coupling network applied to the passive partition.
    pub fn coupling_net(&self, g: &mut Graph<T>, passive: Var) -> Result<Var> {
        let (w1, b1) = (g.param(&self.hidden_w), g.param(&self.hidden_b));
        let (w2, b2) = (g.param(&self.out_w), g.param(&self.out_b));
        let h = g.conv2d(passive, w1, Some(b1))?;
        let h = g.relu(h);
        g.conv2d(h, w2, Some(b2))
    }

    fn split_input(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var, Var)> {
        let s = g.shape(x);
        if s.c != self.channels {
            return Err(shape_err!(
                "coupling over {} channels got {s}",
                self.channels
            ));
        }
        let passive = g.narrow_channels(x, 0, self.split)?;
        let active = g.narrow_channels(x, self.split, self.channels - self.split)?;
        let shift = self.coupling_net(g, passive)?;
        if g.shape(shift) != g.shape(active) {
            return Err(shape_err!(
                "coupling net output {} does not match active partition {}",
                g.shape(shift),
                g.shape(active)
            ));
        }
        Ok((passive, active, shift))
    }
}

impl<T: Real> Invertible<T> for CouplingLayer<T> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (passive, active, shift) = self.split_input(g, x)?;
        let out = g.sub(active, shift)?;
        g.concat_channels(passive, out)
    }

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let (passive, active, shift) = self.split_input(g, y)?;
        let out = g.add(active, shift)?;
        g.concat_channels(passive, out)
    }

    /// Unit-triangular Jacobian: always exactly zero.
    fn logdet(&self, input: Shape) -> Result<f64> {
        if input.c != self.channels {
            return Err(shape_err!(
                "coupling over {} channels got {input}",
                self.channels
            ));
        }
        Ok(0.0)
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.hidden_w,
            &mut self.hidden_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dense_jacobian_logdet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = CouplingLayer::<f32>::new(4, 8, &mut rng).unwrap();
        let x = Tensor::uniform(Shape::new(2, 4, 3, 5), -3.0, 3.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap(), x);
        assert_eq!(layer.split(), 2);
    }

    #[test]
    fn odd_channel_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = CouplingLayer::<f32>::new(5, 4, &mut rng).unwrap();
        assert_eq!(layer.split(), 2);
        assert!(CouplingLayer::<f32>::new(1, 4, &mut rng).is_err());
    }

    #[test]
    fn passive_channels_untouched_active_shifted() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = CouplingLayer::<f64>::new(4, 6, &mut rng).unwrap();
        layer.randomize_output(0.5, &mut rng);
        let x = Tensor::uniform(Shape::new(1, 4, 3, 3), -3.0, 3.0, &mut rng);
        let y = layer.forward(&x).unwrap();
        assert_eq!(
            y.narrow_channels(0, 2).unwrap(),
            x.narrow_channels(0, 2).unwrap()
        );
        assert!(
            y.narrow_channels(2, 2)
                .unwrap()
                .max_abs_diff(&x.narrow_channels(2, 2).unwrap())
                > 1e-3
        );
    }

    #[test]
    fn volume_preserving_per_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = CouplingLayer::<f64>::new(4, 6, &mut rng).unwrap();
        layer.randomize_output(0.5, &mut rng);
        let x = Tensor::uniform(Shape::new(1, 4, 2, 2), -3.0, 3.0, &mut rng);
        let dense = dense_jacobian_logdet(|t| layer.forward(t), &x, 1e-3).unwrap();
        assert!(dense.abs() < 1e-2, "dense {dense}");
        assert_eq!(layer.logdet(x.shape()).unwrap(), 0.0);
    }

    #[test]
    fn round_trip_with_random_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = CouplingLayer::<f32>::new(6, 8, &mut rng).unwrap();
        layer.randomize_output(0.5, &mut rng);
        let x = Tensor::uniform(Shape::new(2, 6, 5, 4), -3.0, 3.0, &mut rng);
        let back = layer.inverse(&layer.forward(&x).unwrap()).unwrap();
        // (a - f) + f rounds at most once per direction
        let bound = 4.0 * f32::EPSILON as f64 * (x.max_abs() + 10.0);
        assert!(back.max_abs_diff(&x) <= bound, "{}", back.max_abs_diff(&x));
        assert_eq!(
            back.narrow_channels(0, 3).unwrap(),
            x.narrow_channels(0, 3).unwrap()
        );
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = CouplingLayer::<f32>::new(4, 4, &mut rng).unwrap();
        let x = Tensor::zeros(Shape::new(1, 6, 2, 2));
        assert!(matches!(layer.forward(&x), Err(Error::Shape(_))));
    }
}
