//! Three-stage CNN with global average pooling and a linear head. Each stage
//! is two 3x3 conv + ReLU layers; the first two stages end in 2x2 average
//! pooling.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::invnorm::checkpoint::{read_params, write_params, ByteReader, ByteWriter};
use crate::numerics::{Function, Graph, Param, Real, Shape, Tensor, Var};

/// Output channels of the three conv stages.
pub const CLASSIFIER_WIDTHS: [usize; 3] = [16, 32, 64];

/// Inputs are mapped to `(x - INPUT_CENTER) * INPUT_GAIN` before the first
/// conv, which puts `[0, 1]` pixels on a roughly unit scale.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_GAIN: f64 = 4.0;

const CONVS_PER_STAGE: usize = 2;

const MAGIC: &[u8; 4] = b"INVC";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct SmallCnn<T: Real = f32> {
    in_channels: usize,
    class_count: usize,
    /// `(weight, bias)` for the six convs and the head.
    layers: Vec<(Param<T>, Param<T>)>,
}

fn he_normal<T: Real, R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<T> {
    let fan_in = shape.c * shape.h * shape.w;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64(normal.sample(rng)))
}

/// `(weight, bias)` shapes of the conv stages and the head.
fn layer_shapes(in_channels: usize, class_count: usize) -> Vec<(Shape, Shape)> {
    let mut out = Vec::new();
    let mut cin = in_channels;
    for &w in &CLASSIFIER_WIDTHS {
        for _ in 0..CONVS_PER_STAGE {
            out.push((Shape::new(w, cin, 3, 3), Shape::new(1, w, 1, 1)));
            cin = w;
        }
    }
    out.push((
        Shape::new(class_count, cin, 1, 1),
        Shape::new(1, class_count, 1, 1),
    ));
    out
}

fn check_sizes(in_channels: usize, class_count: usize) -> Result<()> {
    if in_channels == 0 || class_count < 2 {
        return Err(Error::Config(format!(
            "classifier needs >= 1 input channel and >= 2 classes, got {in_channels}, {class_count}"
        )));
    }
    Ok(())
}

impl<T: Real> SmallCnn<T> {
    /// He-normal weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        class_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_sizes(in_channels, class_count)?;
        let layers = layer_shapes(in_channels, class_count)
            .into_iter()
            .map(|(ws, bs)| {
                (
                    Param::new("cnn.weight", he_normal(ws, rng)),
                    Param::new("cnn.bias", Tensor::zeros(bs)),
                )
            })
            .collect();
        Ok(Self {
            in_channels,
            class_count,
            layers,
        })
    }

    /// Rebuild from tensors in [`SmallCnn::params`] order.
    pub fn from_values(
        in_channels: usize,
        class_count: usize,
        values: Vec<Tensor<T>>,
    ) -> Result<Self> {
        check_sizes(in_channels, class_count)?;
        let shapes = layer_shapes(in_channels, class_count);
        if values.len() != 2 * shapes.len() {
            return Err(shape_err!(
                "classifier needs {} tensors, got {}",
                2 * shapes.len(),
                values.len()
            ));
        }
        let mut it = values.into_iter();
        let mut layers = Vec::new();
        for (ws, bs) in shapes {
            let (w, b) = (it.next().unwrap(), it.next().unwrap());
            if w.shape() != ws || b.shape() != bs {
                return Err(shape_err!(
                    "classifier layer expects {ws} and {bs}, got {} and {}",
                    w.shape(),
                    b.shape()
                ));
            }
            layers.push((Param::new("cnn.weight", w), Param::new("cnn.bias", b)));
        }
        Ok(Self {
            in_channels,
            class_count,
            layers,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Logits `(b, classes, 1, 1)`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x).c != self.in_channels {
            return Err(shape_err!(
                "classifier expects {} channels, got {}",
                self.in_channels,
                g.shape(x)
            ));
        }
        let c = self.in_channels;
        let gain = g.constant(Tensor::full(
            Shape::new(1, c, 1, 1),
            T::from_f64(INPUT_GAIN),
        ));
        let shift = g.constant(Tensor::full(
            Shape::new(1, c, 1, 1),
            T::from_f64(-INPUT_CENTER * INPUT_GAIN),
        ));
        let mut h = g.channel_affine(x, gain, shift)?;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(w), g.param(b));
            if i == last {
                h = g.global_avg_pool(h);
                return g.conv2d(h, wv, Some(bv));
            }
            h = g.conv2d(h, wv, Some(bv))?;
            h = g.relu(h);
            // pool after the first and second stage
            if (i + 1) % CONVS_PER_STAGE == 0 && i + 1 < last {
                h = g.avg_pool2(h)?;
            }
        }
        unreachable!("head returns")
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

impl SmallCnn<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.usize(self.in_channels);
        w.usize(self.class_count);
        write_params(&mut w, &self.params());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(data, MAGIC, VERSION)?;
        let in_channels = r.usize()?;
        let class_count = r.usize()?;
        let values = read_params(&mut r)?;
        r.finish()?;
        Self::from_values(in_channels, class_count, values)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn save_classifier(model: &SmallCnn<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<SmallCnn<f32>> {
    SmallCnn::from_bytes(&std::fs::read(path)?)
}

/// Mean softmax cross-entropy of `(b, k, 1, 1)` logits.
struct CrossEntropy {
    labels: Vec<usize>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Real> Function<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let logits = inputs[0];
        let (b, k) = (logits.shape().b, logits.shape().c);
        let scale = grad.data()[0].as_f64() / b as f64;
        let mut out = Vec::with_capacity(b * k);
        for (i, row) in logits.data().chunks(k).enumerate() {
            let p = softmax_row(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>());
            for (c, pc) in p.into_iter().enumerate() {
                let target = if c == self.labels[i] { 1.0 } else { 0.0 };
                out.push(T::from_f64(scale * (pc - target)));
            }
        }
        Ok(vec![Some(Tensor::from_vec_unchecked(logits.shape(), out))])
    }
}

pub(crate) fn cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
) -> Result<Var> {
    let s = g.shape(logits);
    if s.h != 1 || s.w != 1 || s.b != labels.len() || labels.iter().any(|&l| l >= s.c) {
        return Err(shape_err!(
            "cross entropy over {s} with {} labels",
            labels.len()
        ));
    }
    let mut loss = 0.0;
    for (row, &l) in g.value(logits).data().chunks(s.c).zip(labels) {
        let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    let value = Tensor::scalar(T::from_f64(loss / s.b as f64));
    Ok(g.apply(
        Box::new(CrossEntropy {
            labels: labels.to_vec(),
        }),
        &[logits],
        value,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{compare_grads, finite_diff_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logits_shape_and_param_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = SmallCnn::<f32>::new(3, 5, &mut rng).unwrap();
        let x = Tensor::uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut rng);
        assert_eq!(m.logits(&x).unwrap().shape(), Shape::new(2, 5, 1, 1));
        let want = (16 * 27 + 16)
            + (16 * 144 + 16)
            + (32 * 144 + 32)
            + (32 * 288 + 32)
            + (64 * 288 + 64)
            + (64 * 576 + 64)
            + (5 * 64 + 5);
        assert_eq!(m.param_count(), want);
    }

    #[test]
    fn cross_entropy_value_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::<f64>::uniform(Shape::new(3, 4, 1, 1), -2.0, 2.0, &mut rng);
        let labels = [0, 3, 1];
        let mut g = Graph::new();
        let l = g.watch(logits.clone());
        let loss = cross_entropy(&mut g, l, &labels).unwrap();
        // uniform logits give ln(k)
        let mut g0 = Graph::new();
        let z = g0.constant(Tensor::<f64>::zeros(Shape::new(2, 4, 1, 1)));
        let l0 = cross_entropy(&mut g0, z, &[0, 1]).unwrap();
        assert!((g0.value(l0).data()[0] - 4f64.ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let numeric = finite_diff_grad(
            |t| {
                let mut g = Graph::new();
                let v = g.constant(t.clone());
                let l = cross_entropy(&mut g, v, &labels)?;
                Ok(g.value(l).data()[0])
            },
            &logits,
            1e-3,
        )
        .unwrap();
        let cmp = compare_grads(g.grad(l).unwrap(), &numeric, 1e-4).unwrap();
        assert!(cmp.max_rel_err < 1e-6, "{cmp:?}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = SmallCnn::<f64>::new(3, 4, &mut rng).unwrap();
        let x = Tensor::uniform(Shape::new(2, 3, 16, 16), 0.0, 1.0, &mut rng);
        let labels = [1, 3];
        // tiny steps keep every ReLU on one side of its kink
        let loss_of = |m: &SmallCnn<f64>, x: &Tensor<f64>| -> Result<f64> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = m.forward_graph(&mut g, xv)?;
            let l = cross_entropy(&mut g, y, &labels)?;
            Ok(g.value(l).data()[0])
        };
        let mut g = Graph::new();
        let xv = g.watch(x.clone());
        let y = m.forward_graph(&mut g, xv).unwrap();
        let l = cross_entropy(&mut g, y, &labels).unwrap();
        g.backward(l).unwrap();
        let numeric = finite_diff_grad(|t| loss_of(&m, t), &x, 1e-6).unwrap();
        let cmp = compare_grads(g.grad(xv).unwrap(), &numeric, 1e-6).unwrap();
        assert!(cmp.max_rel_err < 1e-3, "input {cmp:?}");
        // one random direction per parameter tensor
        for i in 0..m.params().len() {
            let value = m.params()[i].value().clone();
            let dir = Tensor::<f64>::uniform(value.shape(), -1.0, 1.0, &mut rng);
            let at = |t: f64| -> f64 {
                let mut probe = m.clone();
                let moved: Vec<f64> = value
                    .data()
                    .iter()
                    .zip(dir.data())
                    .map(|(v, d)| v + t * d)
                    .collect();
                probe.params_mut()[i]
                    .set_value(Tensor::new(value.shape(), moved).unwrap())
                    .unwrap();
                loss_of(&probe, &x).unwrap()
            };
            let eps = 1e-6;
            let numeric = (at(eps) - at(-eps)) / (2.0 * eps);
            let analytic = g.param_grad(m.params()[i]).unwrap();
            let dot: f64 = analytic
                .data()
                .iter()
                .zip(dir.data())
                .map(|(a, d)| a * d)
                .sum();
            let rel = (dot - numeric).abs() / dot.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: {dot} vs {numeric}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = SmallCnn::<f32>::new(3, 4, &mut rng).unwrap();
        let bytes = m.to_bytes();
        let back = SmallCnn::from_bytes(&bytes).unwrap();
        let x = Tensor::uniform(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
        assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(matches!(SmallCnn::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(
            SmallCnn::from_bytes(&bytes[..30]),
            Err(Error::Format(_))
        ));
    }
}
