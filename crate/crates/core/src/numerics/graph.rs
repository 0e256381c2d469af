//! Reverse-mode tape over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and records how to push a gradient back
//! to its inputs. [`Graph::backward`] walks the tape once in reverse.
//! Layer-specific operations plug in through [`Function`].

use std::collections::HashMap;

use super::kernels;
use super::param::{Param, ParamId};
use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule for an operation defined outside this module.
///
/// The caller computes the forward value and records it with
/// [`Graph::apply`]; `backward` receives the recorded input values, the
/// output value and the output gradient, and returns one optional gradient
/// per input, in input order.
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Real> {
    Constant,
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    ChannelAffine {
        x: Var,
        scale: Var,
        shift: Var,
    },
    ChannelAffineInv {
        y: Var,
        scale: Var,
        shift: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu(Var),
    Narrow {
        x: Var,
        start: usize,
    },
    Concat(Var, Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    WeightedSum(Var, Tensor<T>),
    Custom {
        inputs: Vec<Var>,
        f: Box<dyn Function<T>>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn channel_vector_check(x: Shape, v: Shape) -> Result<()> {
    if v != Shape::new(1, x.c, 1, 1) {
        return Err(shape_err!("per-channel vector {v} does not match {x}"));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` target with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Value that takes no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Value whose gradient is kept after `backward`.
    pub fn watch(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a parameter. Repeated calls with the same parameter return
    /// the same node, so gradients from every use are summed.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.watch(p.value().clone());
        self.params.insert(p.id(), v);
        v
    }

    /// Add this graph's gradient for `p` (if `p` was used) into `p.grad`.
    pub fn accumulate_into(&self, p: &mut Param<T>) -> Result<()> {
        let id = p.id();
        if let Some(g) = self.params.get(&id).and_then(|v| self.grads[v.0].as_ref()) {
            p.accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Gradient recorded for a parameter leaf, if the parameter was used.
    pub fn param_grad(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params
            .get(&p.id())
            .and_then(|v| self.grads[v.0].as_ref())
    }

    /// Smallest `|input|` over every ReLU on the tape: how far the recorded
    /// point is from a kink. `None` without ReLUs.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|v| v.as_f64().abs())
                        .fold(f64::INFINITY, f64::min),
                ),
                _ => None,
            })
            .reduce(f64::min)
    }

    /// Record the result of an externally computed operation.
    pub fn apply(&mut self, f: Box<dyn Function<T>>, inputs: &[Var], output: Tensor<T>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                f,
            },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// `x * scale[c] + shift[c]` with `(1, C, 1, 1)` scale and shift.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let xs = self.shape(x);
        channel_vector_check(xs, self.shape(scale))?;
        channel_vector_check(xs, self.shape(shift))?;
        let mut out = self.value(x).clone();
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        for n in 0..xs.b {
            for c in 0..xs.c {
                let (sc, bc) = (s[c], b[c]);
                out.plane_mut(n, c)
                    .iter_mut()
                    .for_each(|v| *v = *v * sc + bc);
            }
        }
        let rg = self.rg(x) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffine { x, scale, shift }, rg))
    }

    /// `(y - shift[c]) / scale[c]`, the inverse of [`Graph::channel_affine`].
    pub fn channel_affine_inv(&mut self, y: Var, scale: Var, shift: Var) -> Result<Var> {
        let ys = self.shape(y);
        channel_vector_check(ys, self.shape(scale))?;
        channel_vector_check(ys, self.shape(shift))?;
        let mut out = self.value(y).clone();
        let (s, b) = (self.value(scale).data(), self.value(shift).data());
        for n in 0..ys.b {
            for c in 0..ys.c {
                let (sc, bc) = (s[c], b[c]);
                out.plane_mut(n, c)
                    .iter_mut()
                    .for_each(|v| *v = (*v - bc) / sc);
            }
        }
        let rg = self.rg(y) || self.rg(scale) || self.rg(shift);
        Ok(self.push(out, Op::ChannelAffineInv { y, scale, shift }, rg))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        if let Some(b) = bias {
            let ws = self.shape(weight);
            if self.shape(b) != Shape::new(1, ws.b, 1, 1) {
                return Err(shape_err!(
                    "conv bias {} does not match weight {ws}",
                    self.shape(b)
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let rg = self.rg(x) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, weight, bias }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow_channels(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, start }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::avg_pool2_forward(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::AvgPool2(x), rg))
    }

    /// Spatial mean, `(B, C, H, W) -> (B, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let inv = 1.0 / s.spatial() as f64;
        let mut data = Vec::with_capacity(s.b * s.c);
        for n in 0..s.b {
            for c in 0..s.c {
                let m: f64 = t.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>() * inv;
                data.push(T::from_f64(m));
            }
        }
        let out = Tensor::from_vec_unchecked(Shape::new(s.b, s.c, 1, 1), data);
        let rg = self.rg(x);
        self.push(out, Op::GlobalAvgPool(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(T::from_f64(self.value(x).sum_f64()));
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// `sum(x * weights)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return Err(shape_err!(
                "weights {} do not match {}",
                weights.shape(),
                self.shape(x)
            ));
        }
        let out = Tensor::scalar(T::from_f64(self.value(x).dot_f64(&weights)));
        let rg = self.rg(x);
        Ok(self.push(out, Op::WeightedSum(x, weights), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves are kept (and
    /// summed with any earlier sweep); intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {ls}"));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        pending[loss.0] = Some(Tensor::full(ls, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut send = |v: Var, t: Tensor<T>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match pending[v.0].as_mut() {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        pending[v.0] = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => match self.grads[i].as_mut() {
                    Some(acc) => acc.add_assign(&g)?,
                    None => self.grads[i] = Some(g),
                },
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v))?;
                    send(*a, g)?;
                }
                Op::ChannelAffine { x, scale, shift } => {
                    let xv = &self.nodes[x.0].value;
                    let s = self.nodes[scale.0].value.data();
                    let sh = xv.shape();
                    let mut dx = g.clone();
                    let mut ds = vec![0.0f64; sh.c];
                    let mut db = vec![0.0f64; sh.c];
                    for n in 0..sh.b {
                        for c in 0..sh.c {
                            let gp = g.plane(n, c);
                            let xp = xv.plane(n, c);
                            for (gv, xvv) in gp.iter().zip(xp) {
                                ds[c] += gv.as_f64() * xvv.as_f64();
                                db[c] += gv.as_f64();
                            }
                            let sc = s[c];
                            dx.plane_mut(n, c).iter_mut().for_each(|v| *v *= sc);
                        }
                    }
                    let (x, scale, shift) = (*x, *scale, *shift);
                    send(scale, vec_tensor(&ds))?;
                    send(shift, vec_tensor(&db))?;
                    send(x, dx)?;
                }
                Op::ChannelAffineInv { y, scale, shift } => {
                    // out = (y - b) / s
                    let out = &node.value;
                    let s = self.nodes[scale.0].value.data();
                    let sh = out.shape();
                    let mut dy = g.clone();
                    let mut ds = vec![0.0f64; sh.c];
                    let mut db = vec![0.0f64; sh.c];
                    for n in 0..sh.b {
                        for c in 0..sh.c {
                            let inv = 1.0 / s[c].as_f64();
                            for (gv, ov) in g.plane(n, c).iter().zip(out.plane(n, c)) {
                                ds[c] -= gv.as_f64() * ov.as_f64() * inv;
                                db[c] -= gv.as_f64() * inv;
                            }
                            let sc = s[c];
                            dy.plane_mut(n, c).iter_mut().for_each(|v| *v = *v / sc);
                        }
                    }
                    let (y, scale, shift) = (*y, *scale, *shift);
                    send(scale, vec_tensor(&ds))?;
                    send(shift, vec_tensor(&db))?;
                    send(y, dy)?;
                }
                Op::Conv2d { x, weight, bias } => {
                    let (x, weight, bias) = (*x, *weight, *bias);
                    let need_x = self.nodes[x.0].requires_grad;
                    let grads = kernels::conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        need_x,
                    )?;
                    if let Some(b) = bias {
                        send(b, grads.bias)?;
                    }
                    send(weight, grads.weight)?;
                    if let Some(dx) = grads.input {
                        send(x, dx)?;
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let dx = g.zip_map(xv, |gv, v| if v > T::zero() { gv } else { T::zero() })?;
                    send(*x, dx)?;
                }
                Op::Narrow { x, start } => {
                    let xs = self.nodes[x.0].value.shape();
                    let gs = g.shape();
                    let hw = xs.spatial();
                    let mut dx = Tensor::zeros(xs);
                    for n in 0..xs.b {
                        let src = &g.data()[n * gs.c * hw..(n + 1) * gs.c * hw];
                        let base = (n * xs.c + start) * hw;
                        dx.data_mut()[base..base + gs.c * hw].copy_from_slice(src);
                    }
                    send(*x, dx)?;
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[a.0].value.shape().c;
                    let cb = self.nodes[b.0].value.shape().c;
                    let (a, b) = (*a, *b);
                    send(a, g.narrow_channels(0, ca)?)?;
                    send(b, g.narrow_channels(ca, cb)?)?;
                }
                Op::AvgPool2(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    send(*x, kernels::avg_pool2_backward(xs, &g))?;
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    let inv = T::from_f64(1.0 / xs.spatial() as f64);
                    let mut dx = Tensor::zeros(xs);
                    for n in 0..xs.b {
                        for c in 0..xs.c {
                            let v = g.data()[n * xs.c + c] * inv;
                            dx.plane_mut(n, c).fill(v);
                        }
                    }
                    send(*x, dx)?;
                }
                Op::Sum(x) => {
                    let xs = self.nodes[x.0].value.shape();
                    send(*x, Tensor::full(xs, g.data()[0]))?;
                }
                Op::WeightedSum(x, w) => {
                    send(*x, w.scale(g.data()[0]))?;
                }
                Op::Custom { inputs, f } => {
                    let vals: Vec<&Tensor<T>> =
                        inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let grads = f.backward(&vals, &node.value, &g)?;
                    if grads.len() != inputs.len() {
                        return Err(shape_err!(
                            "{} returned {} gradients for {} inputs",
                            f.name(),
                            grads.len(),
                            inputs.len()
                        ));
                    }
                    for (&v, gi) in inputs.iter().zip(grads) {
                        if let Some(gi) = gi {
                            if gi.shape() != self.nodes[v.0].value.shape() {
                                return Err(shape_err!(
                                    "{} gradient {} does not match input {}",
                                    f.name(),
                                    gi.shape(),
                                    self.nodes[v.0].value.shape()
                                ));
                            }
                            send(v, gi)?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn vec_tensor<T: Real>(v: &[f64]) -> Tensor<T> {
    Tensor::from_vec_unchecked(
        Shape::new(1, v.len(), 1, 1),
        v.iter().map(|&x| T::from_f64(x)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut p = Param::new("p", Tensor::<f64>::vector(&[1.0, -2.0, 3.0]));
        let mut g = Graph::new();
        let v = g.param(&p);
        let loss = g.sum(v);
        g.backward(loss).unwrap();
        g.accumulate_into(&mut p).unwrap();
        assert_eq!(p.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
        // a second pass accumulates
        let mut g2 = Graph::new();
        let v = g2.param(&p);
        let loss = g2.sum(v);
        g2.backward(loss).unwrap();
        g2.accumulate_into(&mut p).unwrap();
        assert_eq!(p.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }

    #[test]
    fn bilinear_scale_gradient_is_spatial_sum() {
        // loss = sum(s * x) -> grad_s[c] = sum over batch and space of x[:, c]
        let x = Tensor::<f64>::from_fn(Shape::new(2, 2, 2, 2), |b, c, h, w| {
            (b + 2 * c) as f64 + 0.5 * h as f64 - 0.25 * w as f64
        });
        let s = Param::new("s", Tensor::vector(&[0.7, -1.3]));
        let b = Param::new("b", Tensor::vector(&[0.0, 0.0]));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (sv, bv) = (g.param(&s), g.param(&b));
        let y = g.channel_affine(xv, sv, bv).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        let gs = g.grad(sv).unwrap();
        for c in 0..2 {
            let want: f64 = (0..2).map(|n| x.plane(n, c).iter().sum::<f64>()).sum();
            assert!((gs.data()[c] - want).abs() < 1e-12);
        }
        assert_eq!(g.grad(bv).unwrap().data(), &[8.0, 8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let v = g.watch(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(g.backward(v).is_err());
    }

    #[test]
    fn shared_param_collects_both_uses() {
        let p = Param::new("p", Tensor::<f64>::vector(&[2.0]));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0]);
    }
}
