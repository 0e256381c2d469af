//! Instance normalization over spatial positions, per sample and channel:
//! `gamma * (z - mu) / max(sigma, eps) + beta`.

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Function, Graph, Param, Real, Shape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-sample, per-channel spatial statistics. `sigma` is already floored
/// at the layer's `eps`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StyleStats {
    pub batch: usize,
    pub channels: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StyleStats {
    pub fn mean(&self, b: usize, c: usize) -> f64 {
        self.mu[b * self.channels + c]
    }

    pub fn std(&self, b: usize, c: usize) -> f64 {
        self.sigma[b * self.channels + c]
    }
}

/// Population mean and (unfloored) std of each plane, in `f64`.
pub fn plane_stats<T: Real>(z: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let s = z.shape();
    let n = s.spatial() as f64;
    let mut mu = Vec::with_capacity(s.b * s.c);
    let mut sd = Vec::with_capacity(s.b * s.c);
    for b in 0..s.b {
        for c in 0..s.c {
            let p = z.plane(b, c);
            let m = p.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = p.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / n;
            mu.push(m);
            sd.push(var.sqrt());
        }
    }
    (mu, sd)
}

#[derive(Debug, Clone)]
pub struct InstanceNormLayer<T: Real = f32> {
    gamma: Param<T>,
    beta: Param<T>,
    eps: f64,
}

impl<T: Real> InstanceNormLayer<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize, eps: f64) -> Result<Self> {
        let shape = Shape::new(1, channels, 1, 1);
        Self::from_parts(Tensor::full(shape, T::one()), Tensor::zeros(shape), eps)
    }

    pub fn from_parts(gamma: Tensor<T>, beta: Tensor<T>, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!(
                "instance norm eps must be positive, got {eps}"
            )));
        }
        let c = gamma.numel();
        if c == 0 || gamma.shape() != Shape::new(1, c, 1, 1) || beta.shape() != gamma.shape() {
            return Err(shape_err!(
                "instance norm gamma/beta must be (1, C, 1, 1), got {} and {}",
                gamma.shape(),
                beta.shape()
            ));
        }
        if !gamma.all_finite() || !beta.all_finite() {
            return Err(Error::Numerical(
                "instance norm parameters must be finite".into(),
            ));
        }
        Ok(Self {
            gamma: Param::new("in.gamma", gamma),
            beta: Param::new("in.beta", beta),
            eps,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value().numel()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn gamma(&self) -> &Param<T> {
        &self.gamma
    }

    pub fn beta(&self) -> &Param<T> {
        &self.beta
    }

    pub fn gamma_mut(&mut self) -> &mut Param<T> {
        &mut self.gamma
    }

    pub fn beta_mut(&mut self) -> &mut Param<T> {
        &mut self.beta
    }

    fn compute(&self, z: &Tensor<T>) -> Result<(Tensor<T>, StyleStats)> {
        let s = z.shape();
        if s.c != self.channels() {
            return Err(shape_err!(
                "instance norm over {} channels got {s}",
                self.channels()
            ));
        }
        let (mu, sd) = plane_stats(z);
        let sigma: Vec<f64> = sd.iter().map(|&v| v.max(self.eps)).collect();
        let (gamma, beta) = (self.gamma.value().data(), self.beta.value().data());
        let mut out = Tensor::zeros(s);
        for b in 0..s.b {
            for c in 0..s.c {
                let i = b * s.c + c;
                let k = gamma[c].as_f64() / sigma[i];
                let (m, bc) = (mu[i], beta[c].as_f64());
                for (o, v) in out.plane_mut(b, c).iter_mut().zip(z.plane(b, c)) {
                    *o = T::from_f64(k * (v.as_f64() - m) + bc);
                }
            }
        }
        Ok((
            out,
            StyleStats {
                batch: s.b,
                channels: s.c,
                mu,
                sigma,
            },
        ))
    }

    pub fn normalize(&self, z: &Tensor<T>) -> Result<(Tensor<T>, StyleStats)> {
        self.compute(z)
    }

    pub fn normalize_graph(&self, g: &mut Graph<T>, z: Var) -> Result<(Var, StyleStats)> {
        let (out, stats) = self.compute(g.value(z))?;
        let inputs = [z, g.param(&self.gamma), g.param(&self.beta)];
        let f = InstanceNormFn { eps: self.eps };
        Ok((g.apply(Box::new(f), &inputs, out), stats))
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Real>(&self) -> InstanceNormLayer<U> {
        InstanceNormLayer {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

struct InstanceNormFn {
    eps: f64,
}

impl<T: Real> Function<T> for InstanceNormFn {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (z, gamma) = (inputs[0], inputs[1].data());
        let s = z.shape();
        let n = s.spatial() as f64;
        let (mu, sd) = plane_stats(z);
        let mut dz = Tensor::zeros(s);
        let mut dgamma = vec![0.0f64; s.c];
        let mut dbeta = vec![0.0f64; s.c];
        let mut xhat = vec![0.0f64; s.spatial()];
        for b in 0..s.b {
            for c in 0..s.c {
                let i = b * s.c + c;
                let floored = sd[i] <= self.eps;
                let sigma = sd[i].max(self.eps);
                for (x, v) in xhat.iter_mut().zip(z.plane(b, c)) {
                    *x = (v.as_f64() - mu[i]) / sigma;
                }
                let gp = grad.plane(b, c);
                let mut g_mean = 0.0;
                let mut gx_mean = 0.0;
                for (gv, x) in gp.iter().zip(&xhat) {
                    let gv = gv.as_f64();
                    g_mean += gv;
                    gx_mean += gv * x;
                }
                dgamma[c] += gx_mean;
                dbeta[c] += g_mean;
                g_mean /= n;
                gx_mean /= n;
                // with a floored sigma the scale is a constant
                if floored {
                    gx_mean = 0.0;
                }
                let k = gamma[c].as_f64() / sigma;
                for ((d, gv), x) in dz.plane_mut(b, c).iter_mut().zip(gp).zip(&xhat) {
                    *d = T::from_f64(k * (gv.as_f64() - g_mean - x * gx_mean));
                }
            }
        }
        let vec = |v: Vec<f64>| {
            Tensor::from_vec_unchecked(
                Shape::new(1, v.len(), 1, 1),
                v.into_iter().map(T::from_f64).collect(),
            )
        };
        Ok(vec![Some(dz), Some(vec(dgamma)), Some(vec(dbeta))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardizes_known_mean_and_std() {
        // plane values 5 +- 2 -> mean 5, population std 2
        let z = Tensor::<f32>::from_fn(Shape::new(1, 2, 2, 2), |_, _, h, w| {
            if (h + w) % 2 == 0 {
                3.0
            } else {
                7.0
            }
        });
        let layer = InstanceNormLayer::new(2, DEFAULT_EPS).unwrap();
        let (out, stats) = layer.normalize(&z).unwrap();
        assert_eq!(stats.mean(0, 1), 5.0);
        assert_eq!(stats.std(0, 1), 2.0);
        let (mu, sd) = plane_stats(&out);
        assert!(mu.iter().all(|m| m.abs() < 1e-6));
        assert!(sd.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let z = Tensor::<f32>::full(Shape::new(2, 3, 4, 4), 2.5);
        let mut layer = InstanceNormLayer::new(3, DEFAULT_EPS).unwrap();
        layer
            .beta_mut()
            .set_value(Tensor::vector(&[0.5, -1.0, 2.0]))
            .unwrap();
        let (out, stats) = layer.normalize(&z).unwrap();
        assert!(out.all_finite());
        for b in 0..2 {
            for (c, want) in [0.5, -1.0, 2.0].into_iter().enumerate() {
                assert!(out.plane(b, c).iter().all(|&v| v == want));
                assert_eq!(stats.std(b, c), DEFAULT_EPS);
            }
        }
    }

    #[test]
    fn per_channel_affine_style_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z1 = Tensor::<f32>::uniform(Shape::new(1, 3, 5, 5), -2.0, 2.0, &mut rng);
        let (a, c) = ([0.5f32, 2.0, 3.5], [1.0f32, -4.0, 0.25]);
        let mut z2 = z1.clone();
        for ch in 0..3 {
            z2.plane_mut(0, ch)
                .iter_mut()
                .for_each(|v| *v = a[ch] * *v + c[ch]);
        }
        let layer = InstanceNormLayer::new(3, DEFAULT_EPS).unwrap();
        let o1 = layer.normalize(&z1).unwrap().0;
        let o2 = layer.normalize(&z2).unwrap().0;
        assert!(o1.max_abs_diff(&o2) < 1e-4);
    }

    #[test]
    fn idempotent_with_unit_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::<f32>::uniform(Shape::new(2, 4, 6, 6), -3.0, 3.0, &mut rng);
        let layer = InstanceNormLayer::new(4, DEFAULT_EPS).unwrap();
        let once = layer.normalize(&z).unwrap().0;
        let twice = layer.normalize(&once).unwrap().0;
        assert!(once.max_abs_diff(&twice) < 1e-4);
    }

    #[test]
    fn invalid_construction() {
        assert!(InstanceNormLayer::<f32>::new(3, 0.0).is_err());
        assert!(InstanceNormLayer::<f32>::from_parts(
            Tensor::vector(&[1.0, f32::NAN]),
            Tensor::vector(&[0.0, 0.0]),
            1e-5
        )
        .is_err());
        let layer = InstanceNormLayer::<f32>::new(3, 1e-5).unwrap();
        assert!(layer
            .normalize(&Tensor::zeros(Shape::new(1, 2, 2, 2)))
            .is_err());
    }
}
