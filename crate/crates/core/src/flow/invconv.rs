//! Invertible 1x1 convolution with an LU-factored weight.
//!
//! `W = P L U` where `P` is a fixed permutation, `L` is unit lower
//! triangular (learned strictly-lower part), and `U` is the learned
//! strictly-upper part plus `diag(sign * exp(log_scale))` with a fixed sign.
//! Hence `log|det W| = sum(log_scale)`.

use nalgebra::DMatrix;
use rand::Rng;

use super::Invertible;
use crate::error::{shape_err, Error, Result};
use crate::numerics::linalg::{
    apply_row_map, gather_row_map, matrix_to_tensor, plu_decompose, random_orthogonal,
};
use crate::numerics::{Function, Graph, Param, Real, Shape, Tensor, Var};

/// Diagonal entries of `U` at or below this magnitude are singular.
pub const MIN_DIAG: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct InvConv1x1<T: Real = f32> {
    perm: Vec<usize>,
    sign: Vec<f64>,
    lower: Param<T>,
    upper: Param<T>,
    log_scale: Param<T>,
}

impl<T: Real> InvConv1x1<T> {
    pub fn identity(channels: usize) -> Self {
        Self::from_matrix(&DMatrix::identity(channels, channels)).expect("identity is invertible")
    }

    /// Factor of a Haar-random orthogonal matrix.
    pub fn random_orthogonal<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self::from_matrix(&random_orthogonal(channels, rng)).expect("orthogonal is invertible")
    }

    pub fn from_matrix(w: &DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if n == 0 || w.ncols() != n {
            return Err(shape_err!(
                "1x1 conv weight must be square, got {:?}",
                w.shape()
            ));
        }
        let f = plu_decompose(w);
        let mut sign = Vec::with_capacity(n);
        let mut log_scale = Vec::with_capacity(n);
        for i in 0..n {
            let d = f.upper[(i, i)];
            if !(d.abs() > MIN_DIAG) {
                return Err(Error::SingularLayer(format!(
                    "1x1 conv weight has U[{i},{i}] = {d}"
                )));
            }
            sign.push(d.signum());
            log_scale.push(T::from_f64(d.abs().ln()));
        }
        let lower = DMatrix::from_fn(n, n, |i, j| if i > j { f.lower[(i, j)] } else { 0.0 });
        let upper = DMatrix::from_fn(n, n, |i, j| if i < j { f.upper[(i, j)] } else { 0.0 });
        Self::from_parts(
            f.perm,
            sign,
            matrix_to_tensor(&lower),
            matrix_to_tensor(&upper),
            Tensor::vector(&log_scale),
        )
    }

    /// Assemble from stored factors (checkpoint loading).
    pub fn from_parts(
        perm: Vec<usize>,
        sign: Vec<f64>,
        lower: Tensor<T>,
        upper: Tensor<T>,
        log_scale: Tensor<T>,
    ) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Format(format!("invalid permutation {perm:?}")));
            }
        }
        if sign.len() != n || sign.iter().any(|s| s.abs() != 1.0) {
            return Err(Error::Format(format!("invalid sign vector {sign:?}")));
        }
        let mat = Shape::new(n, n, 1, 1);
        if lower.shape() != mat
            || upper.shape() != mat
            || log_scale.shape() != Shape::new(1, n, 1, 1)
        {
            return Err(shape_err!("1x1 conv factors do not match {n} channels"));
        }
        let layer = Self {
            perm,
            sign,
            lower: Param::new("invconv.lower", lower),
            upper: Param::new("invconv.upper", upper),
            log_scale: Param::new("invconv.log_scale", log_scale),
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        self.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn sign(&self) -> &[f64] {
        &self.sign
    }

    pub fn log_scale(&self) -> &Param<T> {
        &self.log_scale
    }

    pub fn check(&self) -> Result<()> {
        for (i, v) in self.log_scale.value().data().iter().enumerate() {
            let d = v.as_f64().exp();
            if !d.is_finite() || d <= MIN_DIAG {
                return Err(Error::SingularLayer(format!("1x1 conv |U[{i},{i}]| = {d}")));
            }
        }
        Ok(())
    }

    fn plu(&self) -> Plu {
        Plu {
            perm: self.perm.clone(),
            sign: self.sign.clone(),
        }
    }

    /// Reconstructed weight.
    pub fn weight(&self) -> DMatrix<f64> {
        self.plu()
            .factors(
                self.lower.value(),
                self.upper.value(),
                self.log_scale.value(),
            )
            .weight()
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_scale
            .value()
            .data()
            .iter()
            .map(|v| v.as_f64())
            .sum()
    }
}

/// Fixed part of the factorization.
#[derive(Clone)]
struct Plu {
    perm: Vec<usize>,
    sign: Vec<f64>,
}

struct Factors<'a> {
    plu: &'a Plu,
    l: DMatrix<f64>,
    u: DMatrix<f64>,
    diag: Vec<f64>,
}

impl Plu {
    fn factors<T: Real>(
        &self,
        lower: &Tensor<T>,
        upper: &Tensor<T>,
        log_s: &Tensor<T>,
    ) -> Factors<'_> {
        let n = self.perm.len();
        let (lo, up) = (lower.data(), upper.data());
        let diag: Vec<f64> = (0..n)
            .map(|i| self.sign[i] * log_s.data()[i].as_f64().exp())
            .collect();
        let l = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => lo[i * n + j].as_f64(),
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Less => 0.0,
        });
        let u = DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => up[i * n + j].as_f64(),
            std::cmp::Ordering::Equal => diag[i],
            std::cmp::Ordering::Greater => 0.0,
        });
        Factors {
            plu: self,
            l,
            u,
            diag,
        }
    }
}

impl Factors<'_> {
    fn weight(&self) -> DMatrix<f64> {
        apply_row_map(&self.plu.perm, &(&self.l * &self.u))
    }

    /// `W^-1 = U^-1 L^-1 P^T`, via triangular solves.
    fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        let eye = DMatrix::<f64>::identity(n, n);
        let l_inv = self
            .l
            .solve_lower_triangular(&eye)
            .expect("unit lower triangular");
        let u_inv = self
            .u
            .solve_upper_triangular(&eye)
            .expect("checked non-singular");
        let m_inv = u_inv * l_inv;
        // (M^-1 P^T)^T = P M^-T
        apply_row_map(&self.plu.perm, &m_inv.transpose()).transpose()
    }

    /// Pull a gradient on `W` back to (lower, upper, log_scale).
    fn backprop(&self, grad_w: &DMatrix<f64>) -> [DMatrix<f64>; 3] {
        let n = self.l.nrows();
        let grad_m = gather_row_map(&self.plu.perm, grad_w);
        let grad_l = &grad_m * self.u.transpose();
        let grad_u = self.l.transpose() * &grad_m;
        let dl = DMatrix::from_fn(n, n, |i, j| if i > j { grad_l[(i, j)] } else { 0.0 });
        let du = DMatrix::from_fn(n, n, |i, j| if i < j { grad_u[(i, j)] } else { 0.0 });
        let ds = DMatrix::from_fn(n, 1, |i, _| grad_u[(i, i)] * self.diag[i]);
        [dl, du, ds]
    }
}

struct PluWeightFn {
    plu: Plu,
    inverse: bool,
}

impl<T: Real> Function<T> for PluWeightFn {
    fn name(&self) -> &'static str {
        if self.inverse {
            "plu_weight_inverse"
        } else {
            "plu_weight"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let f = self.plu.factors(inputs[0], inputs[1], inputs[2]);
        let n = f.l.nrows();
        let g = DMatrix::from_row_iterator(n, n, grad.data().iter().map(|v| v.as_f64()));
        let grad_w = if self.inverse {
            // d(W^-1) = -W^-1 dW W^-1  =>  dW = -V^T G V^T with V = W^-1
            let v = DMatrix::from_row_iterator(n, n, output.data().iter().map(|x| x.as_f64()));
            -(v.transpose() * g * v.transpose())
        } else {
            g
        };
        let [dl, du, ds] = f.backprop(&grad_w);
        Ok(vec![
            Some(matrix_to_tensor(&dl)),
            Some(matrix_to_tensor(&du)),
            Some(matrix_to_tensor::<T>(&ds).reshape(Shape::new(1, n, 1, 1))?),
        ])
    }
}

impl<T: Real> InvConv1x1<T> {
    fn weight_var(&self, g: &mut Graph<T>, inverse: bool) -> Result<Var> {
        self.check()?;
        let f = self.plu();
        let factors = f.factors(
            self.lower.value(),
            self.upper.value(),
            self.log_scale.value(),
        );
        let m = if inverse {
            factors.inverse()
        } else {
            factors.weight()
        };
        let value = matrix_to_tensor(&m);
        let inputs = [
            g.param(&self.lower),
            g.param(&self.upper),
            g.param(&self.log_scale),
        ];
        Ok(g.apply(Box::new(PluWeightFn { plu: f, inverse }), &inputs, value))
    }
}

impl<T: Real> Invertible<T> for InvConv1x1<T> {
    fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.weight_var(g, false)?;
        g.conv2d(x, w, None)
    }

    fn inverse_graph(&self, g: &mut Graph<T>, y: Var) -> Result<Var> {
        let w = self.weight_var(g, true)?;
        g.conv2d(y, w, None)
    }

    fn logdet(&self, input: Shape) -> Result<f64> {
        self.check()?;
        if input.c != self.channels() {
            return Err(shape_err!(
                "1x1 conv over {} channels got {input}",
                self.channels()
            ));
        }
        Ok(input.spatial() as f64 * self.log_abs_det())
    }

    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.lower, &self.upper, &self.log_scale]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.lower, &mut self.upper, &mut self.log_scale]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dense_jacobian_logdet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_is_identity_map() {
        let layer = InvConv1x1::<f32>::identity(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(Shape::new(2, 3, 3, 2), -3.0, 3.0, &mut rng);
        assert_eq!(layer.forward(&x).unwrap(), x);
        assert_eq!(layer.logdet(x.shape()).unwrap(), 0.0);
    }

    #[test]
    fn diagonal_weight_logdet() {
        let w = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let layer = InvConv1x1::<f64>::from_matrix(&w).unwrap();
        let shape = Shape::new(1, 2, 2, 2);
        let ld = layer.logdet(shape).unwrap();
        assert!((ld - 4.0 * 6f64.ln()).abs() < 1e-12);
        assert!((ld - 7.1670).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(shape, -3.0, 3.0, &mut rng);
        let dense = dense_jacobian_logdet(|t| layer.forward(t), &x, 1e-3).unwrap();
        assert!((dense - ld).abs() < 1e-2);
    }

    #[test]
    fn factored_weight_reconstructs_input_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_orthogonal(5, &mut rng);
        let layer = InvConv1x1::<f64>::from_matrix(&q).unwrap();
        assert!((layer.weight() - &q).abs().max() < 1e-12);
        assert!(layer.log_abs_det().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = InvConv1x1::<f32>::random_orthogonal(12, &mut rng);
        let x = Tensor::uniform(Shape::new(2, 12, 4, 4), -3.0, 3.0, &mut rng);
        let y = layer.forward(&x).unwrap();
        assert!(y.max_abs_diff(&x) > 1e-2);
        assert!(layer.inverse(&y).unwrap().max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn singular_matrix_rejected() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            InvConv1x1::<f32>::from_matrix(&w),
            Err(Error::SingularLayer(_))
        ));
    }

    #[test]
    fn invalid_parts_rejected() {
        let n = 2;
        let z = || Tensor::<f32>::zeros(Shape::new(n, n, 1, 1));
        let ls = Tensor::<f32>::zeros(Shape::new(1, n, 1, 1));
        assert!(InvConv1x1::from_parts(vec![0, 0], vec![1.0, 1.0], z(), z(), ls.clone()).is_err());
        assert!(InvConv1x1::from_parts(vec![1, 0], vec![1.0, 0.5], z(), z(), ls.clone()).is_err());
        assert!(InvConv1x1::from_parts(vec![1, 0], vec![1.0, -1.0], z(), z(), ls).is_ok());
    }
}
