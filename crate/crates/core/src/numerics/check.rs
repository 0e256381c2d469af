//! Finite-difference and dense-Jacobian oracles.
//!
//! These never touch the tape: they only evaluate the function under test,
//! which keeps them independent of the gradients and log-determinants they
//! are used to certify.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Default step for both oracles.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Largest input (in elements) accepted by [`dense_jacobian_logdet`].
pub const MAX_JACOBIAN_DIM: usize = 64;

/// `|det| < 1e-30` counts as singular.
pub const SINGULAR_LOGDET: f64 = -69.07755278982137; // ln(1e-30)

/// Perturb element `i` by `+eps` and `-eps`, returning both tensors and the
/// actually realized step (which differs from `2 eps` after rounding to `T`).
fn perturbed<T: Real>(x: &Tensor<T>, i: usize, eps: f64) -> (Tensor<T>, Tensor<T>, f64) {
    let mut plus = x.clone();
    let mut minus = x.clone();
    let v = x.data()[i].as_f64();
    plus.data_mut()[i] = T::from_f64(v + eps);
    minus.data_mut()[i] = T::from_f64(v - eps);
    let step = plus.data()[i].as_f64() - minus.data()[i].as_f64();
    (plus, minus, step)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<f64>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let (plus, minus, step) = perturbed(x, i, eps);
        let (fp, fm) = (f(&plus)?, f(&minus)?);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numerical(format!(
                "function is not finite near element {i}: f(+)={fp}, f(-)={fm}"
            )));
        }
        if step == 0.0 {
            return Err(Error::Numerical(format!(
                "eps {eps} vanishes at element {i}"
            )));
        }
        grad.data_mut()[i] = T::from_f64((fp - fm) / step);
    }
    Ok(grad)
}

/// `log|det J|` of a same-size map, with `J` assembled column by column from
/// central differences. This is the ground truth for every layer log-det.
pub fn dense_jacobian_logdet<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    let n = x.numel();
    if x.shape().b != 1 {
        return Err(shape_err!(
            "dense Jacobian expects a single sample, got {}",
            x.shape()
        ));
    }
    if n > MAX_JACOBIAN_DIM {
        return Err(Error::Size(format!(
            "dense Jacobian limited to {MAX_JACOBIAN_DIM} elements, input {} has {n}",
            x.shape()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let (plus, minus, step) = perturbed(x, j, eps);
        let (yp, ym) = (f(&plus)?, f(&minus)?);
        if yp.numel() != n || ym.numel() != n {
            return Err(shape_err!(
                "map changes size: {} elements in, {} out",
                n,
                yp.numel()
            ));
        }
        for i in 0..n {
            let d = (yp.data()[i].as_f64() - ym.data()[i].as_f64()) / step;
            if !d.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite Jacobian entry ({i}, {j})"
                )));
            }
            jac[(i, j)] = d;
        }
    }
    let lu = jac.lu();
    let logdet: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
    if !(logdet > SINGULAR_LOGDET) {
        return Err(Error::SingularJacobian { logdet });
    }
    Ok(logdet)
}

/// Dense-oracle log-det next to a layer's own log-det.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct JacobianReport {
    pub dense_logdet: f64,
    pub layer_logdet: f64,
    pub abs_err: f64,
    pub input_shape: Shape,
}

impl JacobianReport {
    pub fn compare<T: Real>(
        f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
        x: &Tensor<T>,
        eps: f64,
        layer_logdet: f64,
    ) -> Result<Self> {
        let dense_logdet = dense_jacobian_logdet(f, x, eps)?;
        Ok(Self {
            dense_logdet,
            layer_logdet,
            abs_err: (dense_logdet - layer_logdet).abs(),
            input_shape: x.shape(),
        })
    }
}

/// Outcome of comparing a tape gradient against finite differences.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GradComparison {
    /// Worst `|a - n| / max(|a|, |n|)` over compared elements.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Elements with `|grad| > floor`.
    pub compared: usize,
}

impl GradComparison {
    pub fn merge(self, other: Self) -> Self {
        if other.max_rel_err > self.max_rel_err {
            Self {
                compared: self.compared + other.compared,
                ..other
            }
        } else {
            Self {
                compared: self.compared + other.compared,
                ..self
            }
        }
    }
}

pub fn compare_grads<T: Real>(
    analytic: &Tensor<T>,
    numeric: &Tensor<T>,
    floor: f64,
) -> Result<GradComparison> {
    if analytic.shape() != numeric.shape() {
        return Err(shape_err!(
            "gradient shapes differ: {} vs {}",
            analytic.shape(),
            numeric.shape()
        ));
    }
    let mut out = GradComparison::default();
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        if a.abs() <= floor {
            continue;
        }
        out.compared += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs());
        if rel > out.max_rel_err || out.worst_index.is_none() {
            out.max_rel_err = out.max_rel_err.max(rel);
            out.worst_index = Some(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fd_of_sum_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(Shape::new(1, 2, 3, 2), -3.0, 3.0, &mut rng);
        let g = finite_diff_grad(|t| Ok(t.sum_f64()), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn fd_of_half_square_norm_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::uniform(Shape::new(2, 2, 2, 2), -10.0, 10.0, &mut rng);
        let g = finite_diff_grad(|t| Ok(0.5 * t.dot_f64(t)), &x, 1e-3).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-4);
    }

    #[test]
    fn fd_flags_non_finite_output() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        let r = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-3);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert!(finite_diff_grad(|t| Ok(t.sum_f64()), &x, 0.0).is_err());
    }

    #[test]
    fn jacobian_of_identity_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(Shape::new(1, 2, 2, 2), -1.0, 1.0, &mut rng);
        let ld = dense_jacobian_logdet(|t| Ok(t.clone()), &x, 1e-3).unwrap();
        assert!(ld.abs() < 1e-9);
        let x = Tensor::<f64>::uniform(Shape::new(1, 1, 2, 1), -1.0, 1.0, &mut rng);
        let ld = dense_jacobian_logdet(|t| Ok(t.scale(3.0)), &x, 1e-3).unwrap();
        assert!((ld - 2.0 * 3f64.ln()).abs() < 1e-9);
        assert!((ld - 2.1972).abs() < 1e-4);
    }

    #[test]
    fn jacobian_errors() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 9, 9));
        assert!(matches!(
            dense_jacobian_logdet(|t| Ok(t.clone()), &x, 1e-3),
            Err(Error::Size(_))
        ));
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(
            dense_jacobian_logdet(|t| Ok(t.scale(0.0)), &x, 1e-3),
            Err(Error::SingularJacobian { .. })
        ));
        assert!(matches!(
            dense_jacobian_logdet(
                |t| t.narrow_channels(0, 1),
                &Tensor::<f64>::zeros(Shape::new(1, 2, 1, 2)),
                1e-3
            ),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn rel_err_skips_small_entries() {
        let a = Tensor::<f64>::vector(&[1.0, 1e-5, -2.0]);
        let n = Tensor::<f64>::vector(&[1.0005, 1.0, -2.0]);
        let c = compare_grads(&a, &n, 1e-4).unwrap();
        assert_eq!(c.compared, 2);
        assert!((c.max_rel_err - 0.0005 / 1.0005).abs() < 1e-12);
        assert_eq!(c.worst_index, Some(0));
    }
}
