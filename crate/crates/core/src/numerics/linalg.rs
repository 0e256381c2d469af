//! Small dense matrix helpers (channel-mixing weights, at most a few dozen
//! rows), computed in `f64`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Square matrix stored as a `(n, n, 1, 1)` tensor.
pub fn matrix_from_tensor<T: Real>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    let s = t.shape();
    if s.h != 1 || s.w != 1 {
        return Err(shape_err!("expected a (rows, cols, 1, 1) matrix, got {s}"));
    }
    Ok(DMatrix::from_row_iterator(
        s.b,
        s.c,
        t.data().iter().map(|v| v.as_f64()),
    ))
}

pub fn matrix_to_tensor<T: Real>(m: &DMatrix<f64>) -> Tensor<T> {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(T::from_f64(m[(i, j)]));
        }
    }
    Tensor::from_vec_unchecked(Shape::new(r, c, 1, 1), data)
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the
/// sign of R's diagonal folded into Q).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `W = P L U` with `P` given as a row map: row `perm[i]` of `W` equals row
/// `i` of `L U`. `L` is unit lower triangular, `U` upper triangular.
pub struct PluFactors {
    pub perm: Vec<usize>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

pub fn plu_decompose(w: &DMatrix<f64>) -> PluFactors {
    let n = w.nrows();
    let lu = w.clone().lu();
    let mut idx = DVector::from_iterator(n, (0..n).map(|i| i as f64));
    lu.p().permute_rows(&mut idx);
    PluFactors {
        perm: idx.iter().map(|&v| v as usize).collect(),
        lower: lu.l(),
        upper: lu.u(),
    }
}

/// Scatter rows of `m` by the row map: `out[perm[i]] = m[i]`.
pub fn apply_row_map(perm: &[usize], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from(&m.row(i));
    }
    out
}

/// Gather rows: `out[i] = m[perm[i]]`, the transpose of [`apply_row_map`].
pub fn gather_row_map(perm: &[usize], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(i).copy_from(&m.row(p));
    }
    out
}
