use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;
use crate::error::{shape_err, Error, Result};

/// Extent of a rank-4 tensor in batch x channel x height x width order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Self { b, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Elements in one sample.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    pub fn with_batch(self, b: usize) -> Self {
        Self { b, ..self }
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn is_valid(&self) -> bool {
        self.b >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.b, self.c, self.h, self.w)
    }
}

impl FromStr for Shape {
    type Err = Error;

    /// Parses `BxCxHxW`, e.g. `1x3x63x65`.
    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .trim()
            .split(['x', 'X', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad shape {s:?}: {e}")))?;
        match dims[..] {
            [b, c, h, w] if b > 0 && c > 0 && h > 0 && w > 0 => Ok(Shape::new(b, c, h, w)),
            _ => Err(Error::Config(format!(
                "bad shape {s:?}: expected four positive extents BxCxHxW"
            ))),
        }
    }
}

/// Dense rank-4 array, row-major in NCHW order.
///
/// Vectors are stored as `(1, n, 1, 1)` and matrices as `(rows, cols, 1, 1)`,
/// the layout of a 1x1 convolution weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    /// Checked constructor: rejects empty extents, length mismatch and
    /// non-finite values.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if !shape.is_valid() {
            return Err(shape_err!("all extents must be >= 1, got {shape}"));
        }
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Skips the finiteness scan. Length must still match.
    pub fn from_vec_unchecked(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(data.len(), shape.numel(), "length mismatch for {shape}");
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::new(1, 1, 1, 1), value)
    }

    /// Vector of length n stored as `(1, n, 1, 1)`.
    pub fn vector(values: &[T]) -> Self {
        Self::from_vec_unchecked(Shape::new(1, values.len(), 1, 1), values.to_vec())
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.b {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(b, c, h, w));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((b * s.c + c) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(b, c, h, w);
        self.data[i] = v;
    }

    /// Contiguous `h*w` plane for sample `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let n = self.shape.spatial();
        let start = (b * self.shape.c + c) * n;
        &self.data[start..start + n]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let n = self.shape.spatial();
        let start = (b * self.shape.c + c) * n;
        &mut self.data[start..start + n]
    }

    /// Contiguous slice for one sample.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.shape.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err!("cannot reshape {} into {shape}", self.shape));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch {} vs {}",
                self.shape,
                other.shape
            ));
        }
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "shape mismatch {} vs {}",
                self.shape,
                other.shape
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn dot_f64(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot_f64(self).sqrt()
    }

    /// Max absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Channels `start..start+len` of every sample.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Self> {
        let s = self.shape;
        if len == 0 || start + len > s.c {
            return Err(shape_err!(
                "channel range {start}..{} out of {}",
                start + len,
                s.c
            ));
        }
        let hw = s.spatial();
        let mut data = Vec::with_capacity(s.b * len * hw);
        for b in 0..s.b {
            let base = (b * s.c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self {
            shape: s.with_channels(len),
            data,
        })
    }

    /// Concatenate along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.b != sb.b || sa.h != sb.h || sa.w != sb.w {
            return Err(shape_err!("cannot concat {sa} and {sb} along channels"));
        }
        let hw = sa.spatial();
        let mut data = Vec::with_capacity(sa.numel() + sb.numel());
        for n in 0..sa.b {
            data.extend_from_slice(&a.data[n * sa.c * hw..(n + 1) * sa.c * hw]);
            data.extend_from_slice(&b.data[n * sb.c * hw..(n + 1) * sb.c * hw]);
        }
        Ok(Self {
            shape: Shape::new(sa.b, sa.c + sb.c, sa.h, sa.w),
            data,
        })
    }

    /// Gather samples by index into a new batch.
    pub fn select_samples(&self, idx: &[usize]) -> Result<Self> {
        let n = self.shape.sample_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= self.shape.b {
                return Err(shape_err!("sample {i} out of batch {}", self.shape.b));
            }
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        if idx.is_empty() {
            return Err(shape_err!("empty sample selection"));
        }
        Ok(Self {
            shape: self.shape.with_batch(idx.len()),
            data,
        })
    }

    /// Stack single-sample tensors of equal shape into one batch.
    pub fn stack(samples: &[Self]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| shape_err!("nothing to stack"))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * samples.len());
        for t in samples {
            if t.shape != s {
                return Err(shape_err!("cannot stack {} with {s}", t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: Shape::new(s.b * samples.len(), s.c, s.h, s.w),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_constructor_rejects_bad_input() {
        let s = Shape::new(1, 1, 1, 2);
        assert!(Tensor::<f32>::new(s, vec![1.0]).is_err());
        assert!(matches!(
            Tensor::<f32>::new(s, vec![1.0, f32::NAN]),
            Err(Error::Numerical(_))
        ));
        assert!(Tensor::<f32>::new(s, vec![1.0, f32::INFINITY]).is_err());
        assert!(Tensor::<f32>::new(Shape::new(0, 1, 1, 1), vec![]).is_err());
        assert!(Tensor::<f32>::new(s, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(
            "1x3x63x65".parse::<Shape>().unwrap(),
            Shape::new(1, 3, 63, 65)
        );
        assert!("1x3x63".parse::<Shape>().is_err());
        assert!("1x0x3x3".parse::<Shape>().is_err());
        assert_eq!(Shape::new(2, 3, 4, 5).to_string(), "2x3x4x5");
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let t = Tensor::<f32>::from_fn(Shape::new(2, 5, 2, 3), |b, c, h, w| {
            (b * 1000 + c * 100 + h * 10 + w) as f32
        });
        let a = t.narrow_channels(0, 2).unwrap();
        let b = t.narrow_channels(2, 3).unwrap();
        assert_eq!(a.get(1, 1, 1, 2), 1112.0);
        assert_eq!(b.get(1, 0, 0, 0), 1200.0);
        assert_eq!(Tensor::concat_channels(&a, &b).unwrap(), t);
    }
}
