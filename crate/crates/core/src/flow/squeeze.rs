//! Padded checkerboard squeeze.
//!
//! Odd extents are padded with one zero row at the bottom and/or one zero
//! column at the right. Each 2x2 cell then becomes four channels in the
//! order (even row, even col), (even row, odd col), (odd row, even col),
//! (odd row, odd col), grouped per source channel: output channel
//! `4 * c + 2 * row_parity + col_parity`.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Function, Graph, Real, Shape, Tensor, Var};

/// What [`squeeze_inverse`] needs to undo one squeeze.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SqueezeRecord {
    pub orig_h: usize,
    pub orig_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl SqueezeRecord {
    pub fn for_extent(orig_h: usize, orig_w: usize) -> Self {
        Self {
            orig_h,
            orig_w,
            pad_h: orig_h % 2,
            pad_w: orig_w % 2,
        }
    }

    /// Spatial extent after squeezing.
    pub fn squeezed_hw(&self) -> (usize, usize) {
        (
            (self.orig_h + self.pad_h) / 2,
            (self.orig_w + self.pad_w) / 2,
        )
    }

    fn validate(&self, y: Shape) -> Result<()> {
        if self.pad_h != self.orig_h % 2 || self.pad_w != self.orig_w % 2 {
            return Err(shape_err!("inconsistent squeeze record {self:?}"));
        }
        if !y.c.is_multiple_of(4) {
            return Err(shape_err!(
                "squeezed tensor {y} has channels not divisible by 4"
            ));
        }
        if (y.h, y.w) != self.squeezed_hw() {
            return Err(shape_err!(
                "squeezed tensor {y} does not match record for {}x{}",
                self.orig_h,
                self.orig_w
            ));
        }
        Ok(())
    }
}

pub fn squeeze_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, SqueezeRecord) {
    let s = x.shape();
    let rec = SqueezeRecord::for_extent(s.h, s.w);
    let (oh, ow) = rec.squeezed_hw();
    let mut y = Tensor::zeros(Shape::new(s.b, 4 * s.c, oh, ow));
    for b in 0..s.b {
        for c in 0..s.c {
            let src = x.plane(b, c);
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let dst = y.plane_mut(b, 4 * c + k);
                for i in 0..oh {
                    let row = 2 * i + dy;
                    if row >= s.h {
                        continue;
                    }
                    for j in 0..ow {
                        let col = 2 * j + dx;
                        if col < s.w {
                            dst[i * ow + j] = src[row * s.w + col];
                        }
                    }
                }
            }
        }
    }
    (y, rec)
}

pub fn squeeze_inverse<T: Real>(y: &Tensor<T>, rec: &SqueezeRecord) -> Result<Tensor<T>> {
    let ys = y.shape();
    rec.validate(ys)?;
    let (h, w) = (rec.orig_h, rec.orig_w);
    let mut x = Tensor::zeros(Shape::new(ys.b, ys.c / 4, h, w));
    for b in 0..ys.b {
        for c in 0..ys.c / 4 {
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let src = y.plane(b, 4 * c + k);
                let dst = x.plane_mut(b, c);
                for i in 0..ys.h {
                    let row = 2 * i + dy;
                    if row >= h {
                        continue;
                    }
                    for j in 0..ys.w {
                        let col = 2 * j + dx;
                        if col < w {
                            dst[row * w + col] = src[i * ys.w + j];
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

struct SqueezeFn(SqueezeRecord);

impl<T: Real> Function<T> for SqueezeFn {
    fn name(&self) -> &'static str {
        "squeeze"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(squeeze_inverse(grad, &self.0)?)])
    }
}

struct UnsqueezeFn;

impl<T: Real> Function<T> for UnsqueezeFn {
    fn name(&self) -> &'static str {
        "unsqueeze"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(squeeze_forward(grad).0)])
    }
}

pub fn squeeze_graph<T: Real>(g: &mut Graph<T>, x: Var) -> (Var, SqueezeRecord) {
    let (y, rec) = squeeze_forward(g.value(x));
    (g.apply(Box::new(SqueezeFn(rec)), &[x], y), rec)
}

pub fn unsqueeze_graph<T: Real>(g: &mut Graph<T>, y: Var, rec: &SqueezeRecord) -> Result<Var> {
    let x = squeeze_inverse(g.value(y), rec)?;
    Ok(g.apply(Box::new(UnsqueezeFn), &[y], x))
}

/// Squeeze records of one encode pass, consumed last-in first-out by the
/// matching decode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SqueezeStack {
    records: Vec<SqueezeRecord>,
}

impl SqueezeStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: SqueezeRecord) {
        self.records.push(rec);
    }

    pub fn pop(&mut self) -> Result<SqueezeRecord> {
        self.records
            .pop()
            .ok_or_else(|| Error::State("no squeeze record left to undo".into()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SqueezeRecord] {
        &self.records
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn even_shape_halves_space() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 3, 256, 256));
        let (y, rec) = squeeze_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 12, 128, 128));
        assert_eq!((rec.pad_h, rec.pad_w), (0, 0));
    }

    #[test]
    fn two_by_two_enumeration() {
        let (a, b, c, d) = (1.0f32, 2.0, 3.0, 4.0);
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![a, b, c, d]).unwrap();
        let (y, rec) = squeeze_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(y.data(), &[a, b, c, d]);
        assert_eq!(
            rec,
            SqueezeRecord {
                orig_h: 2,
                orig_w: 2,
                pad_h: 0,
                pad_w: 0
            }
        );
        let back = squeeze_inverse(&y, &rec).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn grouping_is_per_source_channel() {
        // channel c of the input lands in outputs 4c..4c+4
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 2, 2), |_, c, h, w| {
            (10 * c + 2 * h + w) as f32
        });
        let (y, _) = squeeze_forward(&x);
        assert_eq!(y.data(), &[0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn odd_shape_pads_with_zeros() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 7.0);
        let (y, rec) = squeeze_forward(&x);
        assert_eq!(y.shape(), Shape::new(1, 4, 2, 2));
        assert_eq!((rec.pad_h, rec.pad_w), (1, 1));
        // the padded row/col sit at the bottom/right
        assert_eq!(y.data().iter().filter(|&&v| v == 0.0).count(), 16 - 9);
        assert_eq!(y.get(0, 3, 1, 1), 0.0);
        assert_eq!(y.get(0, 0, 1, 1), 7.0);
        let back = squeeze_inverse(&y, &rec).unwrap();
        assert_eq!(back.shape(), Shape::new(1, 1, 3, 3));
    }

    #[test]
    fn inverse_removes_padding() {
        let y = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        let x = squeeze_inverse(&y, &SqueezeRecord::for_extent(3, 3)).unwrap();
        assert_eq!(x.shape(), Shape::new(1, 1, 3, 3));
    }

    #[test]
    fn inconsistent_record_is_rejected() {
        let y = Tensor::<f32>::zeros(Shape::new(1, 4, 2, 2));
        assert!(squeeze_inverse(&y, &SqueezeRecord::for_extent(5, 4)).is_err());
        let bad = SqueezeRecord {
            orig_h: 4,
            orig_w: 4,
            pad_h: 1,
            pad_w: 0,
        };
        assert!(squeeze_inverse(&y, &bad).is_err());
        let y = Tensor::<f32>::zeros(Shape::new(1, 6, 2, 2));
        assert!(squeeze_inverse(&y, &SqueezeRecord::for_extent(4, 4)).is_err());
    }

    #[test]
    fn random_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f32>::uniform(Shape::new(2, 3, 5, 7), -3.0, 3.0, &mut rng);
        let (y, rec) = squeeze_forward(&x);
        assert_eq!(squeeze_inverse(&y, &rec).unwrap(), x);
    }

    #[test]
    fn stack_is_lifo() {
        let mut s = SqueezeStack::new();
        s.push(SqueezeRecord::for_extent(5, 5));
        s.push(SqueezeRecord::for_extent(3, 3));
        assert_eq!(s.pop().unwrap().orig_h, 3);
        assert_eq!(s.pop().unwrap().orig_h, 5);
        assert!(matches!(s.pop(), Err(Error::State(_))));
    }

    proptest! {
        #[test]
        fn squeeze_is_a_zero_padded_permutation(
            b in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::uniform(Shape::new(b, c, h, w), -3.0, 3.0, &mut rng);
            let (y, rec) = squeeze_forward(&x);
            prop_assert_eq!(y.shape(), Shape::new(b, 4 * c, h.div_ceil(2), w.div_ceil(2)));
            let mut xs: Vec<f32> = x.data().to_vec();
            let mut ys: Vec<f32> = y.data().to_vec();
            xs.extend(std::iter::repeat_n(0.0, ys.len() - xs.len()));
            xs.sort_by(f32::total_cmp);
            ys.sort_by(f32::total_cmp);
            prop_assert_eq!(xs, ys);
            prop_assert_eq!(squeeze_inverse(&y, &rec).unwrap(), x);
        }
    }
}
