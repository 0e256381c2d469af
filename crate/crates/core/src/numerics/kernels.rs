//! Convolution and pooling kernels shared by the tape and the plain layers.

use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Unfold one sample `(cin, h, w)` into rows of a column matrix with zero
/// padding `k/2`. Row `(c*k + ky)*k + kx` of the unfolded sample starts at
/// `cols[row * stride]` and holds `h*w` entries.
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    cols: &mut [T],
    stride: usize,
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * stride..row * stride + hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // valid output columns: 0 <= ox + dx < w
                let lo = ((-dx).max(0) as usize).min(w);
                let hi = ((w as isize - dx).clamp(0, w as isize) as usize).max(lo);
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let drow = &mut dst[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        for v in drow.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for v in &mut drow[..lo] {
                        *v = T::zero();
                    }
                    let s0 = (lo as isize + dx) as usize;
                    drow[lo..hi].copy_from_slice(&srow[s0..s0 + (hi - lo)]);
                    for v in &mut drow[hi..] {
                        *v = T::zero();
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a sample gradient.
fn col2im_add<T: Real>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    dx: &mut [T],
    stride: usize,
) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * stride..row * stride + hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let lo = (-dxo).max(0) as usize;
                    let hi = (w as isize - dxo).clamp(0, w as isize) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let s0 = (lo as isize + dxo) as usize;
                    let drow = &mut plane[iy as usize * w + s0..iy as usize * w + s0 + (hi - lo)];
                    let srow = &src[oy * w + lo..oy * w + hi];
                    for (d, &s) in drow.iter_mut().zip(srow) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_conv(x: Shape, weight: Shape) -> Result<usize> {
    let k = weight.h;
    if weight.w != k || k.is_multiple_of(2) {
        return Err(shape_err!(
            "conv weight {weight} must have an odd square kernel"
        ));
    }
    if weight.c != x.c {
        return Err(shape_err!(
            "conv weight {weight} expects {} input channels, got {x}",
            weight.c
        ));
    }
    Ok(k)
}

/// Column-matrix budget (elements) per GEMM; batches are split into runs of
/// samples so the unfolded input stays cache resident.
const CHUNK_ELEMS: usize = 1 << 16;

fn sample_chunks(batch: usize, rows: usize, hw: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (CHUNK_ELEMS / (rows * hw).max(1)).clamp(1, batch.max(1));
    (0..batch)
        .step_by(per)
        .map(move |s| (s, (s + per).min(batch)))
}

/// Size a reused buffer whose contents the caller overwrites in full.
fn scratch<T: Real>(v: &mut Vec<T>, len: usize) {
    if v.len() < len {
        v.resize(len, T::zero());
    } else {
        v.truncate(len);
    }
}

/// Unfold samples `lo..hi` into a `(cin*k*k, (hi-lo)*h*w)` matrix.
fn unfold<T: Real>(x: &Tensor<T>, k: usize, lo: usize, hi: usize, cols: &mut Vec<T>) {
    let s = x.shape();
    let hw = s.spatial();
    let n = (hi - lo) * hw;
    scratch(cols, s.c * k * k * n);
    for b in lo..hi {
        if k == 1 {
            for c in 0..s.c {
                cols[c * n + (b - lo) * hw..c * n + (b - lo + 1) * hw]
                    .copy_from_slice(x.plane(b, c));
            }
        } else {
            im2col(x.sample(b), s.c, s.h, s.w, k, &mut cols[(b - lo) * hw..], n);
        }
    }
}

/// `(cout*k*k, cin)` matrix with rows `(co, ky, kx)` holding the spatially
/// flipped kernel `w[co, :, k-1-ky, k-1-kx]`.
fn flip_weight<T: Real>(w: &Tensor<T>) -> Vec<T> {
    let s = w.shape();
    let (k, cin) = (s.h, s.c);
    let mut out = vec![T::zero(); s.b * k * k * cin];
    for co in 0..s.b {
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    out[((co * k + k - 1 - ky) * k + k - 1 - kx) * cin + ci] =
                        w.get(co, ci, ky, kx);
                }
            }
        }
    }
    out
}

fn unflip_weight<T: Real>(m: &[T], shape: Shape) -> Tensor<T> {
    let (k, cin) = (shape.h, shape.c);
    Tensor::from_fn(shape, |co, ci, ky, kx| {
        m[((co * k + k - 1 - ky) * k + k - 1 - kx) * cin + ci]
    })
}

/// Narrow outputs are cheaper through the transposed formulation: multiply
/// the flipped kernel with the raw input and fold the `cout*k*k` rows back,
/// instead of unfolding `cin*k*k` rows.
fn output_side(cin: usize, cout: usize, k: usize) -> bool {
    k > 1 && cout < cin
}

/// Stride-1 "same" convolution with an odd square kernel.
/// `weight` is `(cout, cin, k, k)`, `bias` is `(1, cout, 1, 1)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = check_conv(xs, ws)?;
    let (cout, cin, hw) = (ws.b, xs.c, xs.spatial());
    let ck = cin * k * k;
    let mut out = Tensor::zeros(Shape::new(xs.b, cout, xs.h, xs.w));
    if let Some(bias) = bias {
        for b in 0..xs.b {
            for (co, &v) in bias.data().iter().enumerate() {
                out.plane_mut(b, co).fill(v);
            }
        }
    }
    let (mut cols, mut m) = (Vec::new(), Vec::new());
    if output_side(cin, cout, k) {
        let wf = flip_weight(weight);
        let rows = cout * k * k;
        for (lo, hi) in sample_chunks(xs.b, cin + rows, hw) {
            let n = (hi - lo) * hw;
            unfold(x, 1, lo, hi, &mut cols);
            scratch(&mut m, rows * n);
            T::gemm(
                rows,
                cin,
                n,
                T::one(),
                (&wf, cin as isize, 1),
                (&cols, n as isize, 1),
                T::zero(),
                (&mut m, n as isize, 1),
            );
            for b in lo..hi {
                let dst = &mut out.data_mut()[b * cout * hw..(b + 1) * cout * hw];
                col2im_add(&m[(b - lo) * hw..], cout, xs.h, xs.w, k, dst, n);
            }
        }
        return Ok(out);
    }
    for (lo, hi) in sample_chunks(xs.b, ck, hw) {
        let n = (hi - lo) * hw;
        unfold(x, k, lo, hi, &mut cols);
        scratch(&mut m, cout * n);
        T::gemm(
            cout,
            ck,
            n,
            T::one(),
            (weight.data(), ck as isize, 1),
            (&cols, n as isize, 1),
            T::zero(),
            (&mut m, n as isize, 1),
        );
        for b in lo..hi {
            for co in 0..cout {
                let src = &m[co * n + (b - lo) * hw..co * n + (b - lo + 1) * hw];
                for (d, &v) in out.plane_mut(b, co).iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let k = check_conv(xs, ws)?;
    let (cout, cin, hw) = (ws.b, xs.c, xs.spatial());
    let ck = cin * k * k;
    let mut db = vec![0.0f64; cout];
    let mut dw = Tensor::zeros(ws);
    let mut dx = need_input.then(|| Tensor::zeros(xs));
    let (mut cols, mut g, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
    if output_side(cin, cout, k) {
        for b in 0..xs.b {
            for (co, d) in db.iter_mut().enumerate() {
                *d += grad_out
                    .plane(b, co)
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
        let wf = flip_weight(weight);
        let rows = cout * k * k;
        let mut dwf = vec![T::zero(); rows * cin];
        for (lo, hi) in sample_chunks(xs.b, cin + rows, hw) {
            let n = (hi - lo) * hw;
            // u rows (co, ky, kx) hold g shifted by the flipped offsets
            unfold(grad_out, k, lo, hi, &mut g);
            unfold(x, 1, lo, hi, &mut cols);
            T::gemm(
                rows,
                n,
                cin,
                T::one(),
                (&g, n as isize, 1),
                (&cols, 1, n as isize),
                T::one(),
                (&mut dwf, cin as isize, 1),
            );
            let Some(dx) = dx.as_mut() else { continue };
            scratch(&mut dcols, cin * n);
            T::gemm(
                cin,
                rows,
                n,
                T::one(),
                (&wf, 1, cin as isize),
                (&g, n as isize, 1),
                T::zero(),
                (&mut dcols, n as isize, 1),
            );
            for b in lo..hi {
                for c in 0..cin {
                    dx.plane_mut(b, c)
                        .copy_from_slice(&dcols[c * n + (b - lo) * hw..c * n + (b - lo + 1) * hw]);
                }
            }
        }
        dw = unflip_weight(&dwf, ws);
    } else {
        for (lo, hi) in sample_chunks(xs.b, ck, hw) {
            let n = (hi - lo) * hw;
            scratch(&mut g, cout * n);
            for b in lo..hi {
                for co in 0..cout {
                    let plane = grad_out.plane(b, co);
                    db[co] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
                    g[co * n + (b - lo) * hw..co * n + (b - lo + 1) * hw].copy_from_slice(plane);
                }
            }
            unfold(x, k, lo, hi, &mut cols);
            // dW += G * cols^T
            T::gemm(
                cout,
                n,
                ck,
                T::one(),
                (&g, n as isize, 1),
                (&cols, 1, n as isize),
                T::one(),
                (dw.data_mut(), ck as isize, 1),
            );
            let Some(dx) = dx.as_mut() else { continue };
            // dcols = W^T * G
            scratch(&mut dcols, ck * n);
            T::gemm(
                ck,
                cout,
                n,
                T::one(),
                (weight.data(), 1, ck as isize),
                (&g, n as isize, 1),
                T::zero(),
                (&mut dcols, n as isize, 1),
            );
            for b in lo..hi {
                let dst = &mut dx.data_mut()[b * cin * hw..(b + 1) * cin * hw];
                if k == 1 {
                    for c in 0..cin {
                        dst[c * hw..(c + 1) * hw].copy_from_slice(
                            &dcols[c * n + (b - lo) * hw..c * n + (b - lo + 1) * hw],
                        );
                    }
                } else {
                    col2im_add(&dcols[(b - lo) * hw..], cin, xs.h, xs.w, k, dst, n);
                }
            }
        }
    }
    let bias = Tensor::from_vec_unchecked(
        Shape::new(1, cout, 1, 1),
        db.into_iter().map(T::from_f64).collect(),
    );
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias,
    })
}

/// 2x2 average pooling with stride 2; a trailing odd row/column is dropped.
pub fn avg_pool2_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(shape_err!("avg_pool2 needs h, w >= 2, got {s}"));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = Tensor::zeros(Shape::new(s.b, s.c, oh, ow));
    for b in 0..s.b {
        for c in 0..s.c {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * s.w + 2 * xx;
                    dst[y * ow + xx] =
                        (src[i] + src[i + 1] + src[i + s.w] + src[i + s.w + 1]) * quarter;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward<T: Real>(input: Shape, grad_out: &Tensor<T>) -> Tensor<T> {
    let os = grad_out.shape();
    let quarter = T::from_f64(0.25);
    let mut dx = Tensor::zeros(input);
    for b in 0..input.b {
        for c in 0..input.c {
            let g = grad_out.plane(b, c);
            let dst = dx.plane_mut(b, c);
            for y in 0..os.h {
                for xx in 0..os.w {
                    let v = g[y * os.w + xx] * quarter;
                    let i = 2 * y * input.w + 2 * xx;
                    dst[i] += v;
                    dst[i + 1] += v;
                    dst[i + input.w] += v;
                    dst[i + input.w + 1] += v;
                }
            }
        }
    }
    dx
}
