//! Forward and backward kernels. These work on plain tensors; recording and
//! gradient routing live in the tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a stride-1 convolution with symmetric zero padding.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn new(input: &[usize], weight: &[usize], bias: &[usize], pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected 4-d input and weight, got {input:?} and {weight:?}"),
            ));
        };
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if bias != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {bias:?} does not match {cout} output channels"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (p={pad})"),
            ));
        }
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one sample (`cin x h x w`) into a `K x (oh*ow)` column matrix.
fn im2col<F: Scalar>(d: &ConvDims, x: &[F], cols: &mut [F]) {
    let plane = d.out_plane();
    for c in 0..d.cin {
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = (c * d.kh + dy) * d.kw + dx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize + dy as isize - d.pad as isize;
                    let out_row = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(F::zero());
                        continue;
                    }
                    let src = &x[(c * d.h + iy as usize) * d.w..(c * d.h + iy as usize + 1) * d.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize + dx as isize - d.pad as isize;
                        *v = if ix < 0 || ix >= d.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a column-matrix gradient back onto one sample, accumulating overlaps.
fn col2im<F: Scalar>(d: &ConvDims, cols: &[F], gx: &mut [F]) {
    let plane = d.out_plane();
    for c in 0..d.cin {
        for dy in 0..d.kh {
            for dx in 0..d.kw {
                let row = (c * d.kh + dy) * d.kw + dx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = oy as isize + dy as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst_off = (c * d.h + iy as usize) * d.w;
                    for ox in 0..d.ow {
                        let ix = ox as isize + dx as isize - d.pad as isize;
                        if ix >= 0 && (ix as usize) < d.w {
                            let v = &mut gx[dst_off + ix as usize];
                            *v = *v + src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 cross-correlation with zero padding `pad` and per-channel bias.
pub fn conv2d<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    pad: usize,
) -> Result<Tensor<F>> {
    let d = ConvDims::new(input.shape(), weight.shape(), bias.shape(), pad)?;
    let plane = d.out_plane();
    let k = d.k();
    let mut out = vec![F::zero(); d.n * d.cout * plane];
    let mut cols = vec![F::zero(); k * plane];
    let in_sample = d.cin * d.h * d.w;
    for s in 0..d.n {
        im2col(&d, &input.data()[s * in_sample..(s + 1) * in_sample], &mut cols);
        let dst = &mut out[s * d.cout * plane..(s + 1) * d.cout * plane];
        for (o, row) in dst.chunks_exact_mut(plane).enumerate() {
            row.fill(bias.data()[o]);
        }
        F::gemm(
            d.cout,
            k,
            plane,
            weight.data(),
            k as isize,
            1,
            &cols,
            plane as isize,
            1,
            F::one(),
            dst,
            plane as isize,
            1,
        );
    }
    let out = Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)?;
    if !out.is_finite() {
        return Err(Error::NumericFault("conv2d output".into()));
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<F: Scalar>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    pad: usize,
    grad_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let cout = weight.shape()[0];
    let d = ConvDims::new(input.shape(), weight.shape(), &[cout], pad)?;
    let plane = d.out_plane();
    let k = d.k();
    if grad_out.shape() != [d.n, d.cout, d.oh, d.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream gradient shape {:?}", grad_out.shape()),
        ));
    }
    let in_sample = d.cin * d.h * d.w;
    let mut gx = vec![F::zero(); input.numel()];
    let mut gw = vec![F::zero(); weight.numel()];
    let mut gb = vec![F::zero(); d.cout];
    let mut cols = vec![F::zero(); k * plane];
    let mut gcols = vec![F::zero(); k * plane];
    // Samples are reduced in index order so weight gradients are reproducible.
    for s in 0..d.n {
        let go = &grad_out.data()[s * d.cout * plane..(s + 1) * d.cout * plane];
        for (o, row) in go.chunks_exact(plane).enumerate() {
            gb[o] = row.iter().fold(gb[o], |acc, &v| acc + v);
        }
        im2col(&d, &input.data()[s * in_sample..(s + 1) * in_sample], &mut cols);
        // gw (cout x k) += go (cout x plane) * cols^T (plane x k)
        F::gemm(
            d.cout,
            plane,
            k,
            go,
            plane as isize,
            1,
            &cols,
            1,
            plane as isize,
            F::one(),
            &mut gw,
            k as isize,
            1,
        );
        // gcols (k x plane) = w^T (k x cout) * go (cout x plane)
        F::gemm(
            k,
            d.cout,
            plane,
            weight.data(),
            1,
            k as isize,
            go,
            plane as isize,
            1,
            F::zero(),
            &mut gcols,
            plane as isize,
            1,
        );
        col2im(&d, &gcols, &mut gx[s * in_sample..(s + 1) * in_sample]);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![d.cout], gb)?,
    ))
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Passes the upstream gradient where `x > 0`; the derivative at 0 is 0.
pub fn relu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
        .collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same("add", a, b)?;
    Ok(zip_map(a, b, |x, y| x + y))
}

pub fn sub<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same("sub", a, b)?;
    Ok(zip_map(a, b, |x, y| x - y))
}

pub fn scale<F: Scalar>(x: &Tensor<F>, factor: F) -> Tensor<F> {
    x.map(|v| v * factor)
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Source index (into the input buffer) of every pixel-shuffle output element.
fn pixel_shuffle_index(shape: &[usize], r: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let &[n, c, h, w] = shape else {
        return Err(Error::shape("pixel_shuffle", format!("expected 4-d input, got {shape:?}")));
    };
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{c} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut index = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..oc {
            for y in 0..oh {
                let (i, di) = (y / r, y % r);
                for x in 0..ow {
                    let (j, dj) = (x / r, x % r);
                    let src_c = ch * r * r + di * r + dj;
                    index.push(((b * c + src_c) * h + i) * w + j);
                }
            }
        }
    }
    Ok((index, vec![n, oc, oh, ow]))
}

/// Depth-to-space: `out[n, c, r*i+di, r*j+dj] = in[n, c*r*r + di*r + dj, i, j]`.
pub fn pixel_shuffle<F: Scalar>(x: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let (index, shape) = pixel_shuffle_index(x.shape(), r)?;
    gather(x, &index, shape)
}

/// Inverse permutation of [`pixel_shuffle`] (space-to-depth).
pub fn pixel_unshuffle<F: Scalar>(y: &Tensor<F>, r: usize) -> Result<Tensor<F>> {
    let &[n, c, h, w] = y.shape() else {
        return Err(Error::shape("pixel_unshuffle", format!("expected 4-d input, got {:?}", y.shape())));
    };
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape("pixel_unshuffle", format!("{h}x{w} not divisible by {r}")));
    }
    let in_shape = [n, c * r * r, h / r, w / r];
    let (index, _) = pixel_shuffle_index(&in_shape, r)?;
    let mut out = vec![F::zero(); y.numel()];
    for (dst, &src) in y.data().iter().zip(&index) {
        out[src] = *dst;
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// `out[i] = x[index[i]]`, reshaped to `shape`. Indices may repeat.
pub fn gather<F: Scalar>(x: &Tensor<F>, index: &[usize], shape: Vec<usize>) -> Result<Tensor<F>> {
    let numel: usize = shape.iter().product();
    if numel != index.len() {
        return Err(Error::shape(
            "gather",
            format!("{} indices for output shape {shape:?}", index.len()),
        ));
    }
    let src = x.data();
    let data = index
        .iter()
        .map(|&i| {
            src.get(i).copied().ok_or_else(|| {
                Error::shape("gather", format!("index {i} out of range for {:?}", x.shape()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data)
}

/// Adjoint of [`gather`]: scatters and sums the upstream gradient back onto the source layout.
pub fn gather_backward<F: Scalar>(src_shape: &[usize], index: &[usize], grad_out: &Tensor<F>) -> Tensor<F> {
    let mut g = Tensor::zeros(src_shape);
    let gd = g.data_mut();
    for (&i, &v) in index.iter().zip(grad_out.data()) {
        gd[i] = gd[i] + v;
    }
    g
}

fn mean_of<F: Scalar>(terms: impl Iterator<Item = f64>, n: usize) -> F {
    F::of(terms.sum::<f64>() / n as f64)
}

/// Mean absolute error.
pub fn l1_loss<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same("l1_loss", a, b)?;
    let v = mean_of::<F>(
        a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs().as_f64()),
        a.numel(),
    );
    Ok(Tensor::scalar(v))
}

/// Gradient of [`l1_loss`] with respect to `a`; the subgradient at `a == b` is 0.
pub fn l1_loss_backward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, upstream: F) -> Tensor<F> {
    let s = upstream / F::of(a.numel() as f64);
    zip_map(a, b, |x, y| {
        if x > y {
            s
        } else if x < y {
            -s
        } else {
            F::zero()
        }
    })
}

/// Mean squared error.
pub fn l2_loss<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    check_same("l2_loss", a, b)?;
    let v = mean_of::<F>(
        a.data().iter().zip(b.data()).map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        }),
        a.numel(),
    );
    Ok(Tensor::scalar(v))
}

/// Gradient of [`l2_loss`] with respect to `a`: `2 (a - b) / n`.
pub fn l2_loss_backward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, upstream: F) -> Tensor<F> {
    let s = F::of(2.0) * upstream / F::of(a.numel() as f64);
    zip_map(a, b, |x, y| (x - y) * s)
}

pub fn sum<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    Tensor::scalar(F::of(x.data().iter().map(|v| v.as_f64()).sum()))
}
