//! 3D convolution via im2col + GEMM.
//!
//! Each batch item is lowered independently, so items can be processed in
//! parallel. Weight gradients are formed per item and summed in item order.

use serde::{Deserialize, Serialize};

use crate::exec::{for_each_chunk_mut, map_fold, Parallelism};
use crate::scalar::{gemm, MatLayout};
use crate::{Error, Result, Scalar, Tensor};

/// Output length of one convolved dimension:
/// `floor((in + 2·pad − kernel) / stride) + 1`.
pub fn conv3d_shape(in_dim: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if in_dim == 0 || kernel == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "conv dimension needs in_dim, kernel, stride >= 1 (got {in_dim}, {kernel}, {stride})"
        )));
    }
    let padded = in_dim + 2 * pad;
    if padded < kernel {
        return Err(Error::invalid(format!("kernel {kernel} exceeds padded input {padded}")));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Kernel, stride and zero-padding per (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn uniform(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel: [kernel; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    /// Size-preserving 3×3×3 convolution.
    pub fn same3() -> Self {
        Self::uniform(3, 1, 1)
    }

    /// Halving 4×4×4 convolution with stride 2.
    pub fn down4() -> Self {
        Self::uniform(4, 2, 1)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for d in 0..3 {
            out[d] = conv3d_shape(input[d], self.kernel[d], self.stride[d], self.pad[d])?;
        }
        Ok(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    c_in: usize,
    input: [usize; 3],
    c_out: usize,
    out: [usize; 3],
    geom: ConvGeometry,
}

impl Dims {
    fn in_len(&self) -> usize {
        self.c_in * self.input.iter().product::<usize>()
    }
    fn out_pos(&self) -> usize {
        self.out.iter().product()
    }
    fn patch(&self) -> usize {
        self.c_in * self.geom.kernel_volume()
    }
}

fn dims<T: Scalar>(x_shape: &[usize], w: &Tensor<T>, b: &Tensor<T>, geom: ConvGeometry) -> Result<(usize, Dims)> {
    if x_shape.len() != 5 {
        return Err(Error::shape(format!("conv3d input must be N×C×T×H×W, got {x_shape:?}")));
    }
    let ws = w.shape();
    if ws.len() != 5 || ws[2..] != geom.kernel {
        return Err(Error::shape(format!(
            "conv3d weight {ws:?} does not match kernel {:?}",
            geom.kernel
        )));
    }
    if ws[1] != x_shape[1] {
        return Err(Error::shape(format!(
            "conv3d weight expects {} input channels, input has {}",
            ws[1], x_shape[1]
        )));
    }
    if b.shape() != [ws[0]] {
        return Err(Error::shape(format!(
            "conv3d bias {:?} does not match {} output channels",
            b.shape(),
            ws[0]
        )));
    }
    let input = [x_shape[2], x_shape[3], x_shape[4]];
    let out = geom.output_dims(input)?;
    Ok((
        x_shape[0],
        Dims {
            c_in: ws[1],
            input,
            c_out: ws[0],
            out,
            geom,
        },
    ))
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`:
/// the outputs whose input index `o·stride + k − pad` lies inside `0..len`.
fn valid_range(len: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - 1 - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Appends the patch matrix of `items` consecutive C×T×H×W inputs: row
/// `(c, kt, kh, kw)` holds the `T'·H'·W'` taps of each item in turn.
fn im2col<T: Scalar>(x: &[T], items: usize, d: &Dims, cols: &mut Vec<T>) {
    let [t_in, h_in, w_in] = d.input;
    let [t_out, h_out, w_out] = d.out;
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.pad;
    let in_len = d.in_len();
    let plane = h_out * w_out;
    let zeros = |cols: &mut Vec<T>, n: usize| cols.resize(cols.len() + n, T::zero());
    for c in 0..d.c_in {
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(t_in, t_out, dt, st, pt);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(h_in, h_out, dh, sh, ph);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(w_in, w_out, dw, sw, pw);
                    for item in x.chunks_exact(in_len).take(items) {
                        zeros(cols, t_lo * plane);
                        for ot in t_lo..t_hi {
                            let it = ot * st + dt - pt;
                            zeros(cols, h_lo * w_out);
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + dh - ph;
                                let src = &item[((c * t_in + it) * h_in + ih) * w_in..][..w_in];
                                zeros(cols, w_lo);
                                if w_hi > w_lo {
                                    let first = w_lo * sw + dw - pw;
                                    if sw == 1 {
                                        cols.extend_from_slice(&src[first..first + (w_hi - w_lo)]);
                                    } else {
                                        cols.extend(src[first..].iter().step_by(sw).take(w_hi - w_lo));
                                    }
                                }
                                zeros(cols, w_out - w_hi);
                            }
                            zeros(cols, (h_out - h_hi) * w_out);
                        }
                        zeros(cols, (t_out - t_hi) * plane);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch-matrix rows (laid out as in [`im2col`]) onto a
/// C×T×H×W gradient.
fn col2im<T: Scalar>(cols: &[T], d: &Dims, dx: &mut [T], row_stride: usize) {
    let [t_in, h_in, w_in] = d.input;
    let [t_out, h_out, w_out] = d.out;
    let [kt, kh, kw] = d.geom.kernel;
    let [st, sh, sw] = d.geom.stride;
    let [pt, ph, pw] = d.geom.pad;
    let p = d.out_pos();
    let plane = h_out * w_out;
    let mut row = 0;
    for c in 0..d.c_in {
        for dt in 0..kt {
            let (t_lo, t_hi) = valid_range(t_in, t_out, dt, st, pt);
            for dh in 0..kh {
                let (h_lo, h_hi) = valid_range(h_in, h_out, dh, sh, ph);
                for dw in 0..kw {
                    let (w_lo, w_hi) = valid_range(w_in, w_out, dw, sw, pw);
                    let src = &cols[row * row_stride..row * row_stride + p];
                    for ot in t_lo..t_hi {
                        let it = ot * st + dt - pt;
                        for oh in h_lo..h_hi {
                            let ih = oh * sh + dh - ph;
                            if w_hi <= w_lo {
                                continue;
                            }
                            let first = w_lo * sw + dw - pw;
                            let g = &mut dx[((c * t_in + it) * h_in + ih) * w_in..][..w_in];
                            let s = &src[ot * plane + oh * w_out..][w_lo..w_hi];
                            for (o, v) in g[first..].iter_mut().step_by(sw).zip(s) {
                                *o += *v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Maximum patch-matrix elements lowered at once.
const COL_BUDGET: usize = 1 << 22;

/// Items are lowered together in fixed-size groups; the grouping depends
/// only on the shapes, so results do not depend on the parallelism mode.
fn group_size(n: usize, d: &Dims) -> usize {
    (COL_BUDGET / (d.patch() * d.out_pos()).max(1)).clamp(1, n.max(1))
}

/// Batched forward over an N×C×T×H×W input.
pub fn conv3d_forward_batch<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    geom: ConvGeometry,
    par: Parallelism,
) -> Result<Tensor<T>> {
    let (n, d) = dims(x.shape(), w, b, geom)?;
    let (in_len, p, k) = (d.in_len(), d.out_pos(), d.patch());
    let out_len = d.c_out * p;
    let g = group_size(n, &d);
    let mut y = vec![T::zero(); n * out_len];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for_each_chunk_mut(par, &mut y, g * out_len, |gi, yg| {
        let items = yg.len() / out_len;
        let cols_n = items * p;
        let mut cols = Vec::with_capacity(k * cols_n);
        im2col(&xd[gi * g * in_len..], items, &d, &mut cols);
        let mut prod = vec![T::zero(); d.c_out * cols_n];
        gemm(
            T::one(),
            wd,
            MatLayout::row_major(d.c_out, k),
            &cols,
            MatLayout::row_major(k, cols_n),
            T::zero(),
            &mut prod,
            MatLayout::row_major(d.c_out, cols_n),
        );
        for j in 0..items {
            for co in 0..d.c_out {
                let bias = bd[co];
                let src = &prod[co * cols_n + j * p..][..p];
                let dst = &mut yg[j * out_len + co * p..][..p];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = v + bias;
                }
            }
        }
    });
    Tensor::new(vec![n, d.c_out, d.out[0], d.out[1], d.out[2]], y)
}

/// Single-item forward over a C×T×H×W input.
pub fn conv3d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape(format!(
            "conv3d_forward expects C×T×H×W, got {:?}",
            input.shape()
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let x = input.clone().reshape(shape)?;
    let y = conv3d_forward_batch(&x, weight, bias, geom, Parallelism::Sequential)?;
    let out_shape = y.shape()[1..].to_vec();
    y.reshape(out_shape)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Gradients of a batched convolution given the upstream gradient `dy`.
/// Weight and bias gradients are accumulated group by group in item order.
pub fn conv3d_backward_batch<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
    geom: ConvGeometry,
    need_dx: bool,
    par: Parallelism,
) -> Result<ConvGrads<T>> {
    let (n, d) = dims(x.shape(), w, b, geom)?;
    let (in_len, p, k) = (d.in_len(), d.out_pos(), d.patch());
    let out_len = d.c_out * p;
    if dy.len() != n * out_len {
        return Err(Error::shape("conv3d upstream gradient size"));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let w_len = w.len();
    let g = group_size(n, &d);
    let groups = n.div_ceil(g);

    let group = |gi: usize| -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
        let first = gi * g;
        let items = g.min(n - first);
        let cols_n = items * p;
        let mut cols = Vec::with_capacity(k * cols_n);
        im2col(&xd[first * in_len..], items, &d, &mut cols);
        // upstream gradient regrouped as c_out × (items·p)
        let mut dyg = Vec::with_capacity(d.c_out * cols_n);
        for co in 0..d.c_out {
            for j in 0..items {
                dyg.extend_from_slice(&dyd[(first + j) * out_len + co * p..][..p]);
            }
        }
        let mut dw = vec![T::zero(); w_len];
        gemm(
            T::one(),
            &dyg,
            MatLayout::row_major(d.c_out, cols_n),
            &cols,
            MatLayout::row_major(k, cols_n).t(),
            T::zero(),
            &mut dw,
            MatLayout::row_major(d.c_out, k),
        );
        let db: Vec<T> = (0..d.c_out)
            .map(|co| {
                (0..items).fold(T::zero(), |acc, j| {
                    dyd[(first + j) * out_len + co * p..][..p]
                        .iter()
                        .fold(acc, |a, &v| a + v)
                })
            })
            .collect();
        let dxg = need_dx.then(|| {
            gemm(
                T::one(),
                wd,
                MatLayout::row_major(d.c_out, k).t(),
                &dyg,
                MatLayout::row_major(d.c_out, cols_n),
                T::zero(),
                &mut cols,
                MatLayout::row_major(k, cols_n),
            );
            let mut gx = vec![T::zero(); items * in_len];
            for j in 0..items {
                col2im(&cols[j * p..], &d, &mut gx[j * in_len..(j + 1) * in_len], cols_n);
            }
            gx
        });
        (dw, db, dxg)
    };

    let mut dx = need_dx.then(|| Vec::with_capacity(n * in_len));
    let (dw, db) = map_fold(
        par,
        groups,
        (vec![T::zero(); w_len], vec![T::zero(); d.c_out]),
        group,
        |(mut dw, mut db), (dwi, dbi, dxi)| {
            dw.iter_mut().zip(&dwi).for_each(|(a, &v)| *a += v);
            db.iter_mut().zip(&dbi).for_each(|(a, &v)| *a += v);
            if let (Some(dx), Some(gx)) = (dx.as_mut(), dxi) {
                dx.extend_from_slice(&gx);
            }
            (dw, db)
        },
    );

    Ok(ConvGrads {
        dx: dx.map(|v| Tensor::new(x.shape().to_vec(), v)).transpose()?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new(b.shape().to_vec(), db)?,
    })
}
