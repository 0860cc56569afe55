//! Forward and backward kernels shared by the tape and the plain layer API.

mod conv;

pub use conv::{conv3d_backward_batch, conv3d_forward, conv3d_forward_batch, conv3d_shape, ConvGeometry, ConvGrads};

use crate::scalar::{gemm, MatLayout};
use crate::{Error, Result, Scalar, Tensor};

/// Floor applied inside `ln` by the cross-entropy kernels.
pub const LOG_FLOOR: f64 = 1e-12;

// ── Linear ──────────────────────────────────────────────────────────────

fn linear_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 || w.rank() != 2 {
        return Err(Error::shape(format!(
            "linear expects N×I input and O×I weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, i) = (x.shape()[0], x.shape()[1]);
    let (o, wi) = (w.shape()[0], w.shape()[1]);
    if wi != i {
        return Err(Error::shape(format!("linear weight expects {wi} inputs, got {i}")));
    }
    if b.shape() != [o] {
        return Err(Error::shape(format!(
            "linear bias {:?} does not match {o} outputs",
            b.shape()
        )));
    }
    Ok((n, i, o))
}

/// `y = x·Wᵀ + b` for an N×I batch.
pub fn linear_batch<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, i, o) = linear_dims(x, w, b)?;
    let mut y = Vec::with_capacity(n * o);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm(
        T::one(),
        x.data(),
        MatLayout::row_major(n, i),
        w.data(),
        MatLayout::row_major(o, i).t(),
        T::one(),
        &mut y,
        MatLayout::row_major(n, o),
    );
    Tensor::new(vec![n, o], y)
}

pub struct LinearGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, i, o) = linear_dims(x, w, b)?;
    dy.expect_shape(&[n, o])?;
    let mut dx = vec![T::zero(); n * i];
    gemm(
        T::one(),
        dy.data(),
        MatLayout::row_major(n, o),
        w.data(),
        MatLayout::row_major(o, i),
        T::zero(),
        &mut dx,
        MatLayout::row_major(n, i),
    );
    let mut dw = vec![T::zero(); o * i];
    gemm(
        T::one(),
        dy.data(),
        MatLayout::row_major(n, o).t(),
        x.data(),
        MatLayout::row_major(n, i),
        T::zero(),
        &mut dw,
        MatLayout::row_major(o, i),
    );
    let mut db = vec![T::zero(); o];
    for r in 0..n {
        for (a, &g) in db.iter_mut().zip(dy.row(r)) {
            *a += g;
        }
    }
    Ok(LinearGrads {
        dx: Tensor::new(vec![n, i], dx)?,
        dw: Tensor::new(vec![o, i], dw)?,
        db: Tensor::new(vec![o], db)?,
    })
}

// ── Batch normalization ─────────────────────────────────────────────────

/// Per-channel statistics observed on a training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance (divisor `m − 1`), used for running averages.
    pub var_unbiased: Vec<T>,
}

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

fn bn_layout<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("batch norm expects N×C×…, got {:?}", x.shape())));
    }
    let n = x.shape()[0];
    let c = x.shape()[1];
    let s = x.len() / (n * c);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm affine parameters must have {c} channels"
        )));
    }
    Ok((n, c, s))
}

/// Training-mode batch normalization over every axis except the channel.
/// Statistics are accumulated in `f64` in ascending index order.
pub fn batch_norm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>, BatchStats<T>)> {
    let (n, c, s) = bn_layout(x, gamma, beta)?;
    let m = n * s;
    if m < 2 {
        return Err(Error::invalid(
            "training-mode batch norm needs at least two values per channel",
        ));
    }
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(c);
    let mut stats = BatchStats {
        mean: Vec::with_capacity(c),
        var_unbiased: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let block = |i: usize| (i * c + ch) * s;
        let mut sum = 0.0f64;
        for i in 0..n {
            for &v in &xd[block(i)..block(i) + s] {
                sum += v.as_f64();
            }
        }
        let mean = sum / m as f64;
        let mut sq = 0.0f64;
        for i in 0..n {
            for &v in &xd[block(i)..block(i) + s] {
                let d = v.as_f64() - mean;
                sq += d * d;
            }
        }
        let var = sq / m as f64;
        let istd = 1.0 / (var + eps).sqrt();
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
        for i in 0..n {
            let r = block(i)..block(i) + s;
            for ((&v, xh), out) in xd[r.clone()].iter().zip(&mut xhat[r.clone()]).zip(&mut y[r]) {
                *xh = (v - mean_t) * istd_t;
                *out = g * *xh + bt;
            }
        }
        inv_std.push(istd_t);
        stats.mean.push(mean_t);
        stats.var_unbiased.push(T::lit(sq / (m - 1) as f64));
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormSaved {
            xhat,
            inv_std,
            train: true,
        },
        stats,
    ))
}

/// Evaluation-mode batch normalization from running statistics.
pub fn batch_norm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let (n, c, s) = bn_layout(x, gamma, beta)?;
    running_mean.expect_shape(&[c])?;
    running_var.expect_shape(&[c])?;
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let istd = T::one() / (running_var.data()[ch] + T::lit(eps)).sqrt();
        let mean = running_mean.data()[ch];
        let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..n {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for ((&v, xh), out) in xd[r.clone()].iter().zip(&mut xhat[r.clone()]).zip(&mut y[r]) {
                *xh = (v - mean) * istd;
                *out = g * *xh + bt;
            }
        }
        inv_std.push(istd);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BatchNormSaved {
            xhat,
            inv_std,
            train: false,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BatchNormSaved<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let shape = dy.shape();
    let (n, c) = (shape[0], shape[1]);
    let s = dy.len() / (n * c);
    let m = (n * s) as f64;
    let dyd = dy.data();
    let mut dx = vec![T::zero(); dyd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for i in 0..n {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            for (&g, &xh) in dyd[r.clone()].iter().zip(&saved.xhat[r]) {
                sum_dy += g.as_f64();
                sum_dy_xhat += (g * xh).as_f64();
            }
        }
        dgamma[ch] = T::lit(sum_dy_xhat);
        dbeta[ch] = T::lit(sum_dy);
        let scale = gamma.data()[ch] * saved.inv_std[ch];
        for i in 0..n {
            let r = (i * c + ch) * s..(i * c + ch + 1) * s;
            if saved.train {
                let mean_dy = T::lit(sum_dy / m);
                let mean_dy_xhat = T::lit(sum_dy_xhat / m);
                for ((&g, &xh), out) in dyd[r.clone()].iter().zip(&saved.xhat[r.clone()]).zip(&mut dx[r]) {
                    *out = scale * (g - mean_dy - xh * mean_dy_xhat);
                }
            } else {
                for (&g, out) in dyd[r.clone()].iter().zip(&mut dx[r]) {
                    *out = scale * g;
                }
            }
        }
    }
    Ok((
        Tensor::new(shape.to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

// ── LSTM cell ───────────────────────────────────────────────────────────

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Saved activations of one batched LSTM step. Gate order is
/// input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmSaved<T> {
    pub gates: Vec<T>,
    pub c_prev: Vec<T>,
    pub tanh_c: Vec<T>,
}

pub struct LstmDims {
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
}

pub fn lstm_dims<T: Scalar>(
    x: &Tensor<T>,
    state: Option<&Tensor<T>>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<LstmDims> {
    if x.rank() != 2 || w_ih.rank() != 2 || w_hh.rank() != 2 {
        return Err(Error::shape("lstm expects rank-2 input and gate matrices"));
    }
    let (b, i) = (x.shape()[0], x.shape()[1]);
    let h4 = w_ih.shape()[0];
    if !h4.is_multiple_of(4) || w_ih.shape()[1] != i {
        return Err(Error::shape(format!(
            "lstm w_ih {:?} incompatible with input width {i}",
            w_ih.shape()
        )));
    }
    let h = h4 / 4;
    if w_hh.shape() != [h4, h] || bias.shape() != [h4] {
        return Err(Error::shape(format!(
            "lstm w_hh {:?} / bias {:?} inconsistent with {h} units",
            w_hh.shape(),
            bias.shape()
        )));
    }
    if let Some(s) = state {
        s.expect_shape(&[b, 2 * h])?;
    }
    Ok(LstmDims {
        batch: b,
        input: i,
        hidden: h,
    })
}

/// One LSTM step. `state` packs `[hidden | cell]` per row (B×2H); `None`
/// is the zero state. Returns the next packed state.
pub fn lstm_cell_forward<T: Scalar>(
    x: &Tensor<T>,
    state: Option<&Tensor<T>>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LstmSaved<T>)> {
    let LstmDims {
        batch,
        input,
        hidden: h,
    } = lstm_dims(x, state, w_ih, w_hh, bias)?;
    let mut gates = Vec::with_capacity(batch * 4 * h);
    for _ in 0..batch {
        gates.extend_from_slice(bias.data());
    }
    gemm(
        T::one(),
        x.data(),
        MatLayout::row_major(batch, input),
        w_ih.data(),
        MatLayout::row_major(4 * h, input).t(),
        T::one(),
        &mut gates,
        MatLayout::row_major(batch, 4 * h),
    );
    let mut c_prev = vec![T::zero(); batch * h];
    if let Some(s) = state {
        let sd = s.data();
        gemm(
            T::one(),
            sd,
            MatLayout {
                rows: batch,
                cols: h,
                rs: 2 * h,
                cs: 1,
            },
            w_hh.data(),
            MatLayout::row_major(4 * h, h).t(),
            T::one(),
            &mut gates,
            MatLayout::row_major(batch, 4 * h),
        );
        for r in 0..batch {
            c_prev[r * h..(r + 1) * h].copy_from_slice(&sd[r * 2 * h + h..(r + 1) * 2 * h]);
        }
    }
    let mut next = vec![T::zero(); batch * 2 * h];
    let mut tanh_c = vec![T::zero(); batch * h];
    for r in 0..batch {
        let g = &mut gates[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            g[j] = sigmoid(g[j]);
            g[h + j] = sigmoid(g[h + j]);
            g[2 * h + j] = g[2 * h + j].tanh();
            g[3 * h + j] = sigmoid(g[3 * h + j]);
            let c = g[h + j] * c_prev[r * h + j] + g[j] * g[2 * h + j];
            let tc = c.tanh();
            tanh_c[r * h + j] = tc;
            next[r * 2 * h + j] = g[3 * h + j] * tc;
            next[r * 2 * h + h + j] = c;
        }
    }
    Ok((
        Tensor::new(vec![batch, 2 * h], next)?,
        LstmSaved { gates, c_prev, tanh_c },
    ))
}

pub struct LstmGrads<T> {
    pub dx: Tensor<T>,
    pub dstate: Tensor<T>,
    pub dw_ih: Tensor<T>,
    pub dw_hh: Tensor<T>,
    pub dbias: Tensor<T>,
}

/// Backward of [`lstm_cell_forward`] given the gradient of the packed next state.
pub fn lstm_cell_backward<T: Scalar>(
    x: &Tensor<T>,
    state: Option<&Tensor<T>>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    bias: &Tensor<T>,
    saved: &LstmSaved<T>,
    dnext: &Tensor<T>,
) -> Result<LstmGrads<T>> {
    let LstmDims {
        batch,
        input,
        hidden: h,
    } = lstm_dims(x, state, w_ih, w_hh, bias)?;
    dnext.expect_shape(&[batch, 2 * h])?;
    let dn = dnext.data();
    let one = T::one();
    let mut dgates = vec![T::zero(); batch * 4 * h];
    let mut dstate = vec![T::zero(); batch * 2 * h];
    for r in 0..batch {
        let g = &saved.gates[r * 4 * h..(r + 1) * 4 * h];
        let dg = &mut dgates[r * 4 * h..(r + 1) * 4 * h];
        for j in 0..h {
            let (gi, gf, gg, go) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = saved.tanh_c[r * h + j];
            let dh = dn[r * 2 * h + j];
            let dc = dn[r * 2 * h + h + j] + dh * go * (one - tc * tc);
            let d_o = dh * tc;
            let d_i = dc * gg;
            let d_g = dc * gi;
            let d_f = dc * saved.c_prev[r * h + j];
            dg[j] = d_i * gi * (one - gi);
            dg[h + j] = d_f * gf * (one - gf);
            dg[2 * h + j] = d_g * (one - gg * gg);
            dg[3 * h + j] = d_o * go * (one - go);
            dstate[r * 2 * h + h + j] = dc * gf;
        }
    }
    let mut dx = vec![T::zero(); batch * input];
    gemm(
        one,
        &dgates,
        MatLayout::row_major(batch, 4 * h),
        w_ih.data(),
        MatLayout::row_major(4 * h, input),
        T::zero(),
        &mut dx,
        MatLayout::row_major(batch, input),
    );
    let mut dw_ih = vec![T::zero(); 4 * h * input];
    gemm(
        one,
        &dgates,
        MatLayout::row_major(batch, 4 * h).t(),
        x.data(),
        MatLayout::row_major(batch, input),
        T::zero(),
        &mut dw_ih,
        MatLayout::row_major(4 * h, input),
    );
    let mut dw_hh = vec![T::zero(); 4 * h * h];
    if let Some(s) = state {
        let hidden_view = MatLayout {
            rows: batch,
            cols: h,
            rs: 2 * h,
            cs: 1,
        };
        gemm(
            one,
            &dgates,
            MatLayout::row_major(batch, 4 * h).t(),
            s.data(),
            hidden_view,
            T::zero(),
            &mut dw_hh,
            MatLayout::row_major(4 * h, h),
        );
        gemm(
            one,
            &dgates,
            MatLayout::row_major(batch, 4 * h),
            w_hh.data(),
            MatLayout::row_major(4 * h, h),
            T::zero(),
            &mut dstate,
            hidden_view,
        );
    }
    let mut dbias = vec![T::zero(); 4 * h];
    for r in 0..batch {
        for (a, &v) in dbias.iter_mut().zip(&dgates[r * 4 * h..(r + 1) * 4 * h]) {
            *a += v;
        }
    }
    Ok(LstmGrads {
        dx: Tensor::new(vec![batch, input], dx)?,
        dstate: Tensor::new(vec![batch, 2 * h], dstate)?,
        dw_ih: Tensor::new(vec![4 * h, input], dw_ih)?,
        dw_hh: Tensor::new(vec![4 * h, h], dw_hh)?,
        dbias: Tensor::new(vec![4 * h], dbias)?,
    })
}

// ── Softmax / cross-entropy ─────────────────────────────────────────────

/// Temperature softmax of one logit row with max subtraction.
pub fn softmax_row<T: Scalar>(z: &[T], temperature: T) -> Vec<T> {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<T> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &v| a + v);
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean over rows of `−Σ tᵢ·ln(max(pᵢ, 1e−12))` where `p = softmax(z/T)`.
/// Returns the loss and the probabilities.
pub fn cross_entropy_rows<T: Scalar>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    temperature: T,
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross entropy expects N×C logits, got {:?}",
            logits.shape()
        )));
    }
    targets.expect_shape(logits.shape())?;
    let n = logits.shape()[0];
    let floor = T::lit(LOG_FLOOR);
    let mut probs = Vec::with_capacity(logits.len());
    let mut total = T::zero();
    for r in 0..n {
        let p = softmax_row(logits.row(r), temperature);
        let row_loss = p
            .iter()
            .zip(targets.row(r))
            .fold(T::zero(), |acc, (&pi, &ti)| acc - ti * pi.max(floor).ln());
        total += row_loss;
        probs.extend(p);
    }
    Ok((total / T::lit(n as f64), Tensor::new(logits.shape().to_vec(), probs)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let eye = Tensor::<f32>::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap();
        let y = linear_batch(&x, &eye, &Tensor::zeros(vec![3]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1., 2., 3.]);

        let w = Tensor::<f32>::new(vec![2, 2], vec![1., 1., 1., -1.]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![2., 3.]).unwrap();
        let y = linear_batch(&x, &w, &Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert_eq!(y.data(), &[5., -1.]);

        let bad = Tensor::<f32>::zeros(vec![1, 4]).unwrap();
        assert!(linear_batch(&bad, &w, &Tensor::zeros(vec![2]).unwrap()).is_err());
    }

    #[test]
    fn batch_norm_single_value_rejected() {
        let x = Tensor::<f32>::ones(vec![1, 3, 1]).unwrap();
        let g = Tensor::ones(vec![3]).unwrap();
        let b = Tensor::zeros(vec![3]).unwrap();
        assert!(batch_norm_train(&x, &g, &b, 1e-5).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax_row(&[1000.0f32, 999.0, -5.0], 1.0);
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
