//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Operations are recorded in execution order as coarse layer-level nodes
//! (convolution, batch norm, LSTM step, ...). [`Tape::backward`] walks them
//! in exact reverse order of recording. A tape can be consumed once.

mod gradcheck;

pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport, DENOM_FLOOR};

use indexmap::IndexMap;

use crate::kernels::{self, BatchNormSaved, BatchStats, ConvGeometry, LstmSaved};
use crate::{Error, Parallelism, Result, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row targets for cross-entropy.
#[derive(Clone, Debug)]
pub enum Targets<T> {
    /// Hard class index per row.
    Classes(Vec<usize>),
    /// Probability distribution per row (N×C).
    Distribution(Tensor<T>),
}

/// Batch-norm behaviour of a recorded node.
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running mean and variance.
    Eval {
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
    },
}

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    Relu {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    NarrowRows {
        x: Var,
        start: usize,
    },
    ConcatRows {
        xs: Vec<Var>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Lstm {
        x: Var,
        state: Option<Var>,
        w_ih: Var,
        w_hh: Var,
        b: Var,
        saved: LstmSaved<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        targets: Tensor<T>,
        temperature: T,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. `T` is `f32` for training and `f64` for gradient checks.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    consumed: bool,
    par: Parallelism,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    by_var: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: IndexMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a leaf; all zeros if the loss does not reach it.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match self.by_var.get(v.0).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()).expect("recorded shape"),
        }
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, Tensor<T>)> + '_ {
        self.params.iter().map(|(n, &v)| (n.as_str(), self.wrt(v)))
    }

    pub(crate) fn take_param(&mut self, name: &str) -> Option<Tensor<T>> {
        let v = *self.params.get(name)?;
        Some(match self.by_var[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(self.shapes[v.0].clone()).expect("recorded shape"),
        })
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            consumed: false,
            par: Parallelism::Sequential,
        }
    }

    pub fn with_parallelism(par: Parallelism) -> Self {
        Tape { par, ..Self::new() }
    }

    pub fn parallelism(&self) -> Parallelism {
        self.par
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Autodiff("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Leaf that receives a gradient but is not a named parameter.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient (data, frozen tensors).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        self.check_live()?;
        let y = kernels::conv3d_forward_batch(self.value(x), self.value(w), self.value(b), geom, self.par)?;
        Ok(self.push(y, Op::Conv3d { x, w, b, geom }, &[x, w, b]))
    }

    /// Batch normalization over all axes but the channel axis (axis 1).
    /// In train mode the batch statistics are returned for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        self.check_live()?;
        let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let (y, saved, stats) = match mode {
            BnMode::Train => {
                let (y, saved, stats) = kernels::batch_norm_train(xv, g, b, eps)?;
                (y, saved, Some(stats))
            }
            BnMode::Eval {
                running_mean,
                running_var,
            } => {
                let (y, saved) = kernels::batch_norm_eval(xv, g, b, running_mean, running_var, eps)?;
                (y, saved, None)
            }
        };
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, saved }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let y = self.value(x).map(|v| v.max(T::zero()));
        Ok(self.push(y, Op::Relu { x }, &[x]))
    }

    /// `x·Wᵀ + b` on an N×I input.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let y = kernels::linear_batch(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_live()?;
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape { x }, &[x]))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let xv = self.value(x);
        let rows = xv.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::shape(format!(
                "narrow {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let row = xv.len() / rows;
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let y = Tensor::new(shape, xv.data()[start * row..(start + len) * row].to_vec())?;
        Ok(self.push(y, Op::NarrowRows { x, start }, &[x]))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = xs.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in xs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows trailing shapes differ"));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let y = Tensor::new(shape, data)?;
        Ok(self.push(y, Op::ConcatRows { xs: xs.to_vec() }, xs))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_live()?;
        let xv = self.value(x);
        if xv.rank() != 2 || len == 0 || start + len > xv.shape()[1] {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {:?}", xv.shape())));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let y = Tensor::new(vec![n, len], data)?;
        Ok(self.push(y, Op::SliceCols { x, start }, &[x]))
    }

    /// One LSTM step on packed `[hidden | cell]` state; `None` is the zero state.
    pub fn lstm_cell(&mut self, x: Var, state: Option<Var>, w_ih: Var, w_hh: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (y, saved) = kernels::lstm_cell_forward(
            self.value(x),
            state.map(|s| self.value(s)),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b),
        )?;
        let mut inputs = vec![x, w_ih, w_hh, b];
        inputs.extend(state);
        Ok(self.push(
            y,
            Op::Lstm {
                x,
                state,
                w_ih,
                w_hh,
                b,
                saved,
            },
            &inputs,
        ))
    }

    /// Mean cross-entropy of `softmax(logits / temperature)` against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Targets<T>, temperature: T) -> Result<Var> {
        self.check_live()?;
        if temperature <= T::zero() {
            return Err(Error::invalid("temperature must be positive"));
        }
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(Error::shape(format!(
                "cross entropy expects N×C logits, got {:?}",
                lv.shape()
            )));
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        let dense = match targets {
            Targets::Classes(labels) => {
                if labels.len() != n {
                    return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
                }
                let mut t = Tensor::zeros(vec![n, c])?;
                for (r, &l) in labels.iter().enumerate() {
                    if l >= c {
                        return Err(Error::invalid(format!("class index {l} out of range for {c} classes")));
                    }
                    t.data_mut()[r * c + l] = T::one();
                }
                t
            }
            Targets::Distribution(t) => {
                t.expect_shape(&[n, c])?;
                t.clone()
            }
        };
        let (loss, probs) = kernels::cross_entropy_rows(lv, &dense, temperature)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: dense,
                temperature,
            },
            &[logits],
        ))
    }

    /// `Σ kᵢ·xᵢ` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        self.check_live()?;
        let (first, _) = terms
            .first()
            .ok_or_else(|| Error::shape("weighted sum of zero terms"))?;
        let mut acc = self.value(*first).zeros_like();
        for &(v, k) in terms {
            let t = self.value(v);
            acc.expect_shape(t.shape())?;
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += k * x;
            }
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(acc, Op::WeightedSum { terms: terms.to_vec() }, &vars))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (av, bv) = (self.value(a), self.value(b));
        av.expect_shape(bv.shape())?;
        let y = Tensor::new(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
        )?;
        Ok(self.push(y, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, &[x]))
    }

    /// Propagates `∂loss/∂·` to every leaf. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(shapes[loss.0].clone(), T::one())?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }

        Ok(Gradients {
            by_var: grads,
            shapes,
            params: self.params.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let cg = kernels::conv3d_backward_batch(
                    self.value(*x),
                    self.value(*w),
                    self.value(*b),
                    g,
                    *geom,
                    self.needs(*x),
                    self.par,
                )?;
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx)?;
                }
                self.accumulate(grads, *w, cg.dw)?;
                self.accumulate(grads, *b, cg.db)?;
            }
            Op::BatchNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = kernels::batch_norm_backward(g, self.value(*gamma), saved)?;
                self.accumulate(grads, *x, dx)?;
                self.accumulate(grads, *gamma, dg)?;
                self.accumulate(grads, *beta, db)?;
            }
            Op::Relu { x } => {
                let y = &node.value;
                let dx = Tensor::new(
                    y.shape().to_vec(),
                    y.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&o, &d)| if o > T::zero() { d } else { T::zero() })
                        .collect(),
                )?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::Linear { x, w, b } => {
                let lg = kernels::linear_backward(self.value(*x), self.value(*w), self.value(*b), g)?;
                self.accumulate(grads, *x, lg.dx)?;
                self.accumulate(grads, *w, lg.dw)?;
                self.accumulate(grads, *b, lg.db)?;
            }
            Op::Reshape { x } => {
                let dx = g.clone().reshape(self.value(*x).shape().to_vec())?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::NarrowRows { x, start } => {
                let xv = self.value(*x);
                let row = xv.len() / xv.shape()[0];
                let mut dx = xv.zeros_like();
                dx.data_mut()[start * row..start * row + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx)?;
            }
            Op::ConcatRows { xs } => {
                let mut off = 0;
                for &v in xs {
                    let t = self.value(v);
                    let part = Tensor::new(t.shape().to_vec(), g.data()[off..off + t.len()].to_vec())?;
                    off += t.len();
                    self.accumulate(grads, v, part)?;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, c) = (xv.shape()[0], xv.shape()[1]);
                let len = g.shape()[1];
                let mut dx = xv.zeros_like();
                for r in 0..n {
                    dx.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::Lstm {
                x,
                state,
                w_ih,
                w_hh,
                b,
                saved,
            } => {
                let lg = kernels::lstm_cell_backward(
                    self.value(*x),
                    state.map(|s| self.value(s)),
                    self.value(*w_ih),
                    self.value(*w_hh),
                    self.value(*b),
                    saved,
                    g,
                )?;
                self.accumulate(grads, *x, lg.dx)?;
                if let Some(s) = state {
                    self.accumulate(grads, *s, lg.dstate)?;
                }
                self.accumulate(grads, *w_ih, lg.dw_ih)?;
                self.accumulate(grads, *w_hh, lg.dw_hh)?;
                self.accumulate(grads, *b, lg.dbias)?;
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                temperature,
            } => {
                let n = probs.shape()[0];
                let scale = g.data()[0] / (*temperature * T::lit(n as f64));
                let dl = Tensor::new(
                    probs.shape().to_vec(),
                    probs
                        .data()
                        .iter()
                        .zip(targets.data())
                        .map(|(&p, &t)| (p - t) * scale)
                        .collect(),
                )?;
                self.accumulate(grads, *logits, dl)?;
            }
            Op::WeightedSum { terms } => {
                for &(v, k) in terms {
                    self.accumulate(grads, v, g.map(|d| d * k))?;
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect(),
                )?;
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect(),
                )?;
                self.accumulate(grads, *a, da)?;
                self.accumulate(grads, *b, db)?;
            }
            Op::Sum { x } => {
                let dx = Tensor::full(self.value(*x).shape().to_vec(), g.data()[0])?;
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param("x", Tensor::from_vec(vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("x").unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn unused_param_gets_zeros() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        tape.param("unused", Tensor::zeros(vec![2, 3]).unwrap());
        let loss = tape.sum(a).unwrap();
        let g = tape.backward(loss).unwrap();
        let u = g.param("unused").unwrap();
        assert_eq!(u.shape(), &[2, 3]);
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_and_reuse_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        assert!(tape.backward(a).is_err());
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        assert!(tape.relu(a).is_err());
    }

    #[test]
    fn shared_operand_accumulates() {
        // loss = sum(a) + sum(a·a) → ∂/∂a = 1 + 2a
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::from_vec(vec![0.5, -2.0]).unwrap());
        let s1 = tape.sum(a).unwrap();
        let sq = tape.mul(a, a).unwrap();
        let s2 = tape.sum(sq).unwrap();
        let loss = tape.weighted_sum(&[(s1, 1.0), (s2, 1.0)]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("a").unwrap().data(), &[2.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient_work() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
        let w = tape.param("w", Tensor::from_vec(vec![3.0, 4.0]).unwrap());
        let p = tape.mul(x, w).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[1.0, 2.0]);
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }
}
