use std::sync::atomic::{AtomicU64, Ordering};

use super::nn;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
    },
    Relu {
        x: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AvgPool {
        x: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        k: f64,
    },
    Sum {
        x: usize,
    },
    Mean {
        x: usize,
    },
    AbsPow {
        x: usize,
        p: f64,
    },
    Diff {
        x: usize,
    },
    Index {
        x: usize,
        i: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
}

/// Record of executed operations, replayed in reverse by [`Tape::backward`].
///
/// A tape is owned by a single optimization run. Gradients accumulate across
/// repeated `backward` calls until [`Tape::zero_grad`] is called.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    pub(crate) nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as an input. Its `requires_grad` flag decides whether a
    /// gradient is kept for it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.expect(v);
        &self.nodes[v.index].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.value(v).grad()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {v:?} does not belong to tape {}",
                self.id
            )));
        }
        Ok(v.index)
    }

    fn expect(&self, v: Var) {
        assert!(
            v.tape == self.id && v.index < self.nodes.len(),
            "variable {v:?} does not belong to tape {}",
            self.id
        );
    }

    pub(crate) fn t(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub(crate) fn rg(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    fn same_shape(&self, op: &str, a: usize, b: usize) -> Result<()> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.t(a).shape(),
                self.t(b).shape()
            )));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        x: Var,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let xi = self.check(x)?;
        let rg = self.rg(xi);
        let out = Tensor::new(shape, data)?.with_requires_grad(rg);
        Ok(self.push(out, op(xi)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ai, bi)?;
        let data = self
            .t(ai)
            .data()
            .iter()
            .zip(self.t(bi).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(ai) || self.rg(bi);
        let out = Tensor::new(self.t(ai).shape().to_vec(), data)?.with_requires_grad(rg);
        Ok(self.push(out, op(ai, bi)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.t(xi);
        let data = t.data().iter().map(|v| v * k).collect();
        let shape = t.shape().to_vec();
        self.unary(x, shape, data, |x| Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let s = self.t(xi).data().iter().sum();
        self.unary(x, vec![1], vec![s], |x| Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.t(xi);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.unary(x, vec![1], vec![s], |x| Op::Mean { x })
    }

    /// Elementwise `|x|^p`. The derivative at `x == 0` is taken as 0.
    pub fn abs_pow(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(p > 0.0) {
            return Err(Error::invalid(format!("abs_pow exponent must be > 0, got {p}")));
        }
        let xi = self.check(x)?;
        let t = self.t(xi);
        let data = t.data().iter().map(|v| v.abs().powf(p)).collect();
        let shape = t.shape().to_vec();
        self.unary(x, shape, data, |x| Op::AbsPow { x, p })
    }

    /// Consecutive differences `x[i+1] - x[i]` along the last axis.
    pub fn diff(&mut self, x: Var) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.t(xi);
        let l = *t.shape().last().unwrap();
        if l < 2 {
            return Err(Error::shape(format!("diff needs last axis >= 2, got {:?}", t.shape())));
        }
        let data = t
            .data()
            .chunks_exact(l)
            .flat_map(|row| row.windows(2).map(|w| w[1] - w[0]))
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = l - 1;
        self.unary(x, shape, data, |x| Op::Diff { x })
    }

    /// Selects the element at flat index `i` as a one-element tensor.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let xi = self.check(x)?;
        let t = self.t(xi);
        let v = *t.data().get(i).ok_or_else(|| {
            Error::shape(format!("index {i} out of range for shape {:?}", t.shape()))
        })?;
        self.unary(x, vec![1], vec![v], |x| Op::Index { x, i })
    }

    /// Reverse pass from a scalar root. Every node with `requires_grad`
    /// reachable from `root` gets `d root / d node` added to its gradient.
    /// Accumulation order is fixed by recording order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ri = self.check(root)?;
        if self.t(ri).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.t(ri).shape()
            )));
        }
        if !self.rg(ri) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; ri + 1];
        adj[ri] = Some(vec![1.0]);
        for i in (0..=ri).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut acc = Accumulator { tape: self, adj };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                acc.with(*a, |d| add_into(d, g));
                acc.with(*b, |d| add_into(d, g));
            }
            Op::Sub { a, b } => {
                acc.with(*a, |d| add_into(d, g));
                acc.with(*b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.t(*a).data(), self.t(*b).data());
                acc.with(*a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc.with(*b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale { x, k } => acc.with(*x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g);
            }),
            Op::Sum { x } => acc.with(*x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => {
                let n = self.t(*x).numel() as f64;
                acc.with(*x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::AbsPow { x, p } => {
                let xv = self.t(*x).data();
                acc.with(*x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v != 0.0 {
                            *d += g * p * v.abs().powf(p - 1.0) * v.signum();
                        }
                    }
                });
            }
            Op::Diff { x } => {
                let l = *self.t(*x).shape().last().unwrap();
                acc.with(*x, |d| {
                    for (drow, grow) in d.chunks_exact_mut(l).zip(g.chunks_exact(l - 1)) {
                        for (j, gj) in grow.iter().enumerate() {
                            drow[j + 1] += gj;
                            drow[j] -= gj;
                        }
                    }
                });
            }
            Op::Index { x, i } => acc.with(*x, |d| d[*i] += g[0]),
            Op::Relu { x } => {
                let xv = self.t(*x).data();
                acc.with(*x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => nn::conv1d_backward(&mut acc, *x, *w, *b, g),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => nn::batchnorm_backward(&mut acc, *x, *gamma, *beta, xhat, inv_std, *train, g),
            Op::AvgPool { x } => nn::avg_pool_backward(&mut acc, *x, g),
            Op::Linear { x, w, b } => nn::linear_backward(&mut acc, *x, *w, *b, g),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => nn::cross_entropy_backward(&mut acc, *logits, labels, probs, g),
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

/// Adjoint buffers for one reverse pass; skips inputs without `requires_grad`.
pub(crate) struct Accumulator<'a> {
    pub(crate) tape: &'a Tape,
    adj: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    pub(crate) fn wants(&self, i: usize) -> bool {
        self.tape.rg(i)
    }

    pub(crate) fn with(&mut self, i: usize, f: impl FnOnce(&mut [f64])) {
        if !self.wants(i) {
            return;
        }
        let n = self.tape.t(i).numel();
        let buf = self.adj[i].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }
}
