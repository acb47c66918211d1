//! Reverse-mode differentiation over a fixed set of tensor ops.
//!
//! Every op appends a node to the [`Tape`]; node indices are therefore a
//! topological order and [`Tape::backward`] walks them in reverse.

use std::fmt;

use super::conv::{self, ConvGeom};
use super::gemm::sgemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient for each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    L2Normalize {
        input: Var,
        norms: Vec<f32>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Dot(Var, Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Select {
        input: Var,
        index: usize,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input (parameter or probed activation).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var], what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D convolution: `x` [n, c, h, w], `weight` [o, c, k, k], `bias` [o].
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::dim(format!("conv2d: input {xs:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("conv2d: bias {:?} for {} filters", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| Error::dim(format!("conv2d: kernel {} does not fit input {xs:?}", ws[2])))?;
        let out = conv::conv2d_forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        );
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(
            out,
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
            },
            &parents,
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x], "relu")
    }

    /// Non-overlapping max pooling over the last two axes of an NCHW tensor.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::dim(format!("max_pool2d({size}) on {s:?}")));
        }
        if size == 1 {
            return Ok(x);
        }
        let (out, argmax) = conv::max_pool_forward(self.value(x), size);
        self.push(out, Op::MaxPool2d { input: x, argmax }, &[x], "max_pool2d")
    }

    /// [n, c, h, w] -> [n, c]
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("global_avg_pool on {s:?}")));
        }
        let hw = s[2] * s[3];
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        self.push(out, Op::GlobalAvgPool(x), &[x], "global_avg_pool")
    }

    /// `x` [n, in] times `weight` [out, in] transposed, plus `bias` [out].
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(weight));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [m] {
                return Err(Error::dim(format!("linear: bias {:?} for {m} outputs", self.shape(b))));
            }
        }
        let mut out = Tensor::zeros(&[n, m]);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        sgemm(n, k, m, 1.0, self.value(x).data(), false, self.value(weight).data(), true, 1.0, out.data_mut());
        let mut parents = vec![x, weight];
        parents.extend(bias);
        self.push(out, Op::Linear { input: x, weight, bias }, &parents, "linear")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::dim("softmax of a scalar"))?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(width) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(x), &[x], "softmax")
    }

    /// Unit Euclidean norm along the last axis. Zero rows map to zero rows.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::dim("l2_normalize of a scalar"))?;
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(t.len() / width.max(1));
        for row in out.data_mut().chunks_mut(width) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                log::warn!("l2_normalize: zero vector left unnormalized");
            }
            norms.push(norm);
        }
        self.push(out, Op::L2Normalize { input: x, norms }, &[x], "l2_normalize")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x += y);
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(self.value(b).data()).for_each(|(x, y)| *x *= y);
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor), &[x], "scale")
    }

    /// Sum of the elementwise product, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot")?;
        let s = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b], "dot")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f32::ln);
        self.push(out, Op::Log(x), &[x], "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f32::exp);
        self.push(out, Op::Exp(x), &[x], "exp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let s = t.sum() / t.len() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// The element at flat (row-major) `index`, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| Error::dim(format!("select index {index} out of {:?}", self.shape(x))))?;
        self.push(Tensor::scalar(v), Op::Select { input: x, index }, &[x], "select")
    }

    /// Record a caller-computed op.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            inputs,
            name,
        )
    }

    /// Fingerprint of every piecewise-linear branch taken in the forward
    /// pass (ReLU signs, max-pool winners). Finite-difference checks use it to
    /// detect a perturbation that crossed a kink.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => pattern.extend(self.value(*x).data().iter().map(|&v| (v > 0.0) as u32)),
                Op::MaxPool2d { argmax, .. } => pattern.extend_from_slice(argmax),
                _ => {}
            }
        }
        pattern
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    g,
                    *geom,
                    self.needs(*input),
                );
                if let Some(dx) = cg.input {
                    acc(*input, dx);
                }
                acc(*weight, cg.weight);
                if let Some(b) = bias {
                    acc(*b, cg.bias);
                }
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                dx.data_mut()
                    .iter_mut()
                    .zip(self.value(*x).data())
                    .for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                acc(*x, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                let d = dx.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src as usize] += gv;
                }
                acc(*input, dx);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut dx = Tensor::zeros(s);
                for (chunk, &gv) in dx.data_mut().chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv / hw as f32);
                }
                acc(*x, dx);
            }
            Op::Linear { input, weight, bias } => {
                let (xs, ws) = (self.shape(*input), self.shape(*weight));
                let (n, k, m) = (xs[0], xs[1], ws[0]);
                if self.needs(*input) {
                    let mut dx = Tensor::zeros(xs);
                    sgemm(n, m, k, 1.0, g.data(), false, self.value(*weight).data(), false, 0.0, dx.data_mut());
                    acc(*input, dx);
                }
                if self.needs(*weight) {
                    let mut dw = Tensor::zeros(ws);
                    sgemm(m, n, k, 1.0, g.data(), true, self.value(*input).data(), false, 0.0, dw.data_mut());
                    acc(*weight, dw);
                }
                if let Some(b) = bias {
                    let mut db = Tensor::zeros(&[m]);
                    for row in g.data().chunks(m) {
                        db.data_mut().iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(*b, db);
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let width = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for ((d, yr), gr) in dx
                    .data_mut()
                    .chunks_mut(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                {
                    let inner: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner);
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { input, norms } => {
                let y = &node.value;
                let width = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                for (((d, yr), gr), &norm) in dx
                    .data_mut()
                    .chunks_mut(width)
                    .zip(y.data().chunks(width))
                    .zip(g.data().chunks(width))
                    .zip(norms)
                {
                    if norm == 0.0 {
                        continue;
                    }
                    let inner: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.iter_mut().zip(yr).zip(gr) {
                        *dv = (gv - yv * inner) / norm;
                    }
                }
                acc(*input, dx);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let mut da = g.clone();
                da.data_mut().iter_mut().zip(self.value(*b).data()).for_each(|(d, v)| *d *= v);
                let mut db = g.clone();
                db.data_mut().iter_mut().zip(self.value(*a).data()).for_each(|(d, v)| *d *= v);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::Dot(a, b) => {
                let gv = g.data()[0];
                acc(*a, self.value(*b).map(|v| v * gv));
                acc(*b, self.value(*a).map(|v| v * gv));
            }
            Op::Log(x) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(self.value(*x).data()).for_each(|(d, v)| *d /= v);
                acc(*x, dx);
            }
            Op::Exp(x) => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(node.value.data()).for_each(|(d, y)| *d *= y);
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), g.data()[0])),
            Op::Mean(x) => {
                let s = self.shape(*x);
                let n = self.value(*x).len() as f32;
                acc(*x, Tensor::full(s, g.data()[0] / n));
            }
            Op::Select { input, index } => {
                let mut dx = Tensor::zeros(self.shape(*input));
                dx.data_mut()[*index] = g.data()[0];
                acc(*input, dx);
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                for (v, grad) in inputs.iter().zip(op.backward(&values, &node.value, g)) {
                    acc(*v, grad);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` is not on a path to the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}
