//! Eager reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are
//! appended in evaluation order, so reverse insertion order is a valid
//! topological order for the backward sweep. Graphs are meant to be built
//! fresh for each forward pass and dropped afterwards.
//!
//! Subgradient conventions: `relu` and `abs` both use 0 at exactly 0.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(0);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: usize,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Sigmoid cross-entropy, averaged over batch and classes.
    MultiLabel,
    /// Softmax cross-entropy, averaged over the batch.
    SingleLabel,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    ChannelBias { input: Var, bias: Var },
    Relu(Var),
    Abs(Var),
    AvgPool { input: Var, factor: usize },
    Gap(Var),
    Linear { input: Var, weight: Var, bias: Var },
    ClassMap { features: Var, weight: Var, class: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Sum(Var),
    Select { input: Var, index: usize },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Tensor, mode: LossMode },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: usize,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.graph, self.id, "variable used with a foreign graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Leaf whose gradient is tracked (parameters, the image being climbed).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf treated as a constant by the backward sweep.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernel));
        let geom = ConvGeometry::new(x.shape(), k.shape(), stride, padding)?;
        let out = kernels::conv2d_forward(x.data(), k.data(), &geom);
        let value = Tensor::new(geom.out_shape().to_vec(), out)?;
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(Op::Conv2d { input, kernel, geom }, value, rg))
    }

    /// Adds `bias[c]` to every pixel of channel `c`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let (_, c, h, w) = x.dims4()?;
        if b.shape() != [c] {
            return Err(Error::shape("channel_bias", x.shape(), b.shape()));
        }
        let plane = h * w;
        let mut value = x.clone();
        for (i, chunk) in value.data_mut().chunks_exact_mut(plane).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(Op::ChannelBias { input, bias }, value, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(0.0));
        let rg = self.needs(&[input]);
        self.push(Op::Relu(input), value, rg)
    }

    pub fn abs(&mut self, input: Var) -> Var {
        let value = self.value(input).map(f64::abs);
        let rg = self.needs(&[input]);
        self.push(Op::Abs(input), value, rg)
    }

    pub fn avg_pool(&mut self, input: Var, factor: usize) -> Result<Var> {
        let value = kernels::avg_pool_forward(self.value(input), factor)?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::AvgPool { input, factor }, value, rg))
    }

    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let value = kernels::gap_forward(self.value(input))?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Gap(input), value, rg))
    }

    /// `input [B, I] · weightᵀ [I, K] + bias [K]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (&[batch, i], &[k, wi]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        };
        if i != wi || b.shape() != [k] {
            return Err(Error::shape("linear", x.shape(), w.shape()));
        }
        let mut out = vec![0.0; batch * k];
        for r in 0..batch {
            let row = &x.data()[r * i..(r + 1) * i];
            for c in 0..k {
                let wr = &w.data()[c * i..(c + 1) * i];
                out[r * k + c] = b.data()[c] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![batch, k], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Op::Linear { input, weight, bias }, value, rg))
    }

    /// Per-pixel dot product of `features [B, C, H, W]` with row `class` of
    /// `weight [K, C]`, giving `[B, H, W]`.
    pub fn class_map(&mut self, features: Var, weight: Var, class: usize) -> Result<Var> {
        let (f, w) = (self.value(features), self.value(weight));
        let (b, c, h, wd) = f.dims4()?;
        let &[k, wc] = w.shape() else {
            return Err(Error::shape("class_map", f.shape(), w.shape()));
        };
        if wc != c {
            return Err(Error::shape("class_map", f.shape(), w.shape()));
        }
        if class >= k {
            return Err(Error::invalid(
                "class_map",
                format!("class {class} out of range for {k} classes"),
            ));
        }
        let plane = h * wd;
        let wrow = &w.data()[class * c..(class + 1) * c];
        let mut out = vec![0.0; b * plane];
        for bi in 0..b {
            let dst = &mut out[bi * plane..(bi + 1) * plane];
            for (ch, &wv) in wrow.iter().enumerate() {
                let src = &f.data()[(bi * c + ch) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
        let value = Tensor::new(vec![b, h, wd], out)?;
        let rg = self.needs(&[features, weight]);
        Ok(self.push(Op::ClassMap { features, weight, class }, value, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(name, x.shape(), y.shape()));
        }
        x.zip_map(y, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// `scale * input + shift`, with both coefficients constant.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(input).map(|v| scale * v + shift);
        let rg = self.needs(&[input]);
        self.push(Op::Affine { input, scale }, value, rg)
    }

    pub fn scale(&mut self, input: Var, scale: f64) -> Var {
        self.affine(input, scale, 0.0)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.needs(&[input]);
        self.push(Op::Sum(input), value, rg)
    }

    /// Scalar holding the element at flat position `index`.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input);
        let v = *x.data().get(index).ok_or_else(|| {
            Error::invalid("select", format!("index {index} out of range for {:?}", x.shape()))
        })?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Select { input, index }, Tensor::scalar(v), rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(Op::Reshape(input), value, rg))
    }

    /// Mean cross-entropy of `logits [B, K]` against constant `targets [B, K]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor, mode: LossMode) -> Result<Var> {
        let z = self.value(logits);
        let &[batch, k] = z.shape() else {
            return Err(Error::shape("cross_entropy", z.shape(), targets.shape()));
        };
        if targets.shape() != z.shape() {
            return Err(Error::shape("cross_entropy", z.shape(), targets.shape()));
        }
        let loss = match mode {
            LossMode::MultiLabel => {
                let total: f64 = z
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
                    .sum();
                total / (batch * k) as f64
            }
            LossMode::SingleLabel => {
                let mut total = 0.0;
                for r in 0..batch {
                    let row = &z.data()[r * k..(r + 1) * k];
                    let t = &targets.data()[r * k..(r + 1) * k];
                    let lse = log_sum_exp(row);
                    total += t.iter().zip(row).map(|(t, z)| t * (lse - z)).sum::<f64>();
                }
                total / batch as f64
            }
        };
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.clone(),
                mode,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.node(v).requires_grad {
                return Ok(());
            }
            match &mut grads[v.index] {
                Some(existing) => existing.axpy(1.0, &t)?,
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                if self.node(*input).requires_grad {
                    let gi = kernels::conv2d_backward_input(g.data(), k.data(), geom);
                    acc(*input, Tensor::new(x.shape().to_vec(), gi)?)?;
                }
                if self.node(*kernel).requires_grad {
                    let gk = kernels::conv2d_backward_kernel(g.data(), x.data(), geom);
                    acc(*kernel, Tensor::new(k.shape().to_vec(), gk)?)?;
                }
            }
            Op::ChannelBias { input, bias } => {
                acc(*input, g.clone())?;
                if self.node(*bias).requires_grad {
                    let (_, c, h, w) = g.dims4()?;
                    let mut gb = vec![0.0; c];
                    for (i, chunk) in g.data().chunks_exact(h * w).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, Tensor::new(vec![c], gb)?)?;
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                acc(*input, g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })?)?;
            }
            Op::Abs(input) => {
                let x = self.value(*input);
                let sign = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
                acc(*input, g.zip_map(x, |g, x| g * sign(x))?)?;
            }
            Op::AvgPool { input, factor } => {
                let shape = self.value(*input).shape().to_vec();
                acc(*input, kernels::avg_pool_backward(g, &shape, *factor))?;
            }
            Op::Gap(input) => {
                let x = self.value(*input);
                let (b, c, h, w) = x.dims4()?;
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let gi = Tensor::from_fn(&[b, c, h, w], |i| g.data()[i / plane] * inv);
                acc(*input, gi)?;
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (batch, i) = (x.shape()[0], x.shape()[1]);
                let k = w.shape()[0];
                let gd = g.data();
                if self.node(*input).requires_grad {
                    let mut gx = vec![0.0; batch * i];
                    for r in 0..batch {
                        for c in 0..k {
                            let gv = gd[r * k + c];
                            let wr = &w.data()[c * i..(c + 1) * i];
                            for (d, &wv) in gx[r * i..(r + 1) * i].iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                        }
                    }
                    acc(*input, Tensor::new(vec![batch, i], gx)?)?;
                }
                if self.node(*weight).requires_grad {
                    let mut gw = vec![0.0; k * i];
                    for r in 0..batch {
                        let row = &x.data()[r * i..(r + 1) * i];
                        for c in 0..k {
                            let gv = gd[r * k + c];
                            for (d, &xv) in gw[c * i..(c + 1) * i].iter_mut().zip(row) {
                                *d += gv * xv;
                            }
                        }
                    }
                    acc(*weight, Tensor::new(vec![k, i], gw)?)?;
                }
                if self.node(*bias).requires_grad {
                    let mut gb = vec![0.0; k];
                    for r in 0..batch {
                        for c in 0..k {
                            gb[c] += gd[r * k + c];
                        }
                    }
                    acc(*bias, Tensor::new(vec![k], gb)?)?;
                }
            }
            Op::ClassMap { features, weight, class } => {
                let (f, w) = (self.value(*features), self.value(*weight));
                let (b, c, h, wd) = f.dims4()?;
                let plane = h * wd;
                if self.node(*features).requires_grad {
                    let wrow = &w.data()[class * c..(class + 1) * c];
                    let gf = Tensor::from_fn(f.shape(), |idx| {
                        let bi = idx / (c * plane);
                        let ch = (idx / plane) % c;
                        wrow[ch] * g.data()[bi * plane + idx % plane]
                    });
                    acc(*features, gf)?;
                }
                if self.node(*weight).requires_grad {
                    let mut gw = Tensor::zeros(w.shape());
                    for bi in 0..b {
                        let gp = &g.data()[bi * plane..(bi + 1) * plane];
                        for ch in 0..c {
                            let src = &f.data()[(bi * c + ch) * plane..][..plane];
                            gw.data_mut()[class * c + ch] +=
                                src.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    acc(*weight, gw)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.node(*a).requires_grad {
                    acc(*a, g.zip_map(y, |g, y| g * y)?)?;
                }
                if self.node(*b).requires_grad {
                    acc(*b, g.zip_map(x, |g, x| g * x)?)?;
                }
            }
            Op::Affine { input, scale } => acc(*input, g.map(|v| v * scale))?,
            Op::Sum(input) => {
                let shape = self.value(*input).shape().to_vec();
                acc(*input, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::Select { input, index } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                gi.data_mut()[*index] = g.data()[0];
                acc(*input, gi)?;
            }
            Op::Reshape(input) => {
                let shape = self.value(*input).shape().to_vec();
                acc(*input, g.clone().reshape(&shape)?)?;
            }
            Op::CrossEntropy { logits, targets, mode } => {
                let z = self.value(*logits);
                let (batch, k) = (z.shape()[0], z.shape()[1]);
                let gl = g.data()[0];
                let gz = match mode {
                    LossMode::MultiLabel => {
                        let n = (batch * k) as f64;
                        z.zip_map(targets, |z, t| gl * (sigmoid(z) - t) / n)?
                    }
                    LossMode::SingleLabel => {
                        let mut out = vec![0.0; batch * k];
                        for r in 0..batch {
                            let row = &z.data()[r * k..(r + 1) * k];
                            let t = &targets.data()[r * k..(r + 1) * k];
                            let mass: f64 = t.iter().sum();
                            let lse = log_sum_exp(row);
                            for c in 0..k {
                                out[r * k + c] = gl * ((row[c] - lse).exp() * mass - t[c]) / batch as f64;
                            }
                        }
                        Tensor::new(vec![batch, k], out)?
                    }
                };
                acc(*logits, gz)?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    graph: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, or [`Error::NotInGraph`] when the loss
    /// does not depend on it through tracked operations.
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        self.get(v).ok_or(Error::NotInGraph)
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor> {
        if v.graph != self.graph {
            return Err(Error::NotInGraph);
        }
        self.grads
            .get_mut(v.index)
            .and_then(Option::take)
            .ok_or(Error::NotInGraph)
    }
}

/// `∂loss/∂image` for a scalar loss built on `graph`.
pub fn input_gradient(graph: &Graph, loss: Var, image: Var) -> Result<Tensor> {
    if image.graph != graph.id || loss.graph != graph.id {
        return Err(Error::NotInGraph);
    }
    let mut grads = graph.backward(loss)?;
    grads.take(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn finite_diff(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let scale = a.abs_max().max(b.abs_max()).max(1e-8);
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let loss = g.sum(x);
        let grad = input_gradient(&g, loss, x).unwrap();
        assert!(grad.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn gradient_of_square_is_twice_value() {
        let mut g = Graph::new();
        let v = Tensor::new(vec![4], vec![1.5, -2.0, 0.0, 3.25]).unwrap();
        let x = g.variable(v.clone());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grad = input_gradient(&g, loss, x).unwrap();
        assert_eq!(grad, v.map(|v| 2.0 * v));
    }

    #[test]
    fn untracked_image_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::ones(&[3]));
        let y = g.variable(Tensor::ones(&[3]));
        let loss = g.sum(x);
        assert!(matches!(input_gradient(&g, loss, y), Err(Error::NotInGraph)));

        let mut other = Graph::new();
        let z = other.variable(Tensor::ones(&[3]));
        assert!(matches!(input_gradient(&g, loss, z), Err(Error::NotInGraph)));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        let loss = g.sum(r);
        let grad = input_gradient(&g, loss, x).unwrap();
        assert_eq!(grad.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_kink_has_zero_subgradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = g.abs(x);
        let loss = g.sum(r);
        let grad = input_gradient(&g, loss, x).unwrap();
        assert_eq!(grad.data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn conv_gap_linear_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let image = random(&[1, 2, 6, 6], &mut rng);
        let k1 = random(&[3, 2, 3, 3], &mut rng);
        let b1 = random(&[3], &mut rng);
        let k2 = random(&[4, 3, 3, 3], &mut rng);
        let w = random(&[2, 4], &mut rng);
        let b = random(&[2], &mut rng);

        let net = |x: &Tensor| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let k1v = g.constant(k1.clone());
            let b1v = g.constant(b1.clone());
            let k2v = g.constant(k2.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(b.clone());
            let h = g.conv2d(xv, k1v, 1, 1).unwrap();
            let h = g.channel_bias(h, b1v).unwrap();
            let h = g.relu(h);
            let h = g.avg_pool(h, 2).unwrap();
            let h = g.conv2d(h, k2v, 1, 1).unwrap();
            let h = g.relu(h);
            let p = g.gap(h).unwrap();
            let y = g.linear(p, wv, bv).unwrap();
            let y0 = g.select(y, 0).unwrap();
            let y1 = g.select(y, 1).unwrap();
            let y1 = g.scale(y1, 0.5);
            let loss = g.sub(y0, y1).unwrap();
            (g, xv, loss)
        };

        let (g, xv, loss) = net(&image);
        let analytic = input_gradient(&g, loss, xv).unwrap();
        let numeric = finite_diff(&image, 1e-6, |x| {
            let (g, _, l) = net(x);
            g.value(l).data()[0]
        });
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let image = random(&[2, 1, 4, 4], &mut rng);
        let k = random(&[2, 1, 3, 3], &mut rng);
        let kb = random(&[2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let b = random(&[3], &mut rng);
        let targets = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();

        for mode in [LossMode::MultiLabel, LossMode::SingleLabel] {
            let targets = match mode {
                LossMode::MultiLabel => targets.clone(),
                LossMode::SingleLabel => {
                    Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap()
                }
            };
            let build = |params: [&Tensor; 4]| -> (Graph, [Var; 4], Var) {
                let mut g = Graph::new();
                let x = g.constant(image.clone());
                let vars = params.map(|p| g.variable(p.clone()));
                let h = g.conv2d(x, vars[0], 1, 1).unwrap();
                let h = g.channel_bias(h, vars[1]).unwrap();
                let h = g.relu(h);
                let p = g.gap(h).unwrap();
                let y = g.linear(p, vars[2], vars[3]).unwrap();
                let loss = g.cross_entropy(y, &targets, mode).unwrap();
                (g, vars, loss)
            };
            let base = [&k, &kb, &w, &b];
            let (g, vars, loss) = build(base);
            let grads = g.backward(loss).unwrap();
            for slot in 0..4 {
                let numeric = finite_diff(base[slot], 1e-6, |p| {
                    let mut params = base;
                    params[slot] = p;
                    let (g, _, l) = build(params);
                    g.value(l).data()[0]
                });
                let analytic = grads.wrt(vars[slot]).unwrap();
                assert!(max_rel_err(analytic, &numeric) < 1e-5, "{mode:?} slot {slot}");
            }
        }
    }

    #[test]
    fn class_map_and_abs_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let feats = random(&[1, 3, 4, 4], &mut rng);
        let w = random(&[2, 3], &mut rng);
        let reference = random(&[1, 4, 4], &mut rng);
        let mask = Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let f = |x: &Tensor| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.constant(w.clone());
            let r = g.constant(reference.clone());
            let m = g.constant(mask.clone());
            let cam = g.class_map(xv, wv, 1).unwrap();
            let cam = g.relu(cam);
            let cam = g.scale(cam, 0.7);
            let d = g.sub(cam, r).unwrap();
            let d = g.abs(d);
            let d = g.mul(d, m).unwrap();
            let l = g.sum(d);
            (g, xv, l)
        };
        let (g, xv, l) = f(&feats);
        let analytic = input_gradient(&g, l, xv).unwrap();
        let numeric = finite_diff(&feats, 1e-6, |x| {
            let (g, _, l) = f(x);
            g.value(l).data()[0]
        });
        assert!(max_rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 2, 8, 8], &mut rng);
        let k = random(&[4, 2, 3, 3], &mut rng);
        let run = || {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let kv = g.constant(k.clone());
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(), run());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
