//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation is evaluated eagerly when it is recorded, so the tape is
//! always in topological order and backward is a single reverse sweep.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_mismatch, Error, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here. Returns one gradient per input
/// (`None` where the input receives no gradient).
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Relu(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        s: Var,
    },
    Sum(Var),
    MulConst(Var, f64),
    Reshape(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::MulConst(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => {
                let mut v = vec![*input, *kernels];
                v.extend(bias);
                v
            }
            Op::Scale { x, s } => vec![*x, *s],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when no path reaches it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// The recorded computation of one forward pass.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
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

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::State(
                "variable was not recorded by this graph's forward pass".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            other => other
                .inputs()
                .iter()
                .any(|v| self.nodes[v.index].requires_grad),
        };
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self.id,
            index,
        }
    }

    /// Records an input tensor. It receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone().with_requires_grad(true), Op::Leaf)
    }

    #[cfg(test)]
    pub(crate) fn var_at(&self, index: usize) -> Var {
        Var {
            graph: self.id,
            index,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(kernels)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let geo = ConvGeometry::new(
            self.value(input).shape(),
            self.value(kernels).shape(),
            stride,
            padding,
        )?;
        let out = ops::conv2d(
            self.value(input),
            self.value(kernels),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geo,
            },
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let x = self.value(a);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        )?;
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let (out, argmax) = ops::max_pool2(self.value(a))?;
        Ok(self.push(out, Op::MaxPool2 { input: a, argmax }))
    }

    fn zip_same(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_mismatch(what, x.shape(), y.shape()));
        }
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `s · x` for a single-element tensor `s`; the only broadcast supported.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check(x)?;
        self.check(s)?;
        let k = self.value(s).item()?;
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| k * v).collect(),
        )?;
        Ok(self.push(out, Op::Scale { x, s }))
    }

    pub fn mul_const(&mut self, x: Var, k: f64) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let out = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|v| k * v).collect(),
        )?;
        Ok(self.push(out, Op::MulConst(x, k)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).reshape(shape)?.with_requires_grad(false);
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Records an operation whose forward value `output` was computed from
    /// `inputs` by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        Ok(self.push(
            output.with_requires_grad(false),
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, seeded with d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.graph != self.id || loss.index >= self.nodes.len() {
            return Err(Error::State(
                "backward called on a loss this graph never computed; run the forward pass first"
                    .into(),
            ));
        }
        if self.nodes[loss.index].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.index].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);
        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, dg) in self.vjp(node, &g) {
                if !self.nodes[input.index].requires_grad {
                    continue;
                }
                match &mut grads[input.index] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        // Only report gradients for tensors that asked for them.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.index].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("recorded matrix");
                let n = val(*b).shape()[1];
                let bt = ops::transpose_raw(val(*b).data(), k, n);
                let at = ops::transpose_raw(val(*a).data(), m, k);
                vec![
                    (*a, ops::gemm(g, &bt, m, n, k)),
                    (*b, ops::gemm(&at, g, k, m, n)),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().expect("recorded matrix");
                vec![(*a, ops::transpose_raw(g, c, r))]
            }
            Op::SoftmaxRows(a) => {
                let cols = node.value.shape()[1];
                vec![(*a, ops::softmax_rows_backward(node.value.data(), g, cols))]
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geo,
            } => {
                let cg = ops::conv2d_backward(geo, val(*input).data(), val(*kernels).data(), g);
                let mut out = vec![(*input, cg.input), (*kernels, cg.kernels)];
                if let Some(b) = bias {
                    out.push((*b, cg.bias));
                }
                out
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                vec![(
                    *a,
                    x.iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                vec![(*input, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect()),
                    (*b, g.iter().zip(x).map(|(gv, xv)| gv * xv).collect()),
                ]
            }
            Op::Scale { x, s } => {
                let k = val(*s).data()[0];
                let ds: f64 = g.iter().zip(val(*x).data()).map(|(gv, xv)| gv * xv).sum();
                vec![(*x, g.iter().map(|gv| k * gv).collect()), (*s, vec![ds])]
            }
            Op::MulConst(x, k) => vec![(*x, g.iter().map(|gv| k * gv).collect())],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs
                    .iter()
                    .zip(op.backward(&ins, &node.value, g))
                    .filter_map(|(v, dg)| dg.map(|d| (*v, d)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
        assert_eq!(grads.get(loss).unwrap(), &[1.0]);
    }

    #[test]
    fn unrelated_tensor_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.5).with_requires_grad(true));
        let t = g.leaf(Tensor::full(&[4], 2.0).with_requires_grad(true));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(t).is_none());
        assert_eq!(grads.get_or_zeros(t, 4), vec![0.0; 4]);
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let mut other = Graph::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        let g = Graph::new();
        assert!(matches!(g.backward(foreign), Err(Error::State(_))));
        let mut g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn mixing_graphs_is_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let x = a.leaf(Tensor::scalar(1.0));
        let y = b.leaf(Tensor::scalar(1.0));
        assert!(b.add(x, y).is_err());
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Builds `loss = Σ w ∘ op(x)` for fixed random weights `w`, and checks the
    /// analytic gradient against central differences.
    fn check_unary(shape: &[usize], seed: u64, op: impl Fn(&mut Graph, Var) -> Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let build = |x: &Tensor, g: &mut Graph| -> Result<(Var, Var)> {
            let xv = g.leaf(x.clone().with_requires_grad(true));
            let y = op(g, xv)?;
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let w = g.constant(random(g.value(y).shape(), &mut wr));
            let p = g.mul(y, w)?;
            Ok((xv, g.sum(p)?))
        };
        let mut g = Graph::new();
        let (xv, loss) = build(&x0, &mut g).unwrap();
        let analytic = g.backward(loss).unwrap().get_or_zeros(xv, x0.numel());
        let numeric = finite_difference_grad(
            |x| {
                let mut g = Graph::new();
                let (_, l) = build(x, &mut g)?;
                Ok(g.value(l).clone())
            },
            &x0,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(
                err < 1e-4 || (a - n).abs() < 1e-8,
                "analytic {a} numeric {n}"
            );
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_unary(&[3, 4], seed, |g, x| g.softmax_rows(x));
            check_unary(&[3, 4], seed, |g, x| g.transpose(x));
            check_unary(&[2, 4, 4], seed, |g, x| g.relu(x));
            check_unary(&[2, 4, 4], seed, |g, x| g.max_pool2(x));
            check_unary(&[2, 4, 4], seed, |g, x| g.reshape(x, &[2, 16]));
            check_unary(&[3, 4], seed, |g, x| {
                let t = g.transpose(x)?;
                g.matmul(x, t)
            });
            check_unary(&[2, 5, 5], seed, |g, x| {
                let mut r = ChaCha8Rng::seed_from_u64(99);
                let k = g.leaf(random(&[3, 2, 3, 3], &mut r).with_requires_grad(true));
                let b = g.leaf(random(&[3], &mut r).with_requires_grad(true));
                g.conv2d(x, k, Some(b), 2, 1)
            });
            check_unary(&[4], seed, |g, x| {
                let s = g.leaf(Tensor::scalar(0.7).with_requires_grad(true));
                let y = g.scale(x, s)?;
                let z = g.sub(y, x)?;
                g.add(z, x)
            });
        }
    }

    #[test]
    fn conv_kernel_and_scale_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 5, 5], &mut rng);
        let k0 = random(&[3, 2, 3, 3], &mut rng);
        let s0 = Tensor::scalar(0.3);
        let loss_of = |k: &Tensor, s: &Tensor, g: &mut Graph| -> Result<(Var, Var, Var)> {
            let xv = g.constant(x.clone());
            let kv = g.param(k);
            let sv = g.param(s);
            let y = g.conv2d(xv, kv, None, 1, 1)?;
            let y = g.scale(y, sv)?;
            let y2 = g.mul(y, y)?;
            Ok((kv, sv, g.sum(y2)?))
        };
        let mut g = Graph::new();
        let (kv, sv, loss) = loss_of(&k0, &s0, &mut g).unwrap();
        let grads = g.backward(loss).unwrap();
        let nk = finite_difference_grad(
            |k| {
                let mut g = Graph::new();
                let (_, _, l) = loss_of(k, &s0, &mut g)?;
                Ok(g.value(l).clone())
            },
            &k0,
            1e-5,
        )
        .unwrap();
        let ns = finite_difference_grad(
            |s| {
                let mut g = Graph::new();
                let (_, _, l) = loss_of(&k0, s, &mut g)?;
                Ok(g.value(l).clone())
            },
            &s0,
            1e-5,
        )
        .unwrap();
        for (a, n) in grads.get(kv).unwrap().iter().zip(nk.data()) {
            assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {n}");
        }
        let (a, n) = (grads.get(sv).unwrap()[0], ns.data()[0]);
        assert!((a - n).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {n}");
    }

    #[test]
    fn forward_replay_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.leaf(random(&[3, 4, 4], &mut rng));
            let k = g.leaf(random(&[2, 3, 3, 3], &mut rng));
            let y = g.conv2d(x, k, None, 1, 1).unwrap();
            let y = g.reshape(y, &[2, 16]).unwrap();
            let s = g.softmax_rows(y).unwrap();
            g.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
