//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order; since inputs always
//! precede their consumers, a single reverse sweep over the tape is a valid
//! topological order for backpropagation.
//!
//! The operation set is deliberately closed (see [`Op`]): adding a new
//! primitive means adding a variant here together with its adjoint rule.

use super::kernels;
use super::{NumericsError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Sigmoid,
    Log,
    /// `log σ(x)`, evaluated without overflow.
    LogSigmoid,
    Recip,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    /// Blocks the adjoint of its input.
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[m,n] + [n]` broadcast over rows.
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    /// `[m,n] -> [m]`, sum of squares per row.
    RowSqNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracks_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracks_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracks_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks_grad
    }

    /// Inserts a tensor; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let tracks = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracks)
    }

    /// Inserts a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Value-transparent barrier: the output equals `x` bit for bit, but no
    /// gradient flows back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone().with_requires_grad(false);
        self.push(value, Op::StopGradient, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(
            sa == sb || (self.value(a).len() == 1 && self.value(b).len() == 1),
            "{op}: shape mismatch {sa:?} vs {sb:?}"
        );
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let tracks = self.tracks(a) || self.tracks(b);
        self.push(Tensor::new(shape, data).expect("shape"), op, tracks)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("add", a, b);
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("sub", a, b);
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape("mul", a, b);
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("shape");
        let tracks = self.tracks(a);
        self.push(value, Op::Scale(a, c), tracks)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!(
            xv.cols(),
            bv.len(),
            "add_row_bias: {:?} vs {:?}",
            xv.shape(),
            bv.shape()
        );
        let mut data = xv.data().to_vec();
        kernels::add_row_bias(&mut data, bv.data());
        let value = Tensor::new(xv.shape().to_vec(), data).expect("shape");
        let tracks = self.tracks(x) || self.tracks(bias);
        self.push(value, Op::AddRowBias(x, bias), tracks)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[0],
            "matmul: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let data = kernels::matmul(av.data(), bv.data(), m, k, n);
        let tracks = self.tracks(a) || self.tracks(b);
        self.push(Tensor::new(vec![m, n], data).expect("shape"), Op::MatMul(a, b), tracks)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => kernels::silu,
            Unary::Sigmoid => kernels::sigmoid,
            Unary::Log => f64::ln,
            Unary::LogSigmoid => kernels::log_sigmoid,
            Unary::Recip => f64::recip,
        };
        let t = self.value(a);
        let value =
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("shape");
        let tracks = self.tracks(a);
        self.push(value, Op::Unary(a, kind), tracks)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::LogSigmoid)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracks = self.tracks(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracks)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracks = self.tracks(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracks)
    }

    pub fn sq_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|x| x * x).sum();
        let tracks = self.tracks(a);
        self.push(Tensor::scalar(s), Op::SqNorm(a), tracks)
    }

    pub fn row_sq_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let data = kernels::row_sq_norm(t.data(), n);
        let tracks = self.tracks(a);
        self.push(Tensor::new(vec![m], data).expect("shape"), Op::RowSqNorm(a), tracks)
    }

    /// Runs the backward sweep from a scalar `loss`, returning one adjoint
    /// buffer per node (`None` where no gradient reached).
    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracks_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::StopGradient => {}
                Op::Add(a, b) => {
                    for (v, sign) in [(a, 1.0), (b, 1.0)] {
                        if self.tracks(v) {
                            let n = self.value(v).len();
                            let buf = acc(&mut adj[v.0], n);
                            broadcast_acc(buf, &g, sign);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(a, 1.0), (b, -1.0)] {
                        if self.tracks(v) {
                            let n = self.value(v).len();
                            let buf = acc(&mut adj[v.0], n);
                            broadcast_acc(buf, &g, sign);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(a, b), (b, a)] {
                        if self.tracks(v) {
                            let ov = self.value(other).data();
                            let n = self.value(v).len();
                            let buf = acc(&mut adj[v.0], n);
                            for i in 0..n {
                                buf[i] += g[i % g.len()] * ov[i % ov.len()];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.tracks(a) {
                        let n = self.value(a).len();
                        let buf = acc(&mut adj[a.0], n);
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += c * gi;
                        }
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.tracks(x) {
                        let n = self.value(x).len();
                        let buf = acc(&mut adj[x.0], n);
                        for (b, gi) in buf.iter_mut().zip(&g) {
                            *b += gi;
                        }
                    }
                    if self.tracks(bias) {
                        let n = self.value(bias).len();
                        let buf = acc(&mut adj[bias.0], n);
                        for row in g.chunks_exact(n) {
                            for (b, gi) in buf.iter_mut().zip(row) {
                                *b += gi;
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    if self.tracks(a) {
                        // dA = G · Bᵀ
                        let buf = acc(&mut adj[a.0], m * k);
                        kernels::matmul_a_bt_acc(&g, bv.data(), buf, m, n, k);
                    }
                    if self.tracks(b) {
                        // dB = Aᵀ · G
                        let buf = acc(&mut adj[b.0], k * n);
                        kernels::matmul_at_b_acc(av.data(), &g, buf, m, k, n);
                    }
                }
                Op::Unary(a, kind) => {
                    if self.tracks(a) {
                        let x = self.value(a).data();
                        let y = node.value.data();
                        let buf = acc(&mut adj[a.0], x.len());
                        for i in 0..x.len() {
                            let d = match kind {
                                Unary::Silu => kernels::silu_grad(x[i]),
                                Unary::Sigmoid => y[i] * (1.0 - y[i]),
                                Unary::Log => 1.0 / x[i],
                                Unary::LogSigmoid => 1.0 - kernels::sigmoid(x[i]),
                                Unary::Recip => -y[i] * y[i],
                            };
                            buf[i] += g[i] * d;
                        }
                    }
                }
                Op::Sum(a) => {
                    if self.tracks(a) {
                        let n = self.value(a).len();
                        let buf = acc(&mut adj[a.0], n);
                        for b in buf.iter_mut() {
                            *b += g[0];
                        }
                    }
                }
                Op::Mean(a) => {
                    if self.tracks(a) {
                        let n = self.value(a).len();
                        let buf = acc(&mut adj[a.0], n);
                        let s = g[0] / n as f64;
                        for b in buf.iter_mut() {
                            *b += s;
                        }
                    }
                }
                Op::SqNorm(a) => {
                    if self.tracks(a) {
                        let x = self.value(a).data();
                        let buf = acc(&mut adj[a.0], x.len());
                        for (b, xi) in buf.iter_mut().zip(x) {
                            *b += 2.0 * xi * g[0];
                        }
                    }
                }
                Op::RowSqNorm(a) => {
                    if self.tracks(a) {
                        let xv = self.value(a);
                        let n = xv.cols();
                        let x = xv.data();
                        let buf = acc(&mut adj[a.0], x.len());
                        for (i, (b, xi)) in buf.iter_mut().zip(x).enumerate() {
                            *b += 2.0 * xi * g[i / n];
                        }
                    }
                }
            }
        }
        Ok(adj)
    }

    /// Gradient of the scalar `loss` with respect to each of `params`.
    ///
    /// Parameters that do not influence `loss` (or that do not require grad)
    /// receive an all-zero gradient.
    pub fn reverse_grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>, NumericsError> {
        let mut adj = self.adjoints(loss)?;
        Ok(params
            .iter()
            .map(|p| {
                let shape = self.value(*p).shape().to_vec();
                let data = adj
                    .get_mut(p.0)
                    .and_then(Option::take)
                    .filter(|_| self.tracks(*p))
                    .unwrap_or_else(|| vec![0.0; self.value(*p).len()]);
                Tensor::new(shape, data).expect("shape")
            })
            .collect())
    }

    /// Backward pass that stores gradients on every `requires_grad` leaf of
    /// the graph (zeros for leaves the loss does not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let mut adj = self.adjoints(loss)?;
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                node.value.set_grad(Some(g));
            }
        }
        Ok(())
    }
}

/// Accumulates `sign * g` into `buf`, broadcasting a scalar `g` if needed.
fn broadcast_acc(buf: &mut [f64], g: &[f64], sign: f64) {
    if g.len() == buf.len() {
        for (b, gi) in buf.iter_mut().zip(g) {
            *b += sign * gi;
        }
    } else {
        let s: f64 = g.iter().sum();
        for b in buf.iter_mut() {
            *b += sign * s;
        }
    }
}
