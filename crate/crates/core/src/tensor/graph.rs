//! Operation tape and reverse-mode differentiation.
//!
//! A [`Graph`] owns every tensor produced during one forward pass. Ops are
//! recorded in execution order, which is a topological order by construction,
//! so the backward pass is a single reverse sweep that visits each node once.
//! Gradients accumulate into node buffers; repeated `backward` calls keep
//! accumulating until [`Graph::zero_grads`].

use super::kernels::{self, BinaryOp, ReduceOp, ResampleMode, UnaryOp};
use super::Tensor;
use crate::error::TensorError;

/// Handle to a node; only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Unary(UnaryOp, Var),
    Reduce {
        input: Var,
        op: ReduceOp,
        axes: Option<Vec<usize>>,
        keepdims: bool,
    },
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Resample {
        input: Var,
        mode: ResampleMode,
        th: usize,
        tw: usize,
    },
    Diff {
        input: Var,
        along_x: bool,
    },
    Concat(Vec<Var>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Names of every differentiable operation the graph can record; the
/// `gradcheck` command reports one line per entry.
pub const ALL_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "abs",
    "tanh",
    "square",
    "sqrt",
    "exp",
    "ln",
    "leaky_relu",
    "sum",
    "mean",
    "max",
    "matmul",
    "conv2d",
    "resample_bilinear",
    "resample_avgpool",
    "resample_nearest",
    "diff_x",
    "diff_y",
    "concat",
    "reshape",
];

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f32 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
            });
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // -- recorded operations -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::binary_forward(op, self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let value = Tensor::new(
            self.value(a).shape(),
            self.value(a).data().iter().map(|&x| x + s).collect(),
        )?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f32) -> Result<Var, TensorError> {
        let value = Tensor::new(
            self.value(a).shape(),
            self.value(a).data().iter().map(|&x| x * s).collect(),
        )?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::MulScalar(a, s))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var, TensorError> {
        let value = kernels::unary_forward(op, self.value(a))?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Unary(op, a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Tanh, a)
    }
    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Square, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryOp::Ln, a)
    }
    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Result<Var, TensorError> {
        self.unary(UnaryOp::LeakyRelu(slope), a)
    }

    pub fn reduce(
        &mut self,
        op: ReduceOp,
        a: Var,
        axes: Option<&[usize]>,
        keepdims: bool,
    ) -> Result<Var, TensorError> {
        let value = kernels::reduce_forward(op, self.value(a), axes, keepdims)?;
        let rg = self.requires_grad(a);
        self.push(
            value,
            rg,
            Op::Reduce {
                input: a,
                op,
                axes: axes.map(|s| s.to_vec()),
                keepdims,
            },
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Sum, a, None, false)
    }
    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Mean, a, None, false)
    }
    pub fn max_all(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(ReduceOp::Max, a, None, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = kernels::matmul_forward(self.value(a), self.value(b))?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(value, rg, Op::Matmul(a, b))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let value =
            kernels::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    pub fn resample(
        &mut self,
        input: Var,
        th: usize,
        tw: usize,
        mode: ResampleMode,
    ) -> Result<Var, TensorError> {
        if mode == ResampleMode::Nearest && self.requires_grad(input) {
            return Err(TensorError::NonDifferentiable {
                op: "resample_nearest",
            });
        }
        let value = kernels::resample_forward(self.value(input), th, tw, mode)?;
        let rg = self.requires_grad(input);
        self.push(
            value,
            rg,
            Op::Resample {
                input,
                mode,
                th,
                tw,
            },
        )
    }

    pub fn diff_x(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = kernels::diff_forward(self.value(input), true)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Diff { input, along_x: true })
    }

    pub fn diff_y(&mut self, input: Var) -> Result<Var, TensorError> {
        let value = kernels::diff_forward(self.value(input), false)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Diff { input, along_x: false })
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat0_forward(&tensors)?;
        let rg = parts.iter().any(|&v| self.requires_grad(v));
        self.push(value, rg, Op::Concat(parts.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.requires_grad(a);
        self.push(value, rg, Op::Reshape(a))
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Every node reachable backwards from
    /// `loss` that requires grad receives (accumulates) its gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ln = &self.nodes[loss.0];
        if ln.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: ln.value.shape().to_vec(),
            });
        }
        if !ln.requires_grad {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: "loss does not depend on any differentiable leaf".into(),
            });
        }
        let mut scratch: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = scratch[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut scratch);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => {
                    for (b, g) in buf.iter_mut().zip(&gout) {
                        *b += g;
                    }
                }
                None => node.grad = Some(gout),
            }
        }
        Ok(())
    }

    fn scratch_for<'s>(
        &self,
        scratch: &'s mut [Option<Vec<f32>>],
        v: Var,
    ) -> Option<&'s mut Vec<f32>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(scratch[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }

    fn propagate(&self, i: usize, gout: &[f32], scratch: &mut [Option<Vec<f32>>]) {
        // The op is cheap to clone (vars and params only).
        let op = match &self.nodes[i].op {
            Op::Leaf => return,
            other => other.clone(),
        };
        match op {
            Op::Leaf => {}
            Op::Binary(bop, a, b) => {
                let asn = self.value(a).shape();
                let bsn = self.value(b).shape();
                match bop {
                    BinaryOp::Add | BinaryOp::Sub => {
                        if let Some(ga) = self.scratch_for(scratch, a) {
                            for (g, &v) in ga.iter_mut().zip(gout) {
                                *g += v;
                            }
                        }
                        if self.nodes[b.0].requires_grad {
                            let sign = if bop == BinaryOp::Add { 1.0 } else { -1.0 };
                            let gb = self.scratch_for(scratch, b).unwrap();
                            kernels::reduce_grad_to_b(gout, asn, bsn, gb, |_, _| sign);
                        }
                    }
                    BinaryOp::Mul => {
                        if self.nodes[a.0].requires_grad {
                            let strides =
                                kernels::broadcast_strides("mul", asn, bsn).expect("checked");
                            let bd = self.value(b).data();
                            let ga = self.scratch_for(scratch, a).unwrap();
                            kernels::for_each_pair(asn, &strides, |ai, bi| {
                                ga[ai] += gout[ai] * bd[bi];
                            });
                        }
                        if self.nodes[b.0].requires_grad {
                            let ad = self.value(a).data();
                            let gb = self.scratch_for(scratch, b).unwrap();
                            kernels::reduce_grad_to_b(gout, asn, bsn, gb, |ai, _| ad[ai]);
                        }
                    }
                    BinaryOp::Div => {
                        let strides =
                            kernels::broadcast_strides("div", asn, bsn).expect("checked");
                        let bd = self.value(b).data();
                        if self.nodes[a.0].requires_grad {
                            let ga = self.scratch_for(scratch, a).unwrap();
                            kernels::for_each_pair(asn, &strides, |ai, bi| {
                                ga[ai] += gout[ai] / bd[bi];
                            });
                        }
                        if self.nodes[b.0].requires_grad {
                            let ad = self.value(a).data();
                            let gb = self.scratch_for(scratch, b).unwrap();
                            kernels::for_each_pair(asn, &strides, |ai, bi| {
                                gb[bi] -= gout[ai] * ad[ai] / (bd[bi] * bd[bi]);
                            });
                        }
                    }
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.scratch_for(scratch, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if let Some(ga) = self.scratch_for(scratch, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v * s;
                    }
                }
            }
            Op::Unary(uop, a) => {
                if self.nodes[a.0].requires_grad {
                    let xd = self.value(a).data();
                    let yd = self.value(Var(i)).data();
                    let ga = self.scratch_for(scratch, a).unwrap();
                    for idx in 0..xd.len() {
                        ga[idx] += gout[idx] * kernels::unary_derivative(uop, xd[idx], yd[idx]);
                    }
                }
            }
            Op::Reduce {
                input,
                op: rop,
                axes,
                keepdims,
            } => {
                if self.nodes[input.0].requires_grad {
                    let inv = self.value(input);
                    let outv = self.value(Var(i));
                    let gi = self.scratch_for(scratch, input).unwrap();
                    kernels::reduce_backward(rop, inv, outv, gout, axes.as_deref(), keepdims, gi);
                }
            }
            Op::Matmul(a, b) => {
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                if need_a || need_b {
                    // Temporaries keep the a == b case (shared operand) correct.
                    let mut ga = vec![0.0; self.value(a).numel()];
                    let mut gb = vec![0.0; self.value(b).numel()];
                    kernels::matmul_backward(
                        self.value(a),
                        self.value(b),
                        gout,
                        need_a.then_some(&mut ga[..]),
                        need_b.then_some(&mut gb[..]),
                    );
                    if need_a {
                        let s = self.scratch_for(scratch, a).unwrap();
                        for (x, g) in s.iter_mut().zip(&ga) {
                            *x += g;
                        }
                    }
                    if need_b {
                        let s = self.scratch_for(scratch, b).unwrap();
                        for (x, g) in s.iter_mut().zip(&gb) {
                            *x += g;
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                if self.nodes[input.0].requires_grad {
                    let kv = self.value(kernel);
                    let ishape = self.value(input).shape().to_vec();
                    let gi = self.scratch_for(scratch, input).unwrap();
                    kernels::conv2d_backward_input(&ishape, kv, gout, stride, padding, gi);
                }
                if self.nodes[kernel.0].requires_grad {
                    let iv = self.value(input);
                    let kshape = self.value(kernel).shape().to_vec();
                    let gk = self.scratch_for(scratch, kernel).unwrap();
                    kernels::conv2d_backward_kernel(iv, &kshape, gout, stride, padding, gk);
                }
            }
            Op::Resample {
                input,
                mode,
                th,
                tw,
            } => {
                if self.nodes[input.0].requires_grad {
                    let ishape = self.value(input).shape().to_vec();
                    let gi = self.scratch_for(scratch, input).unwrap();
                    kernels::resample_backward(&ishape, gout, th, tw, mode, gi);
                }
            }
            Op::Diff { input, along_x } => {
                if self.nodes[input.0].requires_grad {
                    let ishape = self.value(input).shape().to_vec();
                    let gi = self.scratch_for(scratch, input).unwrap();
                    kernels::diff_backward(&ishape, gout, along_x, gi);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0usize;
                for p in parts {
                    let n = self.value(p).numel();
                    if self.nodes[p.0].requires_grad {
                        let gp = self.scratch_for(scratch, p).unwrap();
                        for (g, &v) in gp.iter_mut().zip(&gout[offset..offset + n]) {
                            *g += v;
                        }
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.scratch_for(scratch, a) {
                    for (g, &v) in ga.iter_mut().zip(gout) {
                        *g += v;
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Binary(b, _, _) => b.name(),
        Op::AddScalar(_) => "add_scalar",
        Op::MulScalar(_, _) => "mul_scalar",
        Op::Unary(u, _) => u.name(),
        Op::Reduce { op, .. } => op.name(),
        Op::Matmul(_, _) => "matmul",
        Op::Conv2d { .. } => "conv2d",
        Op::Resample { mode, .. } => match mode {
            ResampleMode::Nearest => "resample_nearest",
            ResampleMode::Bilinear => "resample_bilinear",
            ResampleMode::AvgPool => "resample_avgpool",
        },
        Op::Diff { along_x: true, .. } => "diff_x",
        Op::Diff { along_x: false, .. } => "diff_y",
        Op::Concat(_) => "concat",
        Op::Reshape(_) => "reshape",
    }
}
