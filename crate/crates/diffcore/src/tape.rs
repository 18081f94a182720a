//! Define-then-run tape of primitive tensor operations.
//!
//! A [`Tape`] is built once (by calling the builder methods, each of which
//! appends a node and returns a [`Var`] handle), and can then be evaluated
//! any number of times against different input bindings. Node order is
//! insertion order, so the graph is acyclic and already topologically sorted.
//!
//! Broadcasting is limited to scalar-with-tensor for the elementwise binary
//! ops; every other pairing of shapes must match exactly.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TapeError};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations recorded on a tape.
#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Const(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    ReduceSum {
        x: Var,
        axis: Option<usize>,
    },
    ReduceMean {
        x: Var,
        axis: Option<usize>,
    },
    /// Lower Cholesky factor; only the lower triangle of the input is read.
    Cholesky(Var),
    /// Solves `L X = B` (or `Lᵀ X = B` when `transpose`), reading the lower triangle of `L`.
    SolveLower {
        l: Var,
        b: Var,
        transpose: bool,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Max(..) => "max",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::ReduceMean { .. } => "reduce_mean",
            Op::Cholesky(..) => "cholesky",
            Op::SolveLower { .. } => "solve_lower",
        }
    }

    /// Parent nodes in argument order.
    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input(_) | Op::Const(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Max(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::SolveLower { l, b, .. } => vec![*l, *b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Transpose(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Cholesky(a) => vec![*a],
            Op::Clamp { x, .. }
            | Op::Softmax { x, .. }
            | Op::Slice { x, .. }
            | Op::ReduceSum { x, .. }
            | Op::ReduceMean { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Name → tensor lookup used to bind tape inputs.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Bindings for [(&str, Tensor)] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

impl<const N: usize> Bindings for [(&str, Tensor); N] {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.as_slice().lookup(name)
    }
}

/// A recorded computation graph.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, Var>,
    outputs: BTreeMap<String, Var>,
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

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Input(_) => true,
            Op::Const(_) => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Named input; repeated calls with the same name return the same node.
    pub fn input(&mut self, name: &str) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers `var` as a named output.
    pub fn output(&mut self, name: &str, var: Var) {
        self.outputs.insert(name.to_string(), var);
    }

    pub fn output_var(&self, name: &str) -> Option<Var> {
        self.outputs.get(name).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a, k))
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Shift(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.shift(n, 1.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        self.push(Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.push(Op::Sqrt(a))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp { x, lo, hi })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        self.push(Op::Softmax { x, axis })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        self.push(Op::Concat {
            parts: parts.to_vec(),
            axis,
        })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        self.push(Op::Slice { x, axis, start, len })
    }

    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        self.push(Op::GatherRows { table, indices })
    }

    pub fn reduce_sum(&mut self, x: Var) -> Var {
        self.push(Op::ReduceSum { x, axis: None })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        self.push(Op::ReduceSum { x, axis: Some(axis) })
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        self.push(Op::ReduceMean { x, axis: None })
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        self.push(Op::ReduceMean { x, axis: Some(axis) })
    }

    pub fn cholesky(&mut self, a: Var) -> Var {
        self.push(Op::Cholesky(a))
    }

    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        self.push(Op::SolveLower { l, b, transpose: false })
    }

    pub fn solve_lower_transposed(&mut self, l: Var, b: Var) -> Var {
        self.push(Op::SolveLower { l, b, transpose: true })
    }

    /// Runs the forward pass, keeping every intermediate value.
    pub fn forward<B: Bindings + ?Sized>(&self, inputs: &B) -> Result<Forward<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let t = inputs
                        .lookup(name)
                        .ok_or_else(|| TapeError::UnboundInput(name.clone()))?;
                    if !t.all_finite() {
                        return Err(TapeError::NonFiniteInput(name.clone()));
                    }
                    t.clone()
                }
                Op::Const(t) => t.clone(),
                op => {
                    let out = kernels::forward(id, op, &values)?;
                    if !out.all_finite() {
                        return Err(TapeError::Overflow {
                            node: id,
                            op: op.name(),
                        });
                    }
                    out
                }
            };
            values.push(value);
        }
        Ok(Forward { tape: self, values })
    }

    /// Evaluates the tape and returns every named output.
    pub fn evaluate<B: Bindings + ?Sized>(&self, inputs: &B) -> Result<BTreeMap<String, Tensor>> {
        let fwd = self.forward(inputs)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, v)| (name.clone(), fwd.values[v.0].clone()))
            .collect())
    }

    /// Partial derivatives of the scalar output `output` with respect to every input.
    pub fn gradient<B: Bindings + ?Sized>(&self, inputs: &B, output: &str) -> Result<BTreeMap<String, Tensor>> {
        self.forward(inputs)?.backward(output)
    }
}

/// Values of every node after a forward pass.
#[derive(Debug)]
pub struct Forward<'t> {
    tape: &'t Tape,
    values: Vec<Tensor>,
}

impl<'t> Forward<'t> {
    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn output(&self, name: &str) -> Result<&Tensor> {
        let v = self
            .tape
            .output_var(name)
            .ok_or_else(|| TapeError::UnknownOutput(name.to_string()))?;
        Ok(&self.values[v.0])
    }

    pub fn outputs(&self) -> BTreeMap<String, Tensor> {
        self.tape
            .outputs
            .iter()
            .map(|(n, v)| (n.clone(), self.values[v.0].clone()))
            .collect()
    }

    /// Reverse pass from the named scalar output.
    pub fn backward(&self, output: &str) -> Result<BTreeMap<String, Tensor>> {
        let v = self
            .tape
            .output_var(output)
            .ok_or_else(|| TapeError::UnknownOutput(output.to_string()))?;
        let out = &self.values[v.0];
        if out.len() != 1 {
            return Err(TapeError::NonScalarOutput {
                name: output.to_string(),
                shape: out.shape().to_vec(),
            });
        }
        let grads = self.backward_from(v);
        Ok(self
            .tape
            .inputs
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(var.0)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(self.values[var.0].shape()));
                (name.clone(), g)
            })
            .collect())
    }

    fn backward_from(&self, root: Var) -> Vec<Option<Tensor>> {
        let nodes = &self.tape.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(self.values[root.0].shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Input(_)) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let wanted: Vec<bool> = node.op.parents().iter().map(|p| nodes[p.0].requires_grad).collect();
            let contributions = kernels::backward(&node.op, &self.values, &self.values[id], &g, &wanted);
            for (parent, contribution) in node.op.parents().into_iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                match &mut grads[parent.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(c.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
            }
        }
        grads
    }
}
