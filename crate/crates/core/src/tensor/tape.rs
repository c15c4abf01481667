use std::sync::Arc;

use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Coarse operation identifiers, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    AddChannel,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Log,
    PowBase,
    Abs,
    ClampMin,
    Conv2d,
    Sum,
    Mean,
    SumAxis,
    MeanAxis,
    MaxAxis,
    Concat,
    Reshape,
    Transpose,
    GatherRows,
    BroadcastRows,
    NormalizeRows,
    PoseDistance,
}

/// Deliberate corruption of one backward rule. Only used to prove that the
/// gradient checker detects a wrong derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    AddChannel { x: Var, bias: Var },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    PowBase { x: Var, ln_base: f64 },
    Abs(Var),
    ClampMin { x: Var, min: f64 },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MaxAxis { x: Var, axis: usize, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, rows: Vec<usize> },
    BroadcastRows(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    PoseDistance { q: Var, t: Var, model: Arc<[[f64; 3]]>, target: Arc<[[f64; 3]]> },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::AddChannel { .. } => OpKind::AddChannel,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::PowBase { .. } => OpKind::PowBase,
            Op::Abs(..) => OpKind::Abs,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::MaxAxis { .. } => OpKind::MaxAxis,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::BroadcastRows(..) => OpKind::BroadcastRows,
            Op::NormalizeRows { .. } => OpKind::NormalizeRows,
            Op::PoseDistance { .. } => OpKind::PoseDistance,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the node vector is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    fault: Option<Fault>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push_leaf(t.shape, t.data, false))
    }

    /// Records a tensor as a leaf, inheriting its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), tensor.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.shape().to_vec(), tensor.data().to_vec(), true)
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape, value, requires_grad, grad: None, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            let mut contributions = self.backward_rule(i, &g);
            if let Some(f) = self.fault {
                if f.op == self.nodes[i].op.kind() {
                    for (_, c) in &mut contributions {
                        c.iter_mut().for_each(|x| *x *= f.factor);
                    }
                }
            }
            for (input, c) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        for (i, g) in leaf_grads {
            let slot = self.nodes[i].grad.get_or_insert_with(|| vec![0.0; g.len()]);
            slot.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }
}
