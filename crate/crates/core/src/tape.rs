//! Reverse-mode autodiff over an append-only arena of tensor nodes.
//!
//! A `Tape` records every op as it executes; `backward` consumes the tape and
//! walks the arena in reverse insertion order, which is always a valid
//! reverse-topological order. One tape per evaluation: values are immutable
//! and handles (`ValueId`) are tied to the tape that minted them.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// The four cyclic shifts that cover every phase of a stride-2 grid.
pub const PHASE_ROLLS: [(isize, isize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// A set of cyclic shifts whose rolled copies get averaged.
///
/// `adjoint()` negates the published offsets so that hooking the gradient
/// equals differentiating the roll-averaged forward pass exactly;
/// `literal()` keeps them as published. On a period-2 grid pattern the two
/// null the artifact identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RollSet {
    pub offsets: [(isize, isize); 4],
}

impl RollSet {
    pub fn literal() -> Self {
        RollSet { offsets: PHASE_ROLLS }
    }

    pub fn adjoint() -> Self {
        let mut offsets = PHASE_ROLLS;
        for o in &mut offsets {
            *o = (-o.0, -o.1);
        }
        RollSet { offsets }
    }

    /// Mean of the four rolled copies of `t`.
    pub fn average<T: Element>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = vec![T::zero(); t.numel()];
        for &(dy, dx) in &self.offsets {
            let rolled = kernels::roll2d(t, dy, dx)?;
            for (a, &v) in acc.iter_mut().zip(rolled.data().iter()) {
                *a += v;
            }
        }
        let quarter = T::from_f64(0.25);
        for a in &mut acc {
            *a *= quarter;
        }
        Tensor::from_vec(t.shape().to_vec(), acc)
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId {
    tape: u64,
    index: u32,
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: u32,
        weight: u32,
        bias: Option<u32>,
        stride: usize,
        padding: usize,
        grad_hook: Option<RollSet>,
    },
    Linear {
        input: u32,
        weight: u32,
        bias: Option<u32>,
    },
    ChannelAffine {
        input: u32,
        scale: u32,
        shift: u32,
    },
    Relu {
        input: u32,
    },
    Sigmoid {
        input: u32,
    },
    MaxPool2x {
        input: u32,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: u32,
    },
    BilinearDown2x {
        input: u32,
    },
    Roll2d {
        input: u32,
        dy: isize,
        dx: isize,
    },
    Add {
        a: u32,
        b: u32,
    },
    Mul {
        a: u32,
        b: u32,
    },
    Scale {
        input: u32,
        factor: T,
    },
    Sum {
        input: u32,
    },
    Mean {
        input: u32,
    },
    SelectColumn {
        input: u32,
        col: usize,
    },
    // relu forward, but backward multiplies by a captured tensor instead
    // of the relu mask (the rescale rule's difference ratio).
    ReluRescale {
        input: u32,
        multiplier: Tensor<T>,
    },
    // Fused losses cache their input gradient at forward time.
    FusedLoss {
        input: u32,
        grad: Tensor<T>,
    },
}

impl<T: Element> Op<T> {
    fn parents(&self, out: &mut Vec<u32>) {
        match self {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                out.push(*input);
                out.push(*weight);
                if let Some(b) = bias {
                    out.push(*b);
                }
            }
            Op::ChannelAffine { input, scale, shift } => {
                out.push(*input);
                out.push(*scale);
                out.push(*shift);
            }
            Op::Relu { input }
            | Op::Sigmoid { input }
            | Op::MaxPool2x { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::BilinearDown2x { input }
            | Op::Roll2d { input, .. }
            | Op::Scale { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::SelectColumn { input, .. }
            | Op::ReluRescale { input, .. }
            | Op::FusedLoss { input, .. } => out.push(*input),
            Op::Add { a, b } | Op::Mul { a, b } => {
                out.push(*a);
                out.push(*b);
            }
        }
    }
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any gradient-tracked leaf feeds this node. Backward skips
    /// gradient work for subtrees made only of constants.
    needs_grad: bool,
}

pub struct Tape<T: Element> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>) -> ValueId {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => true,
            ref op => {
                let mut parents = Vec::with_capacity(3);
                op.parents(&mut parents);
                parents.iter().any(|&p| nodes[p as usize].needs_grad)
            }
        };
        let index = u32::try_from(nodes.len()).expect("tape exceeded u32 nodes");
        nodes.push(Node { value, op, needs_grad });
        ValueId { tape: self.id, index }
    }

    fn check(&self, id: ValueId, what: &str) -> Result<u32> {
        if id.tape != self.id {
            return Err(Error::usage(format!(
                "{what}: value belongs to a different tape"
            )));
        }
        Ok(id.index)
    }

    /// Record an input tensor. Leaves are where gradients accumulate.
    pub fn leaf(&self, value: Tensor<T>) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// A leaf that never receives a gradient. Marking frozen parameters as
    /// constants lets backward skip their gradient computation entirely.
    pub fn constant(&self, value: Tensor<T>) -> ValueId {
        let id = self.leaf(value);
        self.nodes.borrow_mut()[id.index as usize].needs_grad = false;
        id
    }

    /// Cheap clone (shared storage) of a node's value.
    pub fn value(&self, id: ValueId) -> Result<Tensor<T>> {
        let idx = self.check(id, "value")?;
        Ok(self.nodes.borrow()[idx as usize].value.clone())
    }

    pub fn conv2d(
        &self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
        grad_hook: Option<RollSet>,
    ) -> Result<ValueId> {
        let i = self.check(input, "conv2d")?;
        let w = self.check(weight, "conv2d")?;
        let b = bias.map(|b| self.check(b, "conv2d")).transpose()?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_forward(
                &nodes[i as usize].value,
                &nodes[w as usize].value,
                b.map(|b| &nodes[b as usize].value),
                stride,
                padding,
            )?
        };
        Ok(self.push(
            out,
            Op::Conv2d { input: i, weight: w, bias: b, stride, padding, grad_hook },
        ))
    }

    pub fn linear(&self, input: ValueId, weight: ValueId, bias: Option<ValueId>) -> Result<ValueId> {
        let i = self.check(input, "linear")?;
        let w = self.check(weight, "linear")?;
        let b = bias.map(|b| self.check(b, "linear")).transpose()?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::linear_forward(
                &nodes[i as usize].value,
                &nodes[w as usize].value,
                b.map(|b| &nodes[b as usize].value),
            )?
        };
        Ok(self.push(out, Op::Linear { input: i, weight: w, bias: b }))
    }

    pub fn channel_affine(&self, input: ValueId, scale: ValueId, shift: ValueId) -> Result<ValueId> {
        let i = self.check(input, "channel_affine")?;
        let s = self.check(scale, "channel_affine")?;
        let h = self.check(shift, "channel_affine")?;
        let out = {
            let nodes = self.nodes.borrow();
            kernels::channel_affine_forward(
                &nodes[i as usize].value,
                &nodes[s as usize].value,
                &nodes[h as usize].value,
            )?
        };
        Ok(self.push(out, Op::ChannelAffine { input: i, scale: s, shift: h }))
    }

    pub fn relu(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "relu")?;
        let out = kernels::relu(&self.nodes.borrow()[i as usize].value);
        Ok(self.push(out, Op::Relu { input: i }))
    }

    /// relu forward, but the backward multiplier is the given tensor
    /// (elementwise) instead of the step function.
    pub fn relu_rescale(&self, input: ValueId, multiplier: Tensor<T>) -> Result<ValueId> {
        let i = self.check(input, "relu_rescale")?;
        let out = {
            let v = &self.nodes.borrow()[i as usize].value;
            if v.shape() != multiplier.shape() {
                return Err(Error::shape(format!(
                    "relu_rescale: value shape {:?} vs multiplier shape {:?}",
                    v.shape(),
                    multiplier.shape()
                )));
            }
            kernels::relu(v)
        };
        Ok(self.push(out, Op::ReluRescale { input: i, multiplier }))
    }

    pub fn sigmoid(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "sigmoid")?;
        let out = kernels::sigmoid(&self.nodes.borrow()[i as usize].value);
        Ok(self.push(out, Op::Sigmoid { input: i }))
    }

    pub fn max_pool2x(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "max_pool2x")?;
        let (out, argmax) = kernels::max_pool2x(&self.nodes.borrow()[i as usize].value)?;
        Ok(self.push(out, Op::MaxPool2x { input: i, argmax }))
    }

    pub fn global_avg_pool(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "global_avg_pool")?;
        let out = kernels::global_avg_pool(&self.nodes.borrow()[i as usize].value)?;
        Ok(self.push(out, Op::GlobalAvgPool { input: i }))
    }

    pub fn bilinear_down2x(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "bilinear_down2x")?;
        let out = kernels::bilinear_down2x(&self.nodes.borrow()[i as usize].value)?;
        Ok(self.push(out, Op::BilinearDown2x { input: i }))
    }

    pub fn roll2d(&self, input: ValueId, dy: isize, dx: isize) -> Result<ValueId> {
        let i = self.check(input, "roll2d")?;
        let out = kernels::roll2d(&self.nodes.borrow()[i as usize].value, dy, dx)?;
        Ok(self.push(out, Op::Roll2d { input: i, dy, dx }))
    }

    pub fn add(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "add")?;
        let bi = self.check(b, "add")?;
        let out = {
            let nodes = self.nodes.borrow();
            elementwise_add(&nodes[ai as usize].value, &nodes[bi as usize].value)?
        };
        Ok(self.push(out, Op::Add { a: ai, b: bi }))
    }

    pub fn mul(&self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let ai = self.check(a, "mul")?;
        let bi = self.check(b, "mul")?;
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[ai as usize].value, &nodes[bi as usize].value);
            if x.shape() != y.shape() {
                return Err(Error::shape(format!(
                    "mul: shapes {:?} and {:?} differ",
                    x.shape(),
                    y.shape()
                )));
            }
            let data: Vec<T> = x
                .data()
                .iter()
                .zip(y.data().iter())
                .map(|(&p, &q)| p * q)
                .collect();
            Tensor::from_vec(x.shape().to_vec(), data)?
        };
        Ok(self.push(out, Op::Mul { a: ai, b: bi }))
    }

    pub fn scale(&self, input: ValueId, factor: f64) -> Result<ValueId> {
        let i = self.check(input, "scale")?;
        let factor = T::from_f64(factor);
        let out = self.nodes.borrow()[i as usize].value.map(|v| v * factor);
        Ok(self.push(out, Op::Scale { input: i, factor }))
    }

    pub fn sum(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "sum")?;
        let total = {
            let v = &self.nodes.borrow()[i as usize].value;
            let mut acc = T::zero();
            for &x in v.data().iter() {
                acc += x;
            }
            acc
        };
        Ok(self.push(Tensor::scalar(total), Op::Sum { input: i }))
    }

    pub fn mean(&self, input: ValueId) -> Result<ValueId> {
        let i = self.check(input, "mean")?;
        let (total, n) = {
            let v = &self.nodes.borrow()[i as usize].value;
            let mut acc = T::zero();
            for &x in v.data().iter() {
                acc += x;
            }
            (acc, v.numel())
        };
        let out = Tensor::scalar(total * T::from_f64(1.0 / n as f64));
        Ok(self.push(out, Op::Mean { input: i }))
    }

    /// Pick one column of a 2d tensor: (N, K) -> (N,).
    pub fn select_column(&self, input: ValueId, col: usize) -> Result<ValueId> {
        let i = self.check(input, "select_column")?;
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[i as usize].value;
            let (n, k) = match v.shape() {
                [n, k] => (*n, *k),
                s => {
                    return Err(Error::shape(format!(
                        "select_column: need 2d input, got {s:?}"
                    )))
                }
            };
            if col >= k {
                return Err(Error::shape(format!(
                    "select_column: column {col} out of range for width {k}"
                )));
            }
            let data: Vec<T> = (0..n).map(|r| v.data()[r * k + col]).collect();
            Tensor::from_vec(vec![n], data)?
        };
        Ok(self.push(out, Op::SelectColumn { input: i, col }))
    }

    /// Mean softmax cross-entropy against integer labels. Returns a scalar
    /// node; the input gradient is cached at forward time.
    pub fn cross_entropy_mean(&self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        let i = self.check(logits, "cross_entropy_mean")?;
        let (loss, grad) = {
            let nodes = self.nodes.borrow();
            kernels::cross_entropy_mean(&nodes[i as usize].value, labels)?
        };
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::FusedLoss { input: i, grad },
        ))
    }

    /// Mean elementwise binary cross-entropy on logits against a constant
    /// {0,1} target tensor.
    pub fn bce_with_logits_mean(&self, logits: ValueId, targets: &Tensor<T>) -> Result<ValueId> {
        let i = self.check(logits, "bce_with_logits_mean")?;
        let (loss, grad) = {
            let nodes = self.nodes.borrow();
            kernels::bce_with_logits_mean(&nodes[i as usize].value, targets)?
        };
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::FusedLoss { input: i, grad },
        ))
    }

    /// Mean absolute error against a constant target tensor.
    pub fn l1_mean(&self, input: ValueId, target: &Tensor<T>) -> Result<ValueId> {
        let i = self.check(input, "l1_mean")?;
        let (loss, grad) = {
            let nodes = self.nodes.borrow();
            kernels::l1_loss_mean(&nodes[i as usize].value, target)?
        };
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::FusedLoss { input: i, grad },
        ))
    }

    /// Reverse pass from a scalar root. Consumes the tape; gradients for any
    /// node (not just leaves) can be read from the result.
    pub fn backward(self, root: ValueId) -> Result<Gradients<T>> {
        let root_idx = self.check(root, "backward")? as usize;
        let nodes = self.nodes.into_inner();
        if nodes[root_idx].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward: root must be scalar, got shape {:?}",
                nodes[root_idx].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[root_idx] = Some(Tensor::full(
            nodes[root_idx].value.shape().to_vec(),
            T::one(),
        ));

        let needs = |i: &u32| nodes[*i as usize].needs_grad;
        for idx in (0..=root_idx).rev() {
            if grads[idx].is_none() || !nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].clone().expect("checked above");
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, bias, stride, padding, grad_hook } => {
                    let need_b = bias.as_ref().is_some_and(needs);
                    let (gin, gw, gb) = kernels::conv2d_backward(
                        &nodes[*input as usize].value,
                        &nodes[*weight as usize].value,
                        *stride,
                        *padding,
                        &g,
                        needs(input),
                        needs(weight),
                        need_b,
                    )?;
                    if let Some(mut gin) = gin {
                        if let Some(rolls) = grad_hook {
                            gin = rolls.average(&gin)?;
                        }
                        accumulate(&mut grads[*input as usize], gin);
                    }
                    if let Some(gw) = gw {
                        accumulate(&mut grads[*weight as usize], gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        accumulate(&mut grads[*b as usize], gb);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (gin, gw, gb) = kernels::linear_backward(
                        &nodes[*input as usize].value,
                        &nodes[*weight as usize].value,
                        bias.is_some(),
                        &g,
                    )?;
                    if needs(input) {
                        accumulate(&mut grads[*input as usize], gin);
                    }
                    if needs(weight) {
                        accumulate(&mut grads[*weight as usize], gw);
                    }
                    if let (Some(b), Some(gb)) = (bias, gb) {
                        if needs(b) {
                            accumulate(&mut grads[*b as usize], gb);
                        }
                    }
                }
                Op::ChannelAffine { input, scale, shift } => {
                    let (gin, gs, gh) = kernels::channel_affine_backward(
                        &nodes[*input as usize].value,
                        &nodes[*scale as usize].value,
                        &g,
                    )?;
                    if needs(input) {
                        accumulate(&mut grads[*input as usize], gin);
                    }
                    if needs(scale) {
                        accumulate(&mut grads[*scale as usize], gs);
                    }
                    if needs(shift) {
                        accumulate(&mut grads[*shift as usize], gh);
                    }
                }
                Op::Relu { input } => {
                    let gin = kernels::relu_backward(&nodes[*input as usize].value, &g);
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::Sigmoid { input } => {
                    let gin = kernels::sigmoid_backward(&node.value, &g);
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::MaxPool2x { input, argmax } => {
                    let gin = kernels::max_pool2x_backward(
                        nodes[*input as usize].value.shape(),
                        argmax,
                        &g,
                    )?;
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::GlobalAvgPool { input } => {
                    let gin = kernels::global_avg_pool_backward(
                        nodes[*input as usize].value.shape(),
                        &g,
                    )?;
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::BilinearDown2x { input } => {
                    let gin = kernels::bilinear_down2x_backward(&g)?;
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::Roll2d { input, dy, dx } => {
                    // Adjoint of a cyclic shift is the inverse shift.
                    let gin = kernels::roll2d(&g, -dy, -dx)?;
                    accumulate(&mut grads[*input as usize], gin);
                }
                Op::Add { a, b } => {
                    if needs(a) {
                        accumulate(&mut grads[*a as usize], g.clone());
                    }
                    if needs(b) {
                        accumulate(&mut grads[*b as usize], g);
                    }
                }
                Op::Mul { a, b } => {
                    if needs(a) {
                        let bv = &nodes[*b as usize].value;
                        let data: Vec<T> = g
                            .data()
                            .iter()
                            .zip(bv.data().iter())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        accumulate(
                            &mut grads[*a as usize],
                            Tensor::from_vec(g.shape().to_vec(), data)?,
                        );
                    }
                    if needs(b) {
                        let av = &nodes[*a as usize].value;
                        let data: Vec<T> = g
                            .data()
                            .iter()
                            .zip(av.data().iter())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        accumulate(
                            &mut grads[*b as usize],
                            Tensor::from_vec(g.shape().to_vec(), data)?,
                        );
                    }
                }
                Op::Scale { input, factor } => {
                    let f = *factor;
                    accumulate(&mut grads[*input as usize], g.map(|v| v * f));
                }
                Op::Sum { input } => {
                    let gv = g.scalar_value();
                    let shape = nodes[*input as usize].value.shape().to_vec();
                    accumulate(&mut grads[*input as usize], Tensor::full(shape, gv));
                }
                Op::Mean { input } => {
                    let shape = nodes[*input as usize].value.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let gv = g.scalar_value() * T::from_f64(1.0 / n as f64);
                    accumulate(&mut grads[*input as usize], Tensor::full(shape, gv));
                }
                Op::SelectColumn { input, col } => {
                    let v = &nodes[*input as usize].value;
                    let (n, k) = (v.shape()[0], v.shape()[1]);
                    let mut gin = vec![T::zero(); n * k];
                    for r in 0..n {
                        gin[r * k + col] = g.data()[r];
                    }
                    accumulate(
                        &mut grads[*input as usize],
                        Tensor::from_vec(vec![n, k], gin)?,
                    );
                }
                Op::ReluRescale { input, multiplier } => {
                    let data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(multiplier.data().iter())
                        .map(|(&p, &q)| p * q)
                        .collect();
                    accumulate(
                        &mut grads[*input as usize],
                        Tensor::from_vec(g.shape().to_vec(), data)?,
                    );
                }
                Op::FusedLoss { input, grad } => {
                    let gv = g.scalar_value();
                    accumulate(&mut grads[*input as usize], grad.map(|v| v * gv));
                }
            }
        }

        Ok(Gradients { tape: self.id, grads })
    }
}

fn elementwise_add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "add: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&p, &q)| p + q)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        None => *slot = Some(grad),
        Some(prev) => {
            *slot = Some(elementwise_add(prev, &grad).expect("gradient shapes agree"));
        }
    }
}

/// Gradients read out of a consumed tape.
pub struct Gradients<T: Element> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a node, if any path reached it. `None` means the value
    /// did not influence the root (gradient is identically zero).
    pub fn get(&self, id: ValueId) -> Result<Option<&Tensor<T>>> {
        if id.tape != self.tape {
            return Err(Error::usage(
                "gradient lookup: value belongs to a different tape".to_string(),
            ));
        }
        Ok(self.grads[id.index as usize].as_ref())
    }

    /// Like `get` but materializes zeros of the given shape when unreached.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Result<Tensor<T>> {
        Ok(match self.get(id)? {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        })
    }
}
