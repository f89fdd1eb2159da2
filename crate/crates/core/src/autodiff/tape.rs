use super::ops::{self, Padding};
use super::{Real, Tensor4};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, padding: Padding },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Upsample2 { input: Var },
    Concat { a: Var, b: Var },
    Relu { input: Var },
    Tanh { input: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between backward calls.
    grad: Option<Tensor4<T>>,
}

/// Append-only record of a forward computation.
///
/// Nodes can only refer to nodes recorded before them, so the tape is
/// acyclic by construction and its index order is a topological order.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or_else(|| Error::invalid("variable", format!("#{} is not on this tape", v.0)))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; backward accumulates into its gradient.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Mutable access to a leaf's value, for perturbation-based checks.
    pub fn leaf_value_mut(&mut self, v: Var) -> Result<&mut Tensor4<T>> {
        let node = self.nodes.get_mut(v.0).filter(|n| matches!(n.op, Op::Leaf));
        node.map(|n| &mut n.value).ok_or_else(|| Error::invalid("variable", format!("#{} is not a leaf", v.0)))
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor4<T>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.nodes.get_mut(v.0).and_then(|n| n.grad.take())
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Same-size 2-D cross-correlation plus bias.
    ///
    /// `weight` is `[cout, cin, kh, kw]` with odd kernel sides and `bias` holds
    /// `cout` values in any 4-D arrangement.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        let (x, w, b) = (&self.node(input)?.value, &self.node(weight)?.value, &self.node(bias)?.value);
        let [_, cin, _, _] = x.dims();
        let [cout, wcin, kh, kw] = w.dims();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("kernel", format!("{kh}x{kw} must have odd sides")));
        }
        if wcin != cin {
            return Err(Error::shape(format!("conv weight expects {wcin} input channels, got {cin}")));
        }
        if b.len() != cout {
            return Err(Error::shape(format!("bias has {} values for {cout} channels", b.len())));
        }
        let y = ops::conv2d_forward(x, w, b, padding);
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(y, Op::Conv2d { input, weight, bias, padding }, rg))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let [_, _, h, w] = x.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("maxpool2 needs even height and width, got {h}x{w}")));
        }
        let (y, argmax) = ops::maxpool2_forward(x);
        let rg = self.needs(input);
        Ok(self.push(y, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let y = ops::upsample2_forward(&self.node(input)?.value);
        let rg = self.needs(input);
        Ok(self.push(y, Op::Upsample2 { input }, rg))
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let ([na, _, ha, wa], [nb, _, hb, wb]) = (ta.dims(), tb.dims());
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::shape(format!("concat of {:?} and {:?}", ta.dims(), tb.dims())));
        }
        let y = ops::concat_forward(ta, tb);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(y, Op::Concat { a, b }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
        let rg = self.needs(input);
        Ok(self.push(y, Op::Relu { input }, rg))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let x = &self.node(input)?.value;
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.needs(input);
        Ok(self.push(y, Op::Tanh { input }, rg))
    }

    /// Mean over all elements of the squared difference; a `[1,1,1,1]` scalar.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.node(pred)?.value, &self.node(target)?.value);
        if p.dims() != t.dims() {
            return Err(Error::shape(format!("mse of {:?} against {:?}", p.dims(), t.dims())));
        }
        if p.is_empty() {
            return Err(Error::shape("mse of empty tensors"));
        }
        let sum: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = sum / T::of(p.len() as f64);
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor4::full([1, 1, 1, 1], loss), Op::Mse { pred, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`, adding d(loss)/d(leaf) into every
    /// trainable leaf's gradient. Gradients accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", root.value.dims())));
        }
        let mut pending: Vec<Option<Tensor4<T>>> = Vec::new();
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor4::full(root.value.dims(), T::one()));

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor4::zeros(node.value.dims()));
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                accumulate(&mut self.nodes[i].grad, g);
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, padding } => {
                    let (x, w) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                    let grads = ops::conv2d_backward(x, w, &g, *padding, self.needs(*input));
                    if let Some(dx) = grads.input {
                        accumulate(&mut pending[input.0], dx);
                    }
                    if self.needs(*weight) {
                        accumulate(&mut pending[weight.0], grads.weight);
                    }
                    if self.needs(*bias) {
                        let bdims = self.nodes[bias.0].value.dims();
                        let db = Tensor4::new(bdims, grads.bias.into_data())?;
                        accumulate(&mut pending[bias.0], db);
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = ops::maxpool2_backward(self.nodes[input.0].value.dims(), argmax, &g);
                    accumulate(&mut pending[input.0], dx);
                }
                Op::Upsample2 { input } => {
                    let dx = ops::upsample2_backward(self.nodes[input.0].value.dims(), &g);
                    accumulate(&mut pending[input.0], dx);
                }
                Op::Concat { a, b } => {
                    let (da, db) = ops::concat_backward(self.nodes[a.0].value.dims(), self.nodes[b.0].value.dims(), &g);
                    if self.needs(*a) {
                        accumulate(&mut pending[a.0], da);
                    }
                    if self.needs(*b) {
                        accumulate(&mut pending[b.0], db);
                    }
                }
                Op::Relu { input } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut pending[input.0], dx);
                }
                Op::Tanh { input } => {
                    let mut dx = g;
                    for (d, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= T::one() - y * y;
                    }
                    accumulate(&mut pending[input.0], dx);
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
                    let scale = T::of(2.0) * g.data()[0] / T::of(p.len() as f64);
                    let diff: Vec<T> = p.data().iter().zip(t.data()).map(|(&a, &b)| scale * (a - b)).collect();
                    if self.needs(*target) {
                        let neg = diff.iter().map(|&d| -d).collect();
                        accumulate(&mut pending[target.0], Tensor4::new(t.dims(), neg)?);
                    }
                    if self.needs(*pred) {
                        accumulate(&mut pending[pred.0], Tensor4::new(p.dims(), diff)?);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
