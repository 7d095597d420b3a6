//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! propagate gradients back to its inputs. [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A differentiable operation defined outside this crate.
///
/// The caller computes the forward value; the op only supplies the
/// vector-Jacobian product.
pub trait CustomOp<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Element> {
    Leaf,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Lower clamp applied to predictions inside the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Records a computation for later differentiation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_grads: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_grads: true,
        }
    }

    /// A tape on which every parameter behaves as a constant. Used for
    /// inference and for gradients with respect to inputs only.
    pub fn without_param_grads() -> Self {
        Self {
            param_grads: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// An input leaf; with `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "input")
    }

    /// Brings a parameter onto the tape. Repeated calls with the same id
    /// return the same node, so shared parameters accumulate gradient once.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, self.param_grads && !p.frozen, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (out, geom) = conv::forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, needs, "conv2d")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), needs, "mul")
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs, "mul_scalar")
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        let needs = self.needs(a);
        self.push(out, Op::Shift(a), needs, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs, "sigmoid")
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        let out = self.value(a).clamp(lo, hi);
        let needs = self.needs(a);
        self.push(out, Op::Clamp { x: a, lo, hi }, needs, "clamp")
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::Geometry {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Geometry {
                op: "concat",
                reason: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
            "concat",
        )
    }

    /// The sub-range `start..start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Geometry {
                op: "narrow",
                reason: format!("range {start}+{len} on axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        self.push(
            Tensor::from_parts(out_shape, data),
            Op::Narrow { x, axis, start },
            needs,
            "narrow",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(out, Op::Sum(a), needs, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = T::from_usize(v.len()).unwrap_or_else(T::one);
        let out = Tensor::scalar(v.sum() / n);
        let needs = self.needs(a);
        self.push(out, Op::Mean(a), needs, "mean")
    }

    /// Mean binary cross entropy of `pred` against a `{0, 1}` target.
    /// Predictions are clamped to `[1e-7, 1 - 1e-7]` inside the logarithms.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.check_same_shape(target, "bce_loss")?;
        if let Some(bad) = target.data().iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(TensorError::NonBinaryTarget(bad.as_f64()));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let one = T::one();
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                let pc = p.max(eps).min(one - eps).as_f64();
                let t = t.as_f64();
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum();
        let loss = T::from_f64_lossy(total / p.len().max(1) as f64);
        let needs = self.needs(pred);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.clone(),
            },
            needs,
            "bce_loss",
        )
    }

    /// Records an externally computed `output` of `inputs`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let name = op.name();
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
            name,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.needs_grad {
            return Err(TensorError::NoHistory);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape().to_vec(), T::one()));
        let mut leaves: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves[i] = Some(g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let want = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                    let cg = conv::backward(self.value(*x), self.value(*w), geom, g.data(), want);
                    self.acc(&mut grads, *x, cg.input)?;
                    self.acc(&mut grads, *w, cg.weight)?;
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, cg.bias)?;
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, Some(g.clone()))?;
                    self.acc(&mut grads, *b, Some(g))?;
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *b, Some(g.map(|v| -v)))?;
                    self.acc(&mut grads, *a, Some(g))?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |d, y| d * y)?;
                    let gb = g.zip_map(self.value(*a), |d, x| d * x)?;
                    self.acc(&mut grads, *a, Some(ga))?;
                    self.acc(&mut grads, *b, Some(gb))?;
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.acc(&mut grads, *a, Some(g.map(|v| v * s)))?;
                }
                Op::Shift(a) => self.acc(&mut grads, *a, Some(g))?,
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| if x > T::zero() { d } else { T::zero() })?;
                    self.acc(&mut grads, *a, Some(ga))?;
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |d, y| d * y * (T::one() - y))?;
                    self.acc(&mut grads, *a, Some(ga))?;
                }
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let gx = g.zip_map(self.value(*x), |d, v| if v < lo || v > hi { T::zero() } else { d })?;
                    self.acc(&mut grads, *x, Some(gx))?;
                }
                Op::Concat { inputs, axis } => {
                    let shape = node.value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let mut offset = 0;
                    for &v in inputs {
                        let vs = self.shape(v).to_vec();
                        let len = vs[*axis] * inner;
                        if self.needs(v) {
                            let mut part = Vec::with_capacity(outer * len);
                            for o in 0..outer {
                                let base = o * shape[*axis] * inner + offset;
                                part.extend_from_slice(&g.data()[base..base + len]);
                            }
                            self.acc(&mut grads, v, Some(Tensor::from_parts(vs, part)))?;
                        }
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let xs = self.shape(*x).to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut gx = vec![T::zero(); xs.iter().product()];
                    for o in 0..outer {
                        let dst = (o * xs[*axis] + start) * inner;
                        let src = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    self.acc(&mut grads, *x, Some(Tensor::from_parts(xs, gx)))?;
                }
                Op::Sum(a) => {
                    let d = g.data()[0];
                    let shape = self.shape(*a).to_vec();
                    self.acc(&mut grads, *a, Some(Tensor::full(shape, d)))?;
                }
                Op::Mean(a) => {
                    let shape = self.shape(*a).to_vec();
                    let n = T::from_usize(shape.iter().product::<usize>().max(1)).unwrap_or_else(T::one);
                    self.acc(&mut grads, *a, Some(Tensor::full(shape, g.data()[0] / n)))?;
                }
                Op::Bce { pred, target } => {
                    let p = self.value(*pred);
                    let n = T::from_usize(p.len().max(1)).unwrap_or_else(T::one);
                    let scale = g.data()[0] / n;
                    let eps = T::from_f64_lossy(BCE_EPS);
                    let one = T::one();
                    let gp = p.zip_map(target, |p, t| {
                        let pc = p.max(eps).min(one - eps);
                        scale * (pc - t) / (pc * (one - pc))
                    })?;
                    self.acc(&mut grads, *pred, Some(gp))?;
                }
                Op::Custom { inputs, op } => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                    let gs = op.backward(&values, &g, &needs);
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = &gv {
                            if gv.shape() != self.shape(v) {
                                return Err(TensorError::ShapeMismatch {
                                    op: "custom backward",
                                    lhs: self.shape(v).to_vec(),
                                    rhs: gv.shape().to_vec(),
                                });
                            }
                        }
                        self.acc(&mut grads, v, gv)?;
                    }
                }
            }
        }

        let mut params: Vec<(ParamId, Var)> = self
            .params
            .iter()
            .filter(|(_, v)| v.0 <= loss.0)
            .map(|(&id, &v)| (id, v))
            .collect();
        params.sort_unstable();
        Ok(Gradients { leaves, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Option<Tensor<T>>) -> Result<()> {
        let Some(g) = g else { return Ok(()) };
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// Gradients of one reverse pass, available for leaves and parameters.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to an input or parameter node. `None` when the
    /// node does not require gradients or does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.wrt(*v).map(|g| (*id, g)))
    }
}
