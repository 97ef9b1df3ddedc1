//! Reverse-mode differentiation over [`Tensor<f64>`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so a node's parents always have smaller ids and the
//! backward sweep is a single pass over decreasing ids. A tape supports one
//! backward call; training loops build a fresh tape per step.
//!
//! ```
//! use dpm_core::autodiff::Tape;
//! use dpm_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
//! let y = tape.sum(tape.mul(x, x).unwrap());
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
//! ```

mod gradcheck;
mod ops;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, InputReport};

use crate::error::{contract_err, shape_err, Result};
use crate::tensor::Tensor;

/// Values carried on the tape.
pub type Value = Tensor<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule: receives the output gradient and a mask of which parents
/// need gradients, returns one entry per parent.
pub type BackwardFn = Box<dyn Fn(&Value, &[bool]) -> Vec<Option<Value>>>;

struct Node {
    value: Rc<Value>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Value>>,
    dims: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros if `v` did not
    /// influence the root.
    pub fn get(&self, v: Var) -> Value {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Value::zeros(&self.dims[v.0]).expect("node dims are valid"),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Value> {
        self.grads[v.0].as_ref()
    }
}

pub(crate) fn accumulate(into: &mut Value, add: &Value) {
    for (a, b) in into.data_mut().iter_mut().zip(add.data()) {
        *a += *b;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can record a new forward pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    pub fn leaf(&self, value: Value, requires_grad: bool) -> Var {
        self.push(Rc::new(value), requires_grad, Vec::new(), None)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Value) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Value) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Value> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn dims(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.dims().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a custom differentiable operation.
    ///
    /// `backward` gets the gradient of the output plus a mask over `parents`
    /// and must return one (optional) gradient per parent, shaped like it.
    pub fn custom(
        &self,
        parents: &[Var],
        value: Value,
        backward: impl Fn(&Value, &[bool]) -> Vec<Option<Value>> + 'static,
    ) -> Var {
        let requires = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        let bw: Option<BackwardFn> = if requires {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(
            Rc::new(value),
            requires,
            parents.iter().map(|p| p.0).collect(),
            bw,
        )
    }

    fn push(
        &self,
        value: Rc<Value>,
        requires_grad: bool,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node {
            value,
            requires_grad,
            parents,
            backward,
        });
        Var(id)
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let n = self.nodes.borrow()[root.0].value.len();
        if n != 1 {
            return Err(contract_err!(
                "backward root must be scalar, has {n} elements"
            ));
        }
        let seed = Value::full(&self.dims(root), 1.0)?;
        self.backward_with(root, seed)
    }

    /// Backpropagates an explicit cotangent `seed` shaped like `root`.
    pub fn backward_with(&self, root: Var, seed: Value) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(contract_err!(
                "tape already consumed by a backward pass; call reset()"
            ));
        }
        let nodes = self.nodes.borrow();
        if seed.dims() != nodes[root.0].value.dims() {
            return Err(shape_err!(
                "seed {:?} does not match root {:?}",
                seed.dims(),
                nodes[root.0].value.dims()
            ));
        }
        let mut grads: Vec<Option<Value>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads[id].take() else { continue };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = bw(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.dims(), nodes[p].value.dims());
                match &mut grads[p] {
                    Some(acc) => accumulate(acc, &pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // keep gradients of leaves and requires_grad intermediates queryable
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            dims: nodes.iter().map(|n| n.value.dims().to_vec()).collect(),
        })
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(
        &self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = Value::from_parts(
            xv.dims().to_vec(),
            xv.data().iter().map(|&v| f(v)).collect(),
        );
        let yv = Rc::new(out.clone());
        self.custom(&[x], out, move |g, _| {
            let data = xv
                .data()
                .iter()
                .zip(yv.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            vec![Some(Value::from_parts(xv.dims().to_vec(), data))]
        })
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.unary(x, |v| s * v, move |_, _| s)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, |_, _| 1.0)
    }

    /// Subgradient 0 at 0.
    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    /// Clamp into `[lo, hi]`; gradient 1 strictly inside, 0 elsewhere
    /// (including exactly at the bounds).
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            x,
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// `max(x, floor)`; gradient 0 where the floor is active.
    pub fn floor_at(&self, x: Var, floor: f64) -> Var {
        self.unary(x, move |v| v.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        da: impl Fn(f64, f64) -> f64 + 'static,
        db: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (na, nb) = (av.len(), bv.len());
        let out_dims = if av.dims() == bv.dims() || nb == 1 {
            av.dims().to_vec()
        } else if na == 1 {
            bv.dims().to_vec()
        } else {
            return Err(shape_err!(
                "elementwise operands {:?} and {:?}",
                av.dims(),
                bv.dims()
            ));
        };
        let n = na.max(nb);
        let at = |i: usize| av.data()[if na == 1 { 0 } else { i }];
        let bt = |i: usize| bv.data()[if nb == 1 { 0 } else { i }];
        let out = Value::from_parts(out_dims, (0..n).map(|i| f(at(i), bt(i))).collect());
        Ok(self.custom(&[a, b], out, move |g, needs| {
            let at = |i: usize| av.data()[if na == 1 { 0 } else { i }];
            let bt = |i: usize| bv.data()[if nb == 1 { 0 } else { i }];
            let reduce = |src: &Value, len: usize, d: &dyn Fn(f64, f64) -> f64| {
                let mut out = vec![0.0; len];
                for (i, &gi) in g.data().iter().enumerate() {
                    out[if len == 1 { 0 } else { i }] += gi * d(at(i), bt(i));
                }
                Value::from_parts(src.dims().to_vec(), out)
            };
            vec![
                needs[0].then(|| reduce(&av, na, &da)),
                needs[1].then(|| reduce(&bv, nb, &db)),
            ]
        }))
    }

    /// Elementwise sum; either operand may be a single-element scalar.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    // ---- reductions and layout --------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>();
        let dims = xv.dims().to_vec();
        self.custom(&[x], Value::from_parts(vec![1], vec![s]), move |g, _| {
            let n: usize = dims.iter().product();
            vec![Some(Value::from_parts(dims.clone(), vec![g.data()[0]; n]))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&self, x: Var, dims: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.reshape(dims)?;
        let src = xv.dims().to_vec();
        Ok(self.custom(&[x], out, move |g, _| {
            vec![Some(Value::from_parts(src.clone(), g.data().to_vec()))]
        }))
    }

    /// Sub-tensor at `index` of the leading axis.
    pub fn select(&self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let out = xv.outer(index)?;
        let inner = out.len();
        Ok(self.custom(&[x], out, move |g, _| {
            let mut full = vec![0.0; xv.len()];
            full[index * inner..(index + 1) * inner].copy_from_slice(g.data());
            vec![Some(Value::from_parts(xv.dims().to_vec(), full))]
        }))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Value> = parts.iter().map(|&p| (*self.value(p)).clone()).collect();
        let out = Value::stack(&values)?;
        let inner = values[0].len();
        let dims = values[0].dims().to_vec();
        let k = parts.len();
        Ok(self.custom(parts, out, move |g, needs| {
            (0..k)
                .map(|i| {
                    needs[i].then(|| {
                        Value::from_parts(
                            dims.clone(),
                            g.data()[i * inner..(i + 1) * inner].to_vec(),
                        )
                    })
                })
                .collect()
        }))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Value {
        Value::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn tanh_at_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[0.0]));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
        assert_eq!(tape.backward(y).unwrap().get(x).data(), &[1.0]);
    }

    #[test]
    fn abs_gradients() {
        let tape = Tape::new();
        let x = tape.param(t(&[-3.0, 0.0, 2.0]));
        let y = tape.sum(tape.abs(x));
        assert_eq!(tape.value(y).data(), &[5.0]);
        assert_eq!(tape.backward(y).unwrap().get(x).data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn shared_operand_accumulates() {
        let tape = Tape::new();
        let x = tape.param(t(&[1.5]));
        let z = tape.add(x, x).unwrap();
        assert_eq!(tape.backward(z).unwrap().get(x).data(), &[2.0]);
    }

    #[test]
    fn clamp_gradient_mask() {
        let tape = Tape::new();
        let x = tape.param(t(&[-2.0, -1.0, 0.0, 1.0, 2.0]));
        let y = tape.sum(tape.clamp(x, -1.0, 1.0));
        let g = tape.backward(y).unwrap().get(x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0, 3.0]));
        let s = tape.param(t(&[2.0]));
        let y = tape.sum(tape.mul(x, s).unwrap());
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(s).data(), &[6.0]);
        assert_eq!(g.get(x).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.param(t(&[1.0, 2.0]));
        let b = tape.param(t(&[1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn root_leaf_and_unused_leaf() {
        let tape = Tape::new();
        let x = tape.param(t(&[4.0]));
        let unused = tape.param(t(&[1.0, 1.0]));
        let g = tape.backward(x).unwrap();
        assert_eq!(g.get(x).data(), &[1.0]);
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let tape = Tape::new();
        let x = tape.param(t(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
        tape.reset();
        let x = tape.param(t(&[1.0]));
        assert!(tape.backward(x).is_ok());
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[1.0]));
        let x = tape.param(t(&[2.0]));
        let y = tape.mul(c, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.try_get(c).is_none());
        assert_eq!(g.get(x).data(), &[1.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // grad(a f + b g) == a grad f + b grad g
        let x0 = t(&[0.3, -0.7, 1.1]);
        let (a, b) = (2.5, -0.75);
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let f = tape.sum(tape.tanh(x));
            let g = tape.sum(tape.square(x));
            let root = match which {
                0 => f,
                1 => g,
                _ => {
                    let af = tape.scale(f, a);
                    let bg = tape.scale(g, b);
                    tape.add(af, bg).unwrap()
                }
            };
            tape.backward(root).unwrap().get(x)
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..3 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() < 1e-12);
        }
    }
}
