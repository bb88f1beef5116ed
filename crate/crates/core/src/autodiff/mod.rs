//! A small tape-based reverse-mode automatic differentiation engine.
//!
//! Every operation records its output value and a closure that maps the
//! upstream gradient to gradient contributions for its parents. Values are
//! reference counted so closures can keep their inputs alive without copying.
//! The engine is generic over [`Real`] so the same network runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod conv;
mod gru;
mod ops;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use gru::GruParams;
pub use ops::BatchNormMode;

/// Floating-point element type usable by the engine.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Logistic function `1 / (1 + e^{−x})`.
    #[inline]
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

/// `e^x` for `f32` by range reduction to `r ∈ [−ln2/2, ln2/2]` and a
/// degree-6 polynomial; branch-free so loops over it vectorize. Relative
/// error is a few ulp; inputs are clamped to the finite range.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding and subtracting 1.5·2^23 rounds to the nearest integer
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND) - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

impl Real for f32 {
    #[inline]
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + exp_f32(-self))
    }
}

impl Real for f64 {}

/// Converts an `f64` literal into the engine's element type.
#[inline]
pub fn lit<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("literal representable")
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>, &mut GradSink<F>)>;

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Gradient accumulator handed to backward closures.
pub struct GradSink<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
    wants: Vec<bool>,
}

impl<F: Real> GradSink<F> {
    /// Whether `var` participates in differentiation; closures skip
    /// expensive work for parents that do not.
    #[inline]
    pub fn wants(&self, var: Var) -> bool {
        self.wants[var.0]
    }

    pub fn add(&mut self, var: Var, grad: ArrayD<F>) {
        if !self.wants[var.0] {
            return;
        }
        match &mut self.grads[var.0] {
            Some(acc) => *acc += &grad,
            slot @ None => *slot = Some(grad),
        }
    }

    /// Accumulates in place into the gradient buffer of `var`, creating a
    /// zero buffer of `shape` when none exists yet.
    pub fn accumulate_with(&mut self, var: Var, shape: &[usize], f: impl FnOnce(&mut ArrayD<F>)) {
        if !self.wants[var.0] {
            return;
        }
        let slot = &mut self.grads[var.0];
        if slot.is_none() {
            *slot = Some(ArrayD::zeros(IxDyn(shape)));
        }
        f(slot.as_mut().expect("initialized above"));
    }
}

/// Identifies a trainable array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of named arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<F>> {
        self.values.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(ArrayD::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Same names in the same order with the same shapes.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }
}

/// Records operations and runs reverse-mode differentiation over them.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A graph that never records backward closures.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_rc(&self, v: Var) -> Rc<ArrayD<F>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a zero- or one-element node.
    pub fn scalar(&self, v: Var) -> F {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "node is not a scalar");
        *value.iter().next().expect("one element")
    }

    /// Leaf node that is never differentiated.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf node for a trainable parameter. Repeated calls for the same id
    /// return the same node so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let grad = self.grad_enabled;
        let v = self.push_leaf(store.get(id).clone(), grad);
        self.params.insert(id, v);
        v
    }

    /// Leaf with gradient tracking; used by tests and probes.
    pub fn variable(&mut self, value: ArrayD<F>) -> Var {
        let grad = self.grad_enabled;
        self.push_leaf(value, grad)
    }

    /// Copy of `v` with no path back to its parents.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value_rc(v);
        self.nodes.push(Node { value, requires_grad: false, backward: None });
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: ArrayD<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Rc::new(value), requires_grad, backward: None });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation result. `backward` is dropped when none of the
    /// parents require gradients.
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<F>,
        parents: &[Var],
        backward: impl Fn(&ArrayD<F>, &mut GradSink<F>) + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let backward: Option<BackwardFn<F>> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node { value: Rc::new(value), requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Runs backpropagation from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let n = self.nodes.len();
        let mut sink = GradSink {
            grads: (0..n).map(|_| None).collect(),
            wants: self.nodes.iter().map(|node| node.requires_grad).collect(),
        };
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        if self.nodes[root.0].requires_grad {
            sink.grads[root.0] = Some(ArrayD::from_elem(self.value(root).raw_dim(), F::one()));
        }
        for i in (0..=root.0).rev() {
            let Some(grad) = sink.grads[i].take() else { continue };
            match &self.nodes[i].backward {
                Some(back) => back(&grad, &mut sink),
                None => sink.grads[i] = Some(grad),
            }
        }
        let params = self
            .params
            .iter()
            .filter_map(|(pid, var)| sink.grads[var.0].take().map(|g| (*pid, g)))
            .collect();
        Gradients { params, leaves: sink.grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F: Real> {
    params: HashMap<ParamId, ArrayD<F>>,
    leaves: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<F>> {
        self.params.get(&id)
    }

    /// Gradient of a non-parameter leaf created with [`Graph::variable`].
    pub fn leaf(&self, v: Var) -> Option<&ArrayD<F>> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> HashMap<ParamId, ArrayD<F>> {
        self.params
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares the analytic gradient of `f` at every entry of each input
    /// with a central finite difference.
    pub fn check_gradients(inputs: &[ArrayD<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.leaf(vars[k]).cloned().unwrap_or_else(|| ArrayD::zeros(x.raw_dim()));
            for idx in 0..x.len() {
                let eval = |delta: f64| {
                    let mut perturbed: Vec<ArrayD<f64>> = inputs.to_vec();
                    perturbed[k].as_slice_mut().unwrap()[idx] += delta;
                    let mut g = Graph::new();
                    let vars: Vec<Var> = perturbed.into_iter().map(|p| g.variable(p)).collect();
                    let out = f(&mut g, &vars);
                    g.scalar(out)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k} entry {idx}: analytic {a} numeric {numeric}");
            }
        }
    }
}
