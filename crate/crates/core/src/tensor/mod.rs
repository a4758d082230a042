//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable operation records its inputs and a backward closure
//! on the output tensor. Calling [`Tensor::backward`] on a scalar walks the
//! recorded graph in reverse creation order and accumulates gradients into
//! every reachable tensor that requires them.
//!
//! Gradients accumulate across calls: callers reset them with
//! [`Tensor::zero_grad`] between optimization steps.
//!
//! Tensors are generic over [`Scalar`], so the same model code runs in `f32`
//! for training and in `f64` for finite-difference verification.

mod gradcheck;
mod ops;
mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use ops::{
    add, add_const, batched_matmul, concat_rows, conv1d, conv1d_channels_last, cross_entropy,
    dropout, embedding, gather_rows, glu, linear, matmul, mul, mul_const, reshape, scale, sigmoid,
    softmax, sub, sum, transpose_last2, weighted_sum,
};
pub use optim::{Adam, AdamState};

/// Floating-point element type of a tensor.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Guard returned by [`no_grad`]; graph recording resumes when it drops.
pub struct NoGradGuard {
    prev: bool,
}

/// Disables graph recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Computes input gradients from the output gradient. Entry `i` of the result
/// belongs to input `i`; `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Reference-counted handle to a tensor node. Cloning is cheap and shares
/// data, gradient and graph position.
pub struct Tensor<T = f32> {
    node: Rc<Node<T>>,
}

impl<T> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad);
        if let Some(g) = &self.node.grad_fn {
            s.field("op", &g.op);
        }
        if numel(&self.node.shape) <= 16 {
            s.field("data", &*self.node.data.borrow());
        }
        s.finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn from_node(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Creates a constant tensor. Fails when the data length does not match
    /// the shape or an extent is zero.
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::from_node(data, shape.to_vec(), false, None))
    }

    /// Creates a leaf tensor that collects gradients.
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        check_shape(&data, shape)?;
        Ok(Self::from_node(data, shape.to_vec(), true, None))
    }

    pub fn scalar(v: T) -> Self {
        Self::from_node(vec![v], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_node(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    /// Builds the output of a custom differentiable operation.
    ///
    /// The graph edge is only recorded when recording is enabled and at least
    /// one input requires a gradient; otherwise the result is a constant.
    pub fn from_op(
        data: Vec<T>,
        shape: Vec<usize>,
        op: &'static str,
        inputs: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        if track {
            Self::from_node(
                data,
                shape,
                true,
                Some(GradFn {
                    op,
                    inputs,
                    backward,
                }),
            )
        } else {
            Self::from_node(data, shape, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values. Intended for optimizers and
    /// finite-difference perturbation of leaves; mutating a tensor that was
    /// already used in a recorded graph invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A constant copy that is cut off from the graph.
    pub fn detach(&self) -> Self {
        Self::from_node(self.to_vec(), self.node.shape.clone(), false, None)
    }

    /// Name of the operation that produced this tensor, if recorded.
    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.op)
    }

    /// Back-propagates from this scalar through the recorded graph.
    ///
    /// Gradients are added to whatever is already stored on each tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.node.id);
        while let Some(t) = stack.pop() {
            if let Some(g) = &t.node.grad_fn {
                for input in &g.inputs {
                    if input.requires_grad() && seen.insert(input.node.id) {
                        stack.push(input.clone());
                    }
                }
            }
            order.push(t);
        }
        // Outputs are always created after their inputs, so descending ids
        // form a reverse topological order.
        order.sort_unstable_by(|a, b| b.node.id.cmp(&a.node.id));

        let mut pending: HashMap<usize, Vec<T>> = HashMap::new();
        pending.insert(self.node.id, vec![T::one()]);
        for t in &order {
            let Some(g) = pending.remove(&t.node.id) else {
                continue;
            };
            {
                let mut stored = t.node.grad.borrow_mut();
                match stored.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => *stored = Some(g.clone()),
                }
            }
            if let Some(grad_fn) = &t.node.grad_fn {
                let input_grads = (grad_fn.backward)(&g);
                debug_assert_eq!(input_grads.len(), grad_fn.inputs.len());
                for (input, ig) in grad_fn.inputs.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !input.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), input.numel(), "{}", grad_fn.op);
                    match pending.get_mut(&input.node.id) {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                        None => {
                            pending.insert(input.node.id, ig);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shape<T>(data: &[T], shape: &[usize]) -> Result<()> {
    if shape.contains(&0) || numel(shape) != data.len() {
        return Err(Error::Shape {
            op: "tensor",
            lhs: shape.to_vec(),
            rhs: vec![data.len()],
        });
    }
    Ok(())
}

/// Converts a tensor between scalar types, producing a constant.
pub fn cast<A: Scalar, B: Scalar>(t: &Tensor<A>) -> Tensor<B> {
    let data = t
        .data()
        .iter()
        .map(|v| B::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(B::nan()))
        .collect();
    Tensor::from_node(data, t.shape().to_vec(), false, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_on_scalars() {
        let x = Tensor::<f64>::param(vec![3.0], &[]).unwrap();
        let y = Tensor::<f64>::param(vec![-2.5], &[]).unwrap();
        let z = mul(&x, &y).unwrap();
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![-2.5]);
        assert_eq!(y.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn detached_tensor_gets_no_grad() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = x.detach();
        let z = sum(&mul(&x, &d).unwrap());
        z.backward().unwrap();
        assert!(d.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::<f32>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalar(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        let y = sum(&mul(&x, &x).unwrap());
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn intermediates_receive_grads() {
        let x = Tensor::<f64>::param(vec![1.0, -1.0], &[2]).unwrap();
        let h = scale(&x, 3.0);
        let y = sum(&h);
        y.backward().unwrap();
        assert_eq!(h.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::<f32>::param(vec![1.0], &[1]).unwrap();
        let y = {
            let _g = no_grad();
            scale(&x, 2.0)
        };
        assert!(!y.requires_grad());
        let z = scale(&x, 2.0);
        assert!(z.requires_grad());
    }

    #[test]
    fn rejects_bad_shape() {
        assert!(Tensor::<f32>::new(vec![1.0; 5], &[2, 2]).is_err());
        assert!(Tensor::<f32>::new(vec![], &[0]).is_err());
    }
}
