//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; each op
//! stores its output value and a backward closure. [`Tape::backward`]
//! walks the list in reverse, accumulating gradients. Single-threaded by
//! construction: one tape per forward pass, processed in id order, so
//! runs are bitwise deterministic under fixed inputs.
//!
//! Generic over the element type so the training path can run in `f32`
//! while gradient checks run in `f64`.

mod ops;
mod spatial;

pub mod gradcheck;

pub use spatial::{conv2d_shape, conv_transpose2d_shape};
pub(crate) use ops::to_std;

use ndarray::{ArrayD, LinalgScalar, ScalarOperand};
use std::cell::RefCell;
use std::fmt;

/// Element types the tape can differentiate through (`f32`, `f64`).
pub trait Elem:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tx(pub(crate) usize);

/// Arguments handed to a backward closure.
pub struct BackArgs<'a, E: Elem> {
    /// Gradient of the loss w.r.t. this node's output.
    pub grad: &'a ArrayD<E>,
    /// This node's forward output.
    pub out: &'a ArrayD<E>,
    /// Forward values of the node's parents, in parent order.
    pub parents: &'a [&'a ArrayD<E>],
    /// Whether each parent needs a gradient; closures may skip work for
    /// parents flagged `false` by returning an empty array in that slot.
    pub needs: &'a [bool],
}

type BackFn<E> = Box<dyn Fn(BackArgs<'_, E>) -> Vec<ArrayD<E>>>;

struct Node<E: Elem> {
    value: ArrayD<E>,
    parents: Vec<usize>,
    back: Option<BackFn<E>>,
    needs_grad: bool,
}

/// Records one forward pass; dropped afterwards.
pub struct Tape<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Gradients indexed by node id, produced by [`Tape::backward`].
pub struct Grads<E: Elem> {
    grads: Vec<Option<ArrayD<E>>>,
}

impl<E: Elem> Grads<E> {
    pub fn get(&self, t: Tx) -> Option<&ArrayD<E>> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, t: Tx) -> Option<ArrayD<E>> {
        self.grads.get_mut(t.0).and_then(|g| g.take())
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Differentiable input (parameter) node.
    pub fn leaf(&self, value: ArrayD<E>) -> Tx {
        self.push(value, Vec::new(), None, true)
    }

    /// Non-differentiable input (data, targets, masks).
    pub fn constant(&self, value: ArrayD<E>) -> Tx {
        self.push(value, Vec::new(), None, false)
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<E>,
        parents: Vec<usize>,
        back: Option<BackFn<E>>,
        leaf_needs: bool,
    ) -> Tx {
        let value = if value.is_standard_layout() {
            value
        } else {
            to_std(value.view())
        };
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = if back.is_none() {
            leaf_needs
        } else {
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        nodes.push(Node {
            value,
            parents,
            back,
            needs_grad,
        });
        Tx(nodes.len() - 1)
    }

    /// Registers an op node. `parents` lists inputs; `back` maps the output
    /// gradient to one gradient per parent (empty arrays for parents whose
    /// `needs` flag is false).
    pub(crate) fn op(&self, value: ArrayD<E>, parents: Vec<Tx>, back: BackFn<E>) -> Tx {
        let ids = parents.iter().map(|t| t.0).collect();
        self.push(value, ids, Some(back), false)
    }

    pub fn value(&self, t: Tx) -> ArrayD<E> {
        self.nodes.borrow()[t.0].value.clone()
    }

    /// Scalar value of a zero-dim (or single-element) node.
    pub fn scalar(&self, t: Tx) -> E {
        let nodes = self.nodes.borrow();
        let v = &nodes[t.0].value;
        debug_assert_eq!(v.len(), 1);
        *v.iter().next().expect("scalar node is empty")
    }

    pub fn shape(&self, t: Tx) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from `root` (any shape; seeded with ones). Gradients of
    /// nodes that do not influence `root`, or that were flagged as not
    /// needing gradients, come back as `None`.
    pub fn backward(&self, root: Tx) -> Grads<E> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<E>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(nodes[root.0].value.raw_dim()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let Some(back) = &nodes[i].back else {
                continue; // leaf: keep its gradient
            };
            let g = grads[i].take().expect("checked above");
            let parent_vals: Vec<&ArrayD<E>> =
                nodes[i].parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = nodes[i]
                .parents
                .iter()
                .map(|&p| nodes[p].needs_grad)
                .collect();
            let pgs = back(BackArgs {
                grad: &g,
                out: &nodes[i].value,
                parents: &parent_vals,
                needs: &needs,
            });
            debug_assert_eq!(pgs.len(), nodes[i].parents.len());
            for ((&p, pg), need) in nodes[i].parents.iter().zip(pgs).zip(&needs) {
                if !need {
                    continue;
                }
                let pg = if pg.is_standard_layout() {
                    pg
                } else {
                    to_std(pg.view())
                };
                debug_assert_eq!(
                    pg.shape(),
                    nodes[p].value.shape(),
                    "backward produced a gradient of the wrong shape"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { grads }
    }
}
