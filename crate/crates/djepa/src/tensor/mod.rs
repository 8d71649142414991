//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns row-major f64 storage and is immutable after creation.
//! Attaching a tensor to a [`Tape`] (by creating it via [`Tape::leaf`] or by
//! deriving it from attached inputs) records every operation as a node;
//! [`Tape::backward`] replays the nodes in reverse and returns gradients for
//! the leaves. Detached tensors flow through the same operations without any
//! recording, which is how forward-only paths (sampling, evaluation) run.
//!
//! All math is in 64-bit floats and single-threaded; identical inputs produce
//! bit-identical outputs.

mod ops;

pub use ops::{concat, scaled_dot_attention};

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward function of one node: receives the output gradient, returns one
/// gradient buffer per input slot (`None` for detached inputs).
type BackFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    kind: &'static str,
    /// Parent node ids, aligned with the gradients returned by `backward`.
    /// `None` marks an input that was not attached to the tape.
    inputs: Vec<Option<usize>>,
    numel: usize,
    is_leaf: bool,
    backward: BackFn,
}

struct TapeInner {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradient tape. Cloning the handle shares the same tape.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
                consumed: Cell::new(false),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Operation kinds in recording order (debugging aid).
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.inner.nodes.borrow().iter().map(|n| n.kind).collect()
    }

    /// Create a tensor attached to this tape as a gradient leaf.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert!(
            !self.inner.consumed.get(),
            "tape already consumed by backward"
        );
        let t = Tensor::from_vec(data, shape);
        let id = self.push(Node {
            kind: "leaf",
            inputs: vec![],
            numel: t.numel(),
            is_leaf: true,
            backward: Box::new(|_| vec![]),
        });
        Tensor {
            node: Some((self.clone(), id)),
            ..t
        }
    }

    fn push(&self, node: Node) -> usize {
        debug_assert!(
            node.inputs.iter().flatten().all(|&i| {
                // inputs always precede the node
                i < self.inner.nodes.borrow().len()
            }),
            "tape topological order violated"
        );
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Reverse pass from a scalar loss. Consumes the tape: no further
    /// operations may be recorded on it afterwards.
    ///
    /// Performs exactly one visit per recorded node.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let (tape, loss_id) = loss
            .node
            .as_ref()
            .ok_or_else(|| Error::invalid("backward: loss is not attached to a tape"))?;
        if !Rc::ptr_eq(&tape.inner, &self.inner) {
            return Err(Error::invalid("backward: loss belongs to a different tape"));
        }
        if loss.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if self.inner.consumed.replace(true) {
            return Err(Error::invalid("backward: tape already consumed"));
        }

        let nodes = self.inner.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[*loss_id] = Some(vec![1.0]);

        let mut visits = 0usize;
        for id in (0..n).rev() {
            visits += 1;
            let node = &nodes[id];
            let keep_leaf = node.is_leaf;
            let g = if keep_leaf {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(g) = g else { continue };
            let contributions = (node.backward)(&g);
            debug_assert_eq!(contributions.len(), node.inputs.len());
            for (slot, contrib) in node.inputs.iter().zip(contributions) {
                let (Some(pid), Some(c)) = (slot, contrib) else {
                    continue;
                };
                let buf = grads[*pid].get_or_insert_with(|| vec![0.0; nodes[*pid].numel]);
                debug_assert_eq!(buf.len(), c.len());
                for (b, v) in buf.iter_mut().zip(&c) {
                    *b += v;
                }
            }
        }

        Ok(Gradients {
            tape: self.clone(),
            grads,
            visits,
        })
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf tensor.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
    visits: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is an attached leaf
    /// that received gradient.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let (tape, id) = t.node.as_ref()?;
        if !Rc::ptr_eq(&tape.inner, &self.tape.inner) {
            return None;
        }
        self.grads[*id].as_deref()
    }

    /// Number of node visits the backward pass performed.
    pub fn visits(&self) -> usize {
        self.visits
    }
}

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; shape.iter().product()], shape)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; shape.iter().product()], shape)
    }

    pub fn randn(shape: &[usize], stream: &mut crate::rng::Stream) -> Tensor {
        Tensor::from_vec(stream.normal_vec(shape.iter().product()), shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Same values, no tape participation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// True iff every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<&Tape> = None;
        for t in inputs {
            if let Some((tape, _)) = &t.node {
                match found {
                    None => found = Some(tape),
                    Some(prev) => assert!(
                        Rc::ptr_eq(&prev.inner, &tape.inner),
                        "operation mixes tensors from different tapes"
                    ),
                }
            }
        }
        found.cloned()
    }

    /// Record `out` as the result of `kind` over `inputs`. No-op (returns a
    /// detached tensor) when no input is attached.
    pub(crate) fn record(
        kind: &'static str,
        inputs: &[&Tensor],
        out_data: Rc<Vec<f64>>,
        out_shape: &[usize],
        backward: BackFn,
    ) -> Tensor {
        let numel: usize = out_shape.iter().product();
        assert_eq!(out_data.len(), numel);
        let out = Tensor {
            shape: out_shape.to_vec(),
            data: out_data,
            node: None,
        };
        let Some(tape) = Tensor::tape_of(inputs) else {
            return out;
        };
        assert!(
            !tape.inner.consumed.get(),
            "recording op `{kind}` on a consumed tape"
        );
        let ids: Vec<Option<usize>> = inputs
            .iter()
            .map(|t| t.node.as_ref().map(|(_, id)| *id))
            .collect();
        let id = tape.push(Node {
            kind,
            inputs: ids,
            numel: out.numel(),
            is_leaf: false,
            backward,
        });
        Tensor {
            node: Some((tape, id)),
            ..out
        }
    }
}

/// True iff all entries of `t` are finite (no NaN or infinity).
pub fn check_finite(t: &Tensor) -> bool {
    t.is_finite()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]);
        assert_eq!(x.shape(), &[3]);
        assert!(x.is_attached());
        assert!(!x.detach().is_attached());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]);
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]);
        let loss = x.sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_analytic() {
        // loss = sum(x ⊙ x) at x = [1, 2] → grad [2, 4]
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]);
        let loss = x.mul(&x).unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn tape_visits_every_node_once() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]);
        let y = x.mul(&x).unwrap();
        let z = y.add(&x).unwrap();
        let loss = z.sum_all().unwrap();
        let n = tape.len();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.visits(), n);
    }

    #[test]
    fn tape_consumed_after_backward() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[1]);
        let loss = x.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn detached_inputs_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1]);
        let c = Tensor::from_vec(vec![3.0], &[1]);
        let loss = x.mul(&c).unwrap().sum_all().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[3.0]);
        assert!(grads.get(&c).is_none());
    }

    #[test]
    fn check_finite_cases() {
        assert!(check_finite(&Tensor::zeros(&[4])));
        assert!(!check_finite(&Tensor::from_vec(vec![1.0, f64::INFINITY], &[2])));
        assert!(!check_finite(&Tensor::from_vec(vec![f64::NAN], &[1])));
    }
}
