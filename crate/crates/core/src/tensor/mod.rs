//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only record of operations. [`Tensor`]s created
//! through [`Graph::leaf`] (or produced by an op with at least one attached
//! input) are nodes in that record; tensors made with [`Tensor::constant`]
//! are plain values and never receive gradients.
//!
//! Every backward rule is written in terms of the same differentiable ops,
//! so `backward(.., create_graph = true)` returns gradients that are
//! themselves graph nodes. Losses built from input-gradients can therefore
//! be differentiated again with respect to the parameters.

mod array;
mod backward;
pub mod fd;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use array::{argmax, Array, PAD};
pub use backward::{backward, GradMap};
pub use fd::{finite_difference_grad, gradcheck, scaled_error};
pub use ops::{concat, conv2d, conv_out_extent, embedding_lookup, max_pool2d};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Operation tag recorded for each node, carrying whatever the backward rule
/// needs beyond the input values.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    MatMul,
    Relu,
    Softmax(usize),
    Log,
    Exp,
    Abs,
    Sqrt,
    ClampMin(f64),
    Sum { axis: usize, keepdim: bool },
    SumAll,
    Reshape,
    Permute(Vec<usize>),
    Expand,
    Concat(usize),
    Gather(Rc<[usize]>),
    ScatterAdd(Rc<[usize]>),
}

/// An operand as recorded in a node: its graph id (if attached) and value.
#[derive(Clone)]
pub(crate) struct Input {
    pub id: Option<usize>,
    pub value: Rc<Array>,
}

pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Input>,
    pub value: Rc<Array>,
}

pub(crate) struct GraphInner {
    pub id: u64,
    pub nodes: Vec<Node>,
    pub generation: u64,
}

/// Shared handle to an operation record. Cloning is cheap.
#[derive(Clone)]
pub struct Graph {
    pub(crate) inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
                generation: 0,
            })),
        }
    }

    /// A differentiable input (parameter or data) recorded in this graph.
    pub fn leaf(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, Vec::new(), Rc::new(value))
    }

    /// Process-unique identifier of this graph.
    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of backward passes run over this graph so far.
    pub fn generation(&self) -> u64 {
        self.inner.borrow().generation
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Input>, value: Rc<Array>) -> Tensor {
        let mut g = self.inner.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node {
            op,
            inputs,
            value: Rc::clone(&value),
        });
        Tensor {
            value,
            node: Some(NodeRef {
                graph: self.clone(),
                id,
            }),
        }
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub graph: Graph,
    pub id: usize,
}

/// An array value, optionally attached to a [`Graph`] node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) value: Rc<Array>,
    pub(crate) node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Tensor {
    /// A value outside any graph; it never receives gradient contributions.
    pub fn constant(value: Array) -> Self {
        Tensor {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// The same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    pub(crate) fn as_input(&self) -> Input {
        Input {
            id: self.node_id(),
            value: Rc::clone(&self.value),
        }
    }
}
