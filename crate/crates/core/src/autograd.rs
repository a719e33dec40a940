//! Dynamic reverse-mode tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value and a closure mapping the output gradient to
//! input gradients. Nodes can only reference earlier nodes, so the graph is
//! acyclic by construction and a single reverse sweep over node indices is a
//! valid topological order.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::Tensor4;

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    /// Gradient of the root w.r.t. this node's output, same layout as `output`.
    pub grad: &'a [f64],
    pub inputs: Vec<&'a Tensor4>,
    pub output: &'a Tensor4,
    /// Whether each input needs a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Arc<Tensor4>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    kinks: Option<Cell<u64>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Arc<Tensor4> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> [usize; 4] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that fingerprints every piecewise-linear branch decision
    /// (ReLU signs, max-pool winners, elementwise-max winners). Used by the
    /// gradient checker to detect finite-difference probes that straddle a kink.
    pub fn with_kink_tracking() -> Self {
        Tape {
            kinks: Some(Cell::new(0xcbf2_9ce4_8422_2325)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// An input that gradients are tracked for.
    pub fn leaf(&self, value: Tensor4) -> Var<'_> {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: true,
            param: None,
        })
    }

    pub fn constant(&self, value: Tensor4) -> Var<'_> {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        })
    }

    /// A leaf bound to a parameter slot; its gradient is reported under `param`.
    pub(crate) fn param_leaf(&self, value: Tensor4, param: ParamId, trainable: bool) -> Var<'_> {
        self.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            requires_grad: trainable,
            param: Some(param),
        })
    }

    pub(crate) fn op<'s>(
        &'s self,
        value: Tensor4,
        parents: &[Var<'s>],
        backward: BackwardFn,
    ) -> Var<'s> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        })
    }

    pub fn tracks_kinks(&self) -> bool {
        self.kinks.is_some()
    }

    pub(crate) fn mix_kink(&self, bits: impl IntoIterator<Item = u64>) {
        if let Some(cell) = &self.kinks {
            let mut h = cell.get();
            for b in bits {
                h ^= b;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            cell.set(h);
        }
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks.as_ref().map(Cell::get)
    }

    /// Reverse sweep from a scalar root. A tape supports one sweep.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Usage("root belongs to a different tape".into()));
        }
        if self.consumed.replace(true) {
            return Err(Error::Usage(
                "backward already ran on this tape; build a new tape per forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(vec![1.0]);
        let mut kept: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let ctx = BackwardCtx {
                    grad: &g,
                    inputs: node.parents.iter().map(|&p| &*nodes[p].value).collect(),
                    output: &node.value,
                    needs: node
                        .parents
                        .iter()
                        .map(|&p| nodes[p].requires_grad)
                        .collect(),
                };
                let input_grads = bw(&ctx);
                debug_assert_eq!(input_grads.len(), node.parents.len());
                for (&p, ig) in node.parents.iter().zip(input_grads) {
                    let Some(ig) = ig else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(ig.len(), nodes[p].value.len());
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(ig),
                    }
                }
            }
            if node.parents.is_empty() && node.requires_grad {
                kept[id] = Some(g);
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients {
            leaves: kept,
            shapes: nodes.iter().map(|n| n.value.shape()).collect(),
            params,
        })
    }
}

/// Gradients of the root w.r.t. every leaf that requires them.
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<[usize; 4]>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient for a leaf var, or `None` if it was unreachable or untracked.
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor4> {
        let g = self.leaves.get(var.id)?.as_ref()?;
        Tensor4::from_vec(self.shapes[var.id], g.clone()).ok()
    }

    /// `(param, gradient)` pairs for every parameter leaf on the tape.
    /// Unreachable parameters report zeros.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, std::borrow::Cow<'_, [f64]>)> {
        self.params.iter().map(|&(p, id)| {
            let g = match &self.leaves[id] {
                Some(g) => std::borrow::Cow::Borrowed(g.as_slice()),
                None => {
                    let len = self.shapes[id].iter().product();
                    std::borrow::Cow::Owned(vec![0.0; len])
                }
            };
            (p, g)
        })
    }
}
