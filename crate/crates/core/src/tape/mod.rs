//! Minimal reverse-mode automatic differentiation over dynamic-dimension
//! f64 tensors.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes, each
//! holding its value and a backward closure that maps the node's output
//! cotangent to cotangents for its parents. [`Tape::backward`] then runs a
//! single reverse sweep from a scalar root. Tapes are rebuilt per step;
//! values are reference-counted so closures capture them cheaply.
//!
//! The op set is deliberately small: elementwise arithmetic, reductions,
//! dense matmul, row gather/scatter, the 3-D network kernels (convolution,
//! instance normalization, trilinear resize), and a handful of geometry
//! primitives. Domain modules add their own custom nodes (B-spline warp,
//! Chamfer distance) through [`Tape::custom`]. Every adjoint is validated
//! against central finite differences in the test suites.

mod kernels;
mod ops;

pub mod check;

pub use kernels::{conv3d_forward, resize3d_tables};

use ndarray::{ArrayD, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    parents: Vec<usize>,
    backward: Option<BackFn>,
}

/// Records a single forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Grads {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var<'_>) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of the root with respect to `v`, zeros when unreached.
    pub fn wrt(&self, v: Var<'_>) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input. Leaves have no backward closure; gradients
    /// accumulate into them during the reverse sweep.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Vec::new(), None)
    }

    /// Record a scalar input as a 0-d tensor.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Record a custom node. `backward` receives the output cotangent and
    /// must return one cotangent per parent, in order, with matching shapes.
    pub fn custom(
        &self,
        value: ArrayD<f64>,
        parents: &[Var<'_>],
        backward: impl Fn(&ArrayD<f64>) -> Vec<ArrayD<f64>> + 'static,
    ) -> Var<'_> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(backward)))
    }

    fn push(&self, value: ArrayD<f64>, parents: Vec<usize>, backward: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var { tape: self, id }
    }

    fn node_value(&self, id: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar root. Panics if the root is not a
    /// single-element tensor.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(ArrayD::ones(nodes[root.id].value.raw_dim()));

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&g);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (pid, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[*pid].value.shape(),
                        "cotangent shape mismatch into node {pid}"
                    );
                    match &mut grads[*pid] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // Leaves keep their accumulated gradient.
            if node.backward.is_none() {
                grads[id] = Some(g);
            }
        }
        Grads { grads }
    }
}

impl<'t> Var<'t> {
    /// The recorded value.
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.node_value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar content of a single-element tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on non-scalar");
        *v.iter().next().unwrap()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }
}
