use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::params::ParamStore;

/// Dense f64 array with dynamic rank; the only value type on the tape.
pub type Array = ArrayD<f64>;

type BackwardFn = Box<dyn Fn(&Array) -> Vec<Option<Array>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A recording tape. Every op on a [`Var`] appends a node; [`Graph::backward`]
/// walks the nodes in reverse.
///
/// Parameters are bound lazily from a [`ParamStore`]: the first call to
/// [`Graph::param`] for a name creates a leaf, later calls return the same leaf,
/// so weights shared between two forward paths accumulate one gradient.
pub struct Graph<'s> {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
    store: &'s ParamStore,
    frozen: Box<dyn Fn(&str) -> bool + 's>,
    bound: RefCell<HashMap<String, (usize, Arc<Array>)>>,
    accessed: RefCell<BTreeSet<String>>,
}

static EMPTY_STORE: ParamStore = ParamStore::new();

impl Graph<'static> {
    /// A tape without any parameter store; use [`Graph::leaf`] and
    /// [`Graph::constant`] to introduce values.
    pub fn new() -> Self {
        Graph::with_params(&EMPTY_STORE)
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// Binds `store`; every parameter is trainable.
    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
            store,
            frozen: Box::new(|_| false),
            bound: RefCell::new(HashMap::new()),
            accessed: RefCell::new(BTreeSet::new()),
        }
    }

    /// Binds `store`; names for which `frozen` returns true become constants.
    pub fn with_frozen(store: &'s ParamStore, frozen: impl Fn(&str) -> bool + 's) -> Self {
        Graph {
            frozen: Box::new(frozen),
            ..Graph::with_params(store)
        }
    }

    /// Binds `store` with recording disabled: no backward closures are kept.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::with_params(store)
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of every parameter that was looked up on this tape.
    pub fn accessed_params(&self) -> BTreeSet<String> {
        self.accessed.borrow().clone()
    }

    fn push_node(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf_inner(Arc::new(value.as_standard_layout().into_owned()), false)
    }

    /// A value that receives a gradient (when recording is enabled).
    pub fn leaf(&self, value: Array) -> Var<'_> {
        self.leaf_inner(
            Arc::new(value.as_standard_layout().into_owned()),
            self.grad_enabled,
        )
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn leaf_inner(&self, value: Arc<Array>, requires_grad: bool) -> Var<'_> {
        let id = self.push_node(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            graph: self.reborrow(),
            id,
            value,
        }
    }

    // Graph is covariant in 's, so &'a Graph<'s> shortens to &'a Graph<'a>.
    fn reborrow(&self) -> &Graph<'_> {
        self
    }

    /// Looks up a parameter by name.
    ///
    /// # Panics
    /// Panics if the bound store has no such parameter; parameter names are
    /// fixed by the architecture so a miss is a programming error.
    pub fn param(&self, name: &str) -> Var<'_> {
        self.accessed.borrow_mut().insert(name.to_string());
        if let Some((id, value)) = self.bound.borrow().get(name) {
            return Var {
                graph: self.reborrow(),
                id: *id,
                value: Arc::clone(value),
            };
        }
        let value = self
            .store
            .get_arc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not in the store"));
        let trainable = self.grad_enabled && !(self.frozen)(name);
        let var = self.leaf_inner(value, trainable);
        self.bound
            .borrow_mut()
            .insert(name.to_string(), (var.id, Arc::clone(&var.value)));
        var
    }

    /// Whether the bound store holds `name`; does not count as an access.
    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Appends an op result. `backward` maps the output gradient to one
    /// optional gradient per parent, in order.
    pub fn record<F>(&self, value: Array, parents: &[&Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Array) -> Vec<Option<Array>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let value = Arc::new(if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        });
        let id = if requires_grad {
            self.push_node(Node {
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
                requires_grad,
            })
        } else {
            self.push_node(Node {
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
            })
        };
        Var {
            graph: self.reborrow(),
            id,
            value,
        }
    }

    /// Reverse pass from a scalar. Gradients are kept for leaves only.
    ///
    /// # Panics
    /// Panics if `output` is not a single-element value.
    pub fn backward(&self, output: &Var<'_>) -> Gradients {
        assert_eq!(
            output.value.len(),
            1,
            "backward needs a scalar output, got shape {:?}",
            output.value.shape()
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Array>> = vec![None; output.id + 1];
        grads[output.id] = Some(ArrayD::from_elem(output.value.raw_dim(), 1.0));
        let mut leaves = HashMap::new();
        for id in (0..=output.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    leaves.insert(id, grad);
                }
                Some(f) => {
                    let parent_grads = f(&grad);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[pid].requires_grad {
                            continue;
                        }
                        match &mut grads[pid] {
                            Some(acc) => *acc += &pg,
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        let params = self
            .bound
            .borrow()
            .iter()
            .map(|(name, (id, _))| (name.clone(), *id))
            .collect();
        Gradients { leaves, params }
    }
}

/// Leaf gradients from one reverse pass.
pub struct Gradients {
    leaves: HashMap<usize, Array>,
    params: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient of a leaf, `None` if it did not influence the output.
    pub fn get(&self, var: &Var<'_>) -> Option<&Array> {
        self.leaves.get(&var.id)
    }

    /// Gradient of a leaf, zeros if it did not influence the output.
    pub fn get_or_zeros(&self, var: &Var<'_>) -> Array {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(var.value.raw_dim()))
    }

    /// Gradients of every trainable bound parameter that was reached.
    pub fn params(&self) -> BTreeMap<String, Array> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.leaves.get(id).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params.get(name).and_then(|id| self.leaves.get(id))
    }
}

/// Handle to a value on a [`Graph`].
#[derive(Clone)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph<'g>,
    pub(crate) id: usize,
    pub(crate) value: Arc<Array>,
}

impl<'g> Var<'g> {
    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<'g> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Single-element value as a scalar.
    ///
    /// # Panics
    /// Panics if the value has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    /// Same value, cut from the tape (stop-gradient).
    pub fn detach(&self) -> Var<'g> {
        self.graph.leaf_inner(Arc::clone(&self.value), false)
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
