//! Dense row-major tensors with a scoped reverse-mode gradient tape.
//!
//! A [`Tape`] records every operation applied to the [`DiffTensor`]s created
//! on it. [`Tape::backward`] consumes the tape and returns a [`Gradients`]
//! table holding `d root / d node` for every ancestor of the (scalar) root.
//! Trainable parameters live outside any tape as [`Param`]s and are bound to a
//! tape with [`Tape::param`] for a single forward/backward pass.
//!
//! ```
//! use kano_core::tensor::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]);
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert_eq!(grads.wrt(&x), vec![2.0, 4.0, 6.0]);
//! ```

pub mod fft;
pub(crate) mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{KanoError, Result};

pub use fft::{fft2_forward, fft2_inverse, spectral_mix, ComplexGrid, SpectralModes};

type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
    params: HashMap<ParamId, usize>,
}

/// A gradient tape. Cheap to clone: clones share the same recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

#[derive(Clone)]
struct TapeRef {
    tape: Tape,
    id: usize,
    requires_grad: bool,
}

/// A tensor value, optionally attached to a [`Tape`].
///
/// The data is shared (`Rc`), so cloning a `DiffTensor` is cheap and never
/// copies values.
#[derive(Clone)]
pub struct DiffTensor {
    shape: Rc<[usize]>,
    data: Rc<Vec<f64>>,
    node: Option<TapeRef>,
}

impl std::fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffTensor")
            .field("shape", &self.shape)
            .field("attached", &self.node.is_some())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(data: &[f64], shape: &[usize]) {
    assert!(
        shape.iter().all(|&e| e > 0),
        "tensor extents must be positive, got {shape:?}"
    );
    assert_eq!(
        data.len(),
        numel(shape),
        "data length {} does not match shape {:?}",
        data.len(),
        shape
    );
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "cannot record on a consumed tape");
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    fn record_leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> DiffTensor {
        check_shape(&data, shape);
        let id = self.push(Node {
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        DiffTensor {
            shape: shape.into(),
            data: Rc::new(data),
            node: Some(TapeRef {
                tape: self.clone(),
                id,
                requires_grad,
            }),
        }
    }

    /// A differentiable leaf.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> DiffTensor {
        self.record_leaf(data, shape, true)
    }

    /// A leaf that never accumulates gradient.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> DiffTensor {
        self.record_leaf(data, shape, false)
    }

    /// Binds a parameter to this tape. Binding the same parameter twice
    /// returns the same node.
    pub fn param(&self, p: &Param) -> DiffTensor {
        if let Some(&id) = self.inner.borrow().params.get(&p.id) {
            return DiffTensor {
                shape: p.shape.as_slice().into(),
                data: Rc::new(p.data.clone()),
                node: Some(TapeRef {
                    tape: self.clone(),
                    id,
                    requires_grad: true,
                }),
            };
        }
        let t = self.leaf(p.data.clone(), &p.shape);
        let id = t.node.as_ref().map(|n| n.id).unwrap_or_default();
        self.inner.borrow_mut().params.insert(p.id, id);
        t
    }

    /// Lifts a detached tensor onto this tape as a constant. Attached tensors
    /// must already belong to this tape.
    pub fn attach(&self, t: &DiffTensor) -> Result<DiffTensor> {
        match &t.node {
            Some(n) if Rc::ptr_eq(&n.tape.inner, &self.inner) => Ok(t.clone()),
            Some(_) => Err(KanoError::contract("tensor belongs to a different tape")),
            None => Ok(self.constant((*t.data).clone(), &t.shape)),
        }
    }

    /// Records an operation output.
    pub(crate) fn op(
        &self,
        parents: &[&DiffTensor],
        data: Vec<f64>,
        shape: &[usize],
        backward: BackwardFn,
    ) -> DiffTensor {
        check_shape(&data, shape);
        let parent_ids: Vec<usize> = parents
            .iter()
            .map(|p| p.node.as_ref().expect("op parents are attached").id)
            .collect();
        let requires_grad = parents
            .iter()
            .any(|p| p.node.as_ref().is_some_and(|n| n.requires_grad));
        let id = self.push(Node {
            parents: parent_ids,
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        DiffTensor {
            shape: shape.into(),
            data: Rc::new(data),
            node: Some(TapeRef {
                tape: self.clone(),
                id,
                requires_grad,
            }),
        }
    }

    /// Propagates `d root / d node` to every ancestor of `root` and consumes
    /// the tape.
    pub fn backward(&self, root: &DiffTensor) -> Result<Gradients> {
        let root_ref = root.node.as_ref().ok_or(KanoError::Detached)?;
        if !Rc::ptr_eq(&root_ref.tape.inner, &self.inner) {
            return Err(KanoError::contract("root belongs to a different tape"));
        }
        if root.len() != 1 {
            return Err(KanoError::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let (nodes, params) = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(KanoError::Detached);
            }
            inner.consumed = true;
            (
                std::mem::take(&mut inner.nodes),
                std::mem::take(&mut inner.params),
            )
        };
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root_ref.requires_grad {
            grads[root_ref.id] = Some(vec![1.0]);
        }
        for id in (0..=root_ref.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // interior nodes do not need their gradient after propagation
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads, params })
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient with respect to a leaf; zeros when the root does not depend on
    /// it.
    pub fn wrt(&self, t: &DiffTensor) -> Vec<f64> {
        t.node
            .as_ref()
            .and_then(|n| self.grads.get(n.id).and_then(|g| g.clone()))
            .unwrap_or_else(|| vec![0.0; t.len()])
    }

    /// Gradient with respect to a bound parameter, if it was bound and reached.
    pub fn param(&self, p: &Param) -> Option<&[f64]> {
        self.params
            .get(&p.id)
            .and_then(|&id| self.grads.get(id))
            .and_then(|g| g.as_deref())
    }
}

impl DiffTensor {
    /// A tensor that is not recorded on any tape.
    pub fn detached(data: Vec<f64>, shape: &[usize]) -> Self {
        check_shape(&data, shape);
        DiffTensor {
            shape: shape.into(),
            data: Rc::new(data),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::detached(vec![value], &[1])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (*self.data).clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.as_ref().is_some_and(|n| n.requires_grad)
    }

    /// Returns a copy that is not recorded on any tape.
    pub fn detach(&self) -> DiffTensor {
        DiffTensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}

/// Identifier tying a [`Param`] to the tape node it is bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

static NEXT_PARAM: AtomicU64 = AtomicU64::new(0);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable array, stored outside any tape.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Clone for Param {
    /// Clones get a fresh identity so two models never alias on a tape.
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            name: self.name.clone(),
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        check_shape(&data, shape);
        Param {
            id: ParamId::fresh(),
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, shape, vec![0.0; numel(shape)])
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}
