use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Computes input gradients from the output gradient. The flag slice says
/// which inputs need one; entries for the others may be `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Record {
    inputs: Vec<Option<usize>>,
    output: usize,
    backward: BackwardFn,
}

#[derive(Default)]
struct TapeInner {
    records: Vec<Record>,
    is_leaf: Vec<bool>,
    grads: Vec<Option<Tensor>>,
}

/// Wengert list of recorded operations.
///
/// Nodes are numbered in creation order, so every record's inputs precede
/// its output, and `backward` replays records strictly in reverse.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.is_leaf.len())
            .field("records", &inner.records.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `value` as a gradient-tracked leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.new_node(true);
        Var {
            value,
            node: Some(Node {
                tape: self.clone(),
                id,
            }),
        }
    }

    pub fn num_records(&self) -> usize {
        self.inner.borrow().records.len()
    }

    fn new_node(&self, leaf: bool) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.is_leaf.push(leaf);
        inner.is_leaf.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

#[derive(Clone)]
struct Node {
    tape: Tape,
    id: usize,
}

/// A tensor value, optionally attached to a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Tensor,
    node: Option<Node>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("value", &self.value)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl From<Tensor> for Var {
    fn from(value: Tensor) -> Self {
        Var::constant(value)
    }
}

impl Var {
    /// An untracked value.
    pub fn constant(value: Tensor) -> Self {
        Self { value, node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn into_value(self) -> Tensor {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    /// Gradient accumulated by the last [`Var::backward`] on this var's tape.
    pub fn grad(&self) -> Option<Tensor> {
        let node = self.node.as_ref()?;
        let inner = node.tape.inner.borrow();
        inner.grads.get(node.id).cloned().flatten()
    }

    /// Records an operation producing `value` from `inputs`.
    ///
    /// The result is untracked if no input is on a tape.
    pub(crate) fn record(inputs: &[&Var], value: Tensor, backward: BackwardFn) -> Var {
        let Some(tape) = inputs.iter().find_map(|v| v.tape()).cloned() else {
            return Var::constant(value);
        };
        let ids = inputs
            .iter()
            .map(|v| {
                v.node.as_ref().map(|n| {
                    assert!(n.tape.same(&tape), "operation mixes vars from different tapes");
                    n.id
                })
            })
            .collect();
        let id = tape.new_node(false);
        tape.inner.borrow_mut().records.push(Record {
            inputs: ids,
            output: id,
            backward,
        });
        Var {
            value,
            node: Some(Node { tape, id }),
        }
    }

    /// Reverse-mode sweep from this scalar; leaf gradients become available
    /// through [`Var::grad`].
    pub fn backward(&self) -> Result<()> {
        if self.value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.value.shape().to_vec()));
        }
        let node = self.node.as_ref().ok_or(Error::NoTape)?;
        let mut inner = node.tape.inner.borrow_mut();
        let inner = &mut *inner;
        let nodes = inner.is_leaf.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes];
        grads[node.id] = Some(Tensor::ones(self.value.shape().to_vec()));

        for record in inner.records.iter().rev() {
            if record.output > node.id {
                continue;
            }
            let Some(g_out) = (if inner.is_leaf[record.output] {
                grads[record.output].clone()
            } else {
                grads[record.output].take()
            }) else {
                continue;
            };
            let needs: Vec<bool> = record.inputs.iter().map(Option::is_some).collect();
            let input_grads = (record.backward)(&g_out, &needs);
            for (slot, g) in record.inputs.iter().zip(input_grads) {
                let (Some(id), Some(g)) = (slot, g) else {
                    continue;
                };
                grads[*id] = Some(match grads[*id].take() {
                    None => g,
                    Some(mut acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
        }
        for (id, leaf) in inner.is_leaf.iter().enumerate() {
            if !leaf {
                grads[id] = None;
            }
        }
        inner.grads = grads;
        Ok(())
    }
}
