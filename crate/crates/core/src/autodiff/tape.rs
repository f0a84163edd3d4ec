use std::collections::HashMap;

use super::ops::Op;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) tracked: bool,
}

/// Define-by-run record of a forward computation.
///
/// Every op appends one node whose inputs are already on the tape, so the
/// node order is a topological order and `backward` is a single reverse
/// sweep. A tape is built per forward pass and dropped afterwards.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    keyed: HashMap<usize, Var>,
    keys: Vec<(usize, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let tracked = match &op {
            Op::Leaf { tracked } => *tracked,
            other => other.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape. Gradients are collected for it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf {
                tracked: t.requires_grad(),
            },
        )
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { tracked: false })
    }

    /// A copy of `v`'s value that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf { tracked: false })
    }

    /// Like [`Tape::leaf`], but deduplicated by `key`: binding the same key
    /// twice returns the same `Var`. Used for named parameters.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.keyed.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        self.keyed.insert(key, v);
        self.keys.push((key, v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub(crate) fn rows_cols(&self, v: Var) -> (usize, usize) {
        let shape = &self.nodes[v.0].shape;
        let cols = *shape.last().unwrap();
        (self.nodes[v.0].value.len() / cols, cols)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns gradients for every tracked leaf reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            node.op.backward(self, node, &gout, &mut grads);
        }
        // Keep only leaf gradients.
        for (i, g) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf { tracked: true }) {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            keys: self.keys.clone(),
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    keys: Vec<(usize, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(key, grad)` for every keyed leaf (see [`Tape::param`]) that received
    /// a gradient, in binding order.
    pub fn keyed(&self) -> impl Iterator<Item = (usize, &[f64])> + '_ {
        self.keys
            .iter()
            .filter_map(|&(k, v)| self.get(v).map(|g| (k, g)))
    }

    /// Adds the gradient of `v` into `t.grad`. Tensors that do not require
    /// grad are left alone.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if !t.requires_grad() {
            return;
        }
        match self.get(v) {
            Some(g) => t.add_grad(g),
            None => t.add_grad(&vec![0.0; t.numel()]),
        }
    }
}

/// Adds `delta` into the gradient slot of `v`, allocating it on first use.
pub(crate) fn accum(grads: &mut [Option<Vec<f64>>], tape: &Tape, v: Var, delta: &[f64]) {
    if !tape.nodes[v.0].tracked {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Mutable gradient slot for `v`, or `None` when `v` is untracked.
pub(crate) fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    tape: &Tape,
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    if !tape.nodes[v.0].tracked {
        return None;
    }
    let n = tape.nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}
