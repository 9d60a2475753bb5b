//! The tape: a topologically ordered list of nodes, each with a value and an
//! optional backward closure. `backward()` walks the list in reverse.

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) type BackwardFn = Box<dyn Fn(&[Tensor], &mut Grads)>;

pub(crate) struct Node {
    pub requires_grad: bool,
    pub backward: Option<BackwardFn>,
}

/// Gradient buffers, one slot per tape node, allocated lazily.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub(crate) fn new(n: usize) -> Self {
        Grads { slots: (0..n).map(|_| None).collect() }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    /// Takes the gradient out of a slot (used by backward closures to read
    /// their own output gradient without aliasing).
    pub(crate) fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots[v.0].take()
    }

    pub(crate) fn restore(&mut self, v: Var, g: Tensor) {
        self.slots[v.0] = Some(g);
    }

    /// Adds `contribution` into the slot for `v`, allocating it if needed.
    pub fn accumulate(&mut self, v: Var, shape: &[usize], contribution: &[f64]) {
        let slot = &mut self.slots[v.0];
        match slot {
            Some(g) => {
                debug_assert_eq!(g.shape(), shape);
                for (gi, ci) in g.data_mut().iter_mut().zip(contribution) {
                    *gi += *ci;
                }
            }
            None => {
                *slot = Some(Tensor::new(shape, contribution.to_vec()));
            }
        }
    }

    /// In-place accumulate through a closure; allocates zeros if absent.
    pub fn with(&mut self, v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        let slot = &mut self.slots[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

/// Computation tape. Create one per training step / forward pass.
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records no backward closures (inference / teachers).
    pub fn no_grad() -> Self {
        Tape { values: Vec::new(), nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, self.grad_enabled, None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let backward = if requires_grad { backward } else { None };
        self.values.push(value);
        self.nodes.push(Node { requires_grad, backward });
        Var(self.nodes.len() - 1)
    }

    /// Convenience for unary/n-ary ops: requires_grad is inherited from
    /// parents; `backward` receives the full value slice and the grad sink.
    pub(crate) fn push_op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, rg, Some(backward))
    }

    /// Reverse-mode sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.values[root.0].numel(),
            1,
            "backward() root must be scalar"
        );
        let mut grads = Grads::new(self.nodes.len());
        grads.restore(root, Tensor::scalar(1.0));
        for id in (0..=root.0).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(backward) = &self.nodes[id].backward {
                backward(&self.values, &mut grads);
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_has_no_grad() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(c, x);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        assert_eq!(tape.value(y).item(), 9.0);
        assert!(!tape.requires_grad(y));
    }
}
