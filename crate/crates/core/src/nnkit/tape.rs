//! Reverse-mode composition record.
//!
//! Operators append nodes to a [`Tape`] as they execute. Node indices are a
//! topological order, so the reverse pass walks the tape backwards once and
//! every node is visited exactly once after all of its consumers. Gradients
//! flowing into a node from several consumers are summed.

use crate::nnkit::param::{ParamId, ParamStore};
use crate::nnkit::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of one operator application.
pub trait Backward {
    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        grad_out: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, None, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Vec::new(), None, None, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push_node(value, Vec::new(), None, Some(id), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, inputs: Vec<Var>, op: Box<dyn Backward>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, inputs, Some(op), None, requires_grad)
    }

    fn push_node(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        op: Option<Box<dyn Backward>>,
        param: Option<ParamId>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            op,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        let seed = Tensor::filled(self.value(output).shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Reverse pass seeded with an arbitrary cotangent of `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.value(output).shape(),
            "seed shape must match the output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = op.backward(&g, &inputs, &node.value, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((v, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else { continue };
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (i, p)))
            .collect();
        Gradients { grads, params }
    }
}

/// Gradients of the leaves and parameters reached by a reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Add parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let p = store.get_mut(id);
                for (acc, x) in p.grad.iter_mut().zip(g.data()) {
                    *acc += x;
                }
            }
        }
    }
}
