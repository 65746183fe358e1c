//! Reverse-mode automatic differentiation on a recording tape.
//!
//! A [`Tape`] owns every tensor produced during a forward pass (an arena of
//! [`Node`]s) plus an ordered list of operation records. Each record holds a
//! backward closure that maps the upstream gradient to gradients for its
//! inputs. [`Tape::backward`] walks the records in exact reverse recording
//! order — valid because consumers are always recorded after producers — and
//! accumulates (sums) gradients into nodes that fan out to several ops.
//!
//! Records are only pushed when at least one input requires a gradient, so a
//! forward pass over frozen leaves records nothing and costs no extra memory
//! beyond the value arena itself.
//!
//! The tape can also carry a [`MacCounter`]: a purely analytical tally of
//! multiply-accumulate work, recorded per operation under the current scope
//! path. Counting is arithmetic bookkeeping on the side — enabling it never
//! changes any computed value — and is cheap enough to leave on.

mod ops;

pub use ops::{DropoutKey, GELU_COEFF, GELU_CUBIC, LAYERNORM_DEFAULT_EPS};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Tensor>,
}

/// Arguments handed to a backward closure.
pub(crate) struct BackwardArgs<'a> {
    /// Forward input values, in recording order.
    pub inputs: Vec<&'a Tensor>,
    /// Forward output value.
    pub output: &'a Tensor,
    /// Gradient of the loss w.r.t. the output.
    pub upstream: &'a Tensor,
    /// Which inputs actually need a gradient; closures may skip the rest.
    pub needs: &'a [bool],
}

type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct OpRecord {
    inputs: Vec<NodeId>,
    output: NodeId,
    backward: BackwardFn,
}

/// Analytical tally of multiply-accumulates, grouped by scoped op path.
///
/// Convention used throughout the crate:
/// * `macs` counts one unit per multiply-accumulate in matrix products and
///   convolutions (padding positions included, matching the closed-form
///   window count `k * c_in * c_out` per output element);
/// * `aux_flops` counts one unit per output element of softmax and per
///   element of layer normalisation — the only non-MAC work large enough to
///   show up at this model scale;
/// * a "FLOP" is two MACs, so `flops_total = 2 * macs + aux_flops`.
#[derive(Debug, Default, Clone)]
pub struct MacCounter {
    macs_total: u64,
    macs_by_op: BTreeMap<String, u64>,
    aux_total: u64,
    aux_by_op: BTreeMap<String, u64>,
}

impl MacCounter {
    pub fn macs_total(&self) -> u64 {
        self.macs_total
    }

    /// MAC totals keyed by `scope/.../op` path.
    pub fn macs_by_op(&self) -> &BTreeMap<String, u64> {
        &self.macs_by_op
    }

    /// Non-MAC work (softmax + layernorm elements).
    pub fn aux_flops_total(&self) -> u64 {
        self.aux_total
    }

    pub fn aux_by_op(&self) -> &BTreeMap<String, u64> {
        &self.aux_by_op
    }

    /// Total FLOPs under the two-FLOPs-per-MAC convention, including the
    /// tracked non-MAC work.
    pub fn flops_total(&self) -> u64 {
        2 * self.macs_total + self.aux_total
    }

    /// Sum of MACs over all paths containing `needle` (e.g. all attention
    /// score products of one layer).
    pub fn macs_matching(&self, needle: &str) -> u64 {
        self.macs_by_op
            .iter()
            .filter(|(k, _)| k.contains(needle))
            .map(|(_, v)| v)
            .sum()
    }

    fn record_macs(&mut self, path: String, macs: u64) {
        self.macs_total += macs;
        *self.macs_by_op.entry(path).or_insert(0) += macs;
    }

    fn record_aux(&mut self, path: String, flops: u64) {
        self.aux_total += flops;
        *self.aux_by_op.entry(path).or_insert(0) += flops;
    }
}

/// Recording tape: value arena + op records + optional MAC counter.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<OpRecord>,
    counter: Option<MacCounter>,
    scope: Vec<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            counter: None,
            scope: Vec::new(),
        }
    }

    /// Start tallying MACs (resets any previous counter).
    pub fn enable_mac_counter(&mut self) {
        self.counter = Some(MacCounter::default());
    }

    pub fn mac_counter(&self) -> Option<&MacCounter> {
        self.counter.as_ref()
    }

    /// Run `f` with `label` pushed onto the scope stack; op paths recorded
    /// inside appear as `label/...`.
    pub fn scoped<R>(&mut self, label: impl Into<String>, f: impl FnOnce(&mut Tape) -> R) -> R {
        self.scope.push(label.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn scope_path(scope: &[String], op: &str) -> String {
        if scope.is_empty() {
            op.to_string()
        } else {
            let mut path = scope.join("/");
            path.push('/');
            path.push_str(op);
            path
        }
    }

    pub(crate) fn count_macs(&mut self, op: &str, macs: u64) {
        if let Some(counter) = &mut self.counter {
            counter.record_macs(Self::scope_path(&self.scope, op), macs);
        }
    }

    pub(crate) fn count_aux(&mut self, op: &str, flops: u64) {
        if let Some(counter) = &mut self.counter {
            counter.record_aux(Self::scope_path(&self.scope, op), flops);
        }
    }

    /// Insert an input value. Leaves are the only nodes whose gradients are
    /// of interest to optimisers; activations get theirs as a by-product.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: true,
            grad: None,
        });
        id
    }

    /// Leaf that never receives a gradient (inputs, precomputed masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` call, if this node received
    /// one. Leaves that require a gradient always have one afterwards (zero
    /// if the loss does not depend on them).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_ops(&self) -> usize {
        self.ops.len()
    }

    /// Elements retained by non-leaf nodes — the tape's activation footprint.
    /// This is the deterministic "memory" figure the bench suite reports:
    /// parameters and inputs (leaves) are excluded since they exist
    /// regardless of how much intermediate state a forward pass keeps alive.
    pub fn activation_elements(&self) -> u64 {
        self.nodes
            .iter()
            .filter(|n| !n.is_leaf)
            .map(|n| n.value.numel() as u64)
            .sum()
    }

    /// Record an op's output node, and its backward closure when any input
    /// requires a gradient.
    pub(crate) fn push_op(
        &mut self,
        inputs: &[NodeId],
        value: Tensor,
        backward: BackwardFn,
    ) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let out = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            requires_grad,
            is_leaf: false,
            grad: None,
        });
        if requires_grad {
            self.ops.push(OpRecord {
                inputs: inputs.to_vec(),
                output: out,
                backward,
            });
        }
        out
    }

    /// Reverse sweep from a scalar loss. Gradients are accumulated across
    /// fan-out and stored on the nodes; every leaf with `requires_grad` ends
    /// up with a gradient tensor (zeros when unreached by the loss).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(loss_value.shape().to_vec(), vec![1.0]).unwrap());

        for op in self.ops.iter().rev() {
            let Some(upstream) = grads[op.output.0].clone() else {
                // Output not on any path to the loss; nothing to propagate.
                continue;
            };
            let needs: Vec<bool> = op
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let args = BackwardArgs {
                inputs: op.inputs.iter().map(|id| &self.nodes[id.0].value).collect(),
                output: &self.nodes[op.output.0].value,
                upstream: &upstream,
                needs: &needs,
            };
            let input_grads = (op.backward)(&args);
            debug_assert_eq!(input_grads.len(), op.inputs.len());
            for ((id, g), need) in op.inputs.iter().zip(input_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(g) = g else {
                    debug_assert!(false, "backward skipped an input that needs a gradient");
                    continue;
                };
                debug_assert_eq!(g.shape(), self.nodes[id.0].value.shape());
                match &mut grads[id.0] {
                    slot @ None => *slot = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                }
            }
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = match grad {
                Some(g) => Some(g),
                None if node.is_leaf && node.requires_grad => {
                    Some(Tensor::zeros(node.value.shape().to_vec()))
                }
                None => None,
            };
        }
        Ok(())
    }
}
