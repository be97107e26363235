//! Reverse-mode autodiff over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes in topological order together with a backward rule; calling
//! [`Tape::backward`] replays the rules in reverse, visiting each recorded
//! operation exactly once. A tape is consumed by its backward pass — build a
//! fresh one per training step.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    needs_grad: bool,
}

/// Backward rule: given the output gradient, scatter contributions into the
/// input gradient buffers. Rules capture whatever forward values they need.
pub(crate) type Rule = Box<dyn Fn(&[f32], &mut GradBuffers)>;

struct Step {
    out: Var,
    rule: Rule,
}

/// Per-node gradient accumulators; allocated lazily so untouched branches
/// cost nothing. An empty buffer means "no gradient has reached this node".
pub(crate) struct GradBuffers {
    bufs: Vec<Vec<f32>>,
    lens: Vec<usize>,
}

impl GradBuffers {
    /// Buffer for `v`, zero-filled on first access.
    pub(crate) fn accum(&mut self, v: Var) -> &mut [f32] {
        if self.bufs[v.0].is_empty() {
            self.bufs[v.0] = vec![0.0; self.lens[v.0]];
        }
        &mut self.bufs[v.0]
    }
}

/// Gradients of all registered parameters, in registration order. Parameters
/// the loss never touched get zero-filled buffers.
#[derive(Debug)]
pub struct Gradients {
    entries: Vec<(String, Vec<f32>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| g.as_slice())
    }

    pub fn entries(&self) -> &[(String, Vec<f32>)] {
        &self.entries
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    steps: Vec<Step>,
    params: Vec<(String, Var)>,
    param_lookup: HashMap<String, usize>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a constant input (no gradient will flow into it).
    pub fn input(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Var {
        self.push(shape, data, false)
    }

    pub fn input_tensor(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the original var so gradient contributions from every use accumulate.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        if let Some(&idx) = self.param_lookup.get(name) {
            let v = self.params[idx].1;
            if self.nodes[v.0].shape != t.shape() {
                return Err(Error::Usage(format!(
                    "parameter {name} re-registered with shape {:?}, was {:?}",
                    t.shape(),
                    self.nodes[v.0].shape
                )));
            }
            return Ok(v);
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad());
        self.param_lookup.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push_step(&mut self, out: Var, rule: Rule) {
        self.steps.push(Step { out, rule });
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar convenience accessor.
    pub fn scalar_value(&self, v: Var) -> f32 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Names of every parameter registered on this tape.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Runs the backward pass from a scalar loss. Consumes the tape's
    /// recorded rules: a second call is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;

        let mut grads = GradBuffers {
            bufs: self.nodes.iter().map(|_| Vec::new()).collect(),
            lens: self.nodes.iter().map(|n| n.data.len()).collect(),
        };
        grads.bufs[loss.0] = vec![1.0];

        for step in self.steps.iter().rev() {
            // A node is the output of at most one step, and all later steps
            // have already deposited their contributions, so its gradient is
            // final here and can be taken by value.
            let gout = std::mem::take(&mut grads.bufs[step.out.0]);
            if gout.is_empty() {
                continue; // this branch never fed the loss
            }
            (step.rule)(&gout, &mut grads);
        }

        let entries = self
            .params
            .iter()
            .map(|(name, var)| {
                let g = std::mem::take(&mut grads.bufs[var.0]);
                let g = if g.is_empty() { vec![0.0; self.nodes[var.0].data.len()] } else { g };
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { entries })
    }
}
