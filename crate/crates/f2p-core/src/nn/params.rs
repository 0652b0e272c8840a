use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Ordered map of named tensors. Insertion order is fixed so parameter
/// traversal (checkpoints, optimiser state, gradient collection) is
/// deterministic. `trainable = false` marks buffers such as batch-norm
/// running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: HashMap<String, (Tensor, bool)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        assert!(
            !self.tensors.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        self.names.push(name.to_string());
        self.tensors.insert(name.to_string(), (tensor, trainable));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter {name:?}")).0
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .0
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.tensors.get(name).map(|e| e.1).unwrap_or(false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.names.iter().map(|n| self.get(n).numel()).sum()
    }

    /// Drop a tensor; no-op when absent.
    pub fn remove(&mut self, name: &str) {
        if self.tensors.remove(name).is_some() {
            self.names.retain(|n| n != name);
        }
    }

    /// Merge another set under a `prefix.` namespace.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for name in other.names.clone() {
            let (t, tr) = other.tensors[&name].clone();
            self.insert(&format!("{prefix}.{name}"), t, tr);
        }
    }
}

/// Gradients keyed by parameter name, as collected after a backward pass.
pub type GradMap = HashMap<String, Vec<f64>>;

/// Parameter-name -> graph-variable binding for one forward/backward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Bind every entry of `params` into `graph`. Trainable entries for
    /// which `frozen` returns false become differentiable; everything else
    /// enters as a constant leaf.
    pub fn bind(graph: &mut Graph, params: &ParamSet, frozen: &dyn Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::new();
        for name in params.names() {
            let t = params.get(name).clone();
            let v = if params.is_trainable(name) && !frozen(name) {
                graph.param(t)
            } else {
                graph.leaf(t)
            };
            vars.insert(name.to_string(), v);
        }
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name:?}"))
    }

    /// Collect gradients for every differentiable bound entry. Parameters
    /// the loss did not reach get zero gradients.
    pub fn grads(&self, graph: &Graph, params: &ParamSet, frozen: &dyn Fn(&str) -> bool) -> GradMap {
        let mut out = GradMap::new();
        for name in params.names() {
            if !params.is_trainable(name) || frozen(name) {
                continue;
            }
            let v = self.var(name);
            let g = graph
                .grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; params.get(name).numel()]);
            out.insert(name.to_string(), g);
        }
        out
    }
}
