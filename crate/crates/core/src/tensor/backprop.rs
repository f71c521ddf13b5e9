use std::collections::{HashMap, HashSet};

use super::{Tensor, TensorId};
use crate::error::{Error, Result};

/// Operations reachable from a scalar root, in execution order.
///
/// A tape is consumed by [`Tape::backward`], so every recording is replayed
/// at most once.
pub struct Tape {
    root: Tensor,
    order: Vec<Tensor>,
}

impl Tape {
    pub fn record(root: &Tensor) -> Result<Self> {
        if root.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.shape()
            )));
        }
        let mut order = Vec::new();
        let mut seen: HashSet<TensorId> = HashSet::new();
        if root.tracks_grad() {
            // iterative post-order dfs; unrolled integrators make deep graphs
            let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
            while let Some((t, expanded)) = stack.pop() {
                if expanded {
                    order.push(t);
                    continue;
                }
                if !seen.insert(t.id()) {
                    continue;
                }
                stack.push((t.clone(), true));
                if let Some(node) = t.node() {
                    for inp in node.inputs.iter().rev() {
                        if inp.tracks_grad() && !seen.contains(&inp.id()) {
                            stack.push((inp.clone(), false));
                        }
                    }
                }
            }
        }
        Ok(Tape {
            root: root.clone(),
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn backward(self) -> Result<GradStore> {
        let mut grads: HashMap<TensorId, Vec<f64>> = HashMap::new();
        if !self.root.tracks_grad() {
            return Ok(GradStore { grads });
        }
        grads.insert(self.root.id(), vec![1.0]);
        for t in self.order.iter().rev() {
            let Some(node) = t.node() else { continue };
            let Some(g) = grads.get(&t.id()) else { continue };
            let input_grads = (node.vjp)(&node.inputs, t, g)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::Contract(format!(
                    "vjp of {} returned {} gradients for {} inputs",
                    node.name,
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !inp.tracks_grad() {
                    continue;
                }
                if ig.len() != inp.numel() {
                    return Err(Error::Contract(format!(
                        "vjp of {} produced {} values for an input of {}",
                        node.name,
                        ig.len(),
                        inp.numel()
                    )));
                }
                match grads.get_mut(&inp.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(inp.id(), ig);
                    }
                }
            }
        }
        Ok(GradStore { grads })
    }
}

/// Gradients produced by one backward pass, keyed by tensor identity.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<TensorId, Vec<f64>>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient of `t`, or zeros when `t` did not reach the root.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
