//! Flat parameter vector θ over all policy and termination logits, with optional sharing.

use crate::option_net::{Network, NetworkLayout, OptionId, ROOT};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Which logit tables alias one another.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sharing {
    /// Options at the same depth share their policy and termination tables.
    pub tie_depth: bool,
    /// States mapped to the same group share a row (state aggregation).
    pub state_groups: Option<Vec<usize>>,
}

impl Sharing {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_shared(&self) -> bool {
        self.tie_depth || self.state_groups.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Owner {
    Option(OptionId),
    Depth(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Policy { owner: Owner, group: usize, action: usize },
    Termination { owner: Owner, group: usize },
}

/// Gradient (or any per-logit quantity) laid out like the network's tables.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGradient {
    /// Per option, row-major `state × action`.
    pub policy: Vec<Vec<f64>>,
    /// Per option, one entry per state. The root's row stays zero.
    pub termination: Vec<Vec<f64>>,
}

impl TableGradient {
    pub fn zeros(net: &Network) -> Self {
        Self {
            policy: net.nodes.iter().map(|n| vec![0.0; n.policy_logits.len()]).collect(),
            termination: net
                .nodes
                .iter()
                .map(|n| vec![0.0; n.termination_logits.len()])
                .collect(),
        }
    }
}

/// Bijection between table entries (modulo sharing) and positions in θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub sharing: Sharing,
    dim: usize,
    policy_index: Vec<Vec<usize>>,
    termination_index: Vec<Vec<Option<usize>>>,
}

impl ParamLayout {
    pub fn new(layout: &NetworkLayout, n_states: usize, sharing: Sharing) -> Self {
        let group = |s: usize| sharing.state_groups.as_ref().map_or(s, |g| g[s]);
        let owner = |o: OptionId| {
            if sharing.tie_depth {
                Owner::Depth(layout.nodes[o].depth)
            } else {
                Owner::Option(o)
            }
        };
        let mut keys: HashMap<Key, usize> = HashMap::new();
        let mut intern = |key: Key| {
            let next = keys.len();
            *keys.entry(key).or_insert(next)
        };
        let mut policy_index = Vec::with_capacity(layout.len());
        let mut termination_index = Vec::with_capacity(layout.len());
        for o in 0..layout.len() {
            let width = layout.n_actions(o);
            let mut row = Vec::with_capacity(n_states * width);
            for s in 0..n_states {
                for action in 0..width {
                    row.push(intern(Key::Policy {
                        owner: owner(o),
                        group: group(s),
                        action,
                    }));
                }
            }
            policy_index.push(row);
            let term: Vec<Option<usize>> = (0..n_states)
                .map(|s| {
                    (o != ROOT).then(|| {
                        intern(Key::Termination {
                            owner: owner(o),
                            group: group(s),
                        })
                    })
                })
                .collect();
            termination_index.push(term);
        }
        Self {
            sharing,
            dim: keys.len(),
            policy_index,
            termination_index,
        }
    }

    pub fn unshared(layout: &NetworkLayout, n_states: usize) -> Self {
        Self::new(layout, n_states, Sharing::none())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn policy_index(&self, o: OptionId, entry: usize) -> usize {
        self.policy_index[o][entry]
    }

    pub fn termination_index(&self, o: OptionId, state: usize) -> Option<usize> {
        self.termination_index[o][state]
    }

    /// Reads θ from the network; for shared entries the first table occurrence wins.
    pub fn extract(&self, net: &Network) -> Vec<f64> {
        let mut theta = vec![f64::NAN; self.dim];
        for (o, node) in net.nodes.iter().enumerate() {
            for (e, &v) in node.policy_logits.iter().enumerate() {
                let i = self.policy_index[o][e];
                if theta[i].is_nan() {
                    theta[i] = v;
                }
            }
            for (s, &v) in node.termination_logits.iter().enumerate() {
                if let Some(i) = self.termination_index[o][s] {
                    if theta[i].is_nan() {
                        theta[i] = v;
                    }
                }
            }
        }
        theta
    }

    /// Writes θ into every table entry it controls.
    pub fn apply(&self, theta: &[f64], net: &mut Network) {
        assert_eq!(theta.len(), self.dim, "θ has the wrong dimension");
        for (o, node) in net.nodes.iter_mut().enumerate() {
            for (e, v) in node.policy_logits.iter_mut().enumerate() {
                *v = theta[self.policy_index[o][e]];
            }
            for (s, v) in node.termination_logits.iter_mut().enumerate() {
                if let Some(i) = self.termination_index[o][s] {
                    *v = theta[i];
                }
            }
        }
    }

    /// Chain rule through the sharing map: gradients of aliased entries add up.
    pub fn fold(&self, grad: &TableGradient) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (o, row) in grad.policy.iter().enumerate() {
            for (e, &g) in row.iter().enumerate() {
                out[self.policy_index[o][e]] += g;
            }
        }
        for (o, row) in grad.termination.iter().enumerate() {
            for (s, &g) in row.iter().enumerate() {
                if let Some(i) = self.termination_index[o][s] {
                    out[i] += g;
                }
            }
        }
        out
    }
}
