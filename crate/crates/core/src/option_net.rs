//! HOC and FON option networks.
//!
//! Both topologies are described by a layer list `⟨m1,…,mN⟩` with `m1 = 1`. In a
//! HOC every option at layer `i` owns `m_{i+1}` private children, so the options
//! form a tree. In a FON every option at layer `i` may select any of the `m_{i+1}`
//! options of the next layer. Options on the last layer select primitive actions.
//!
//! Options are stored in a flat arena numbered breadth-first with the root at 0,
//! which is also the enumeration used for option-length reporting.

use crate::graph::{CoagentId, CoagentKind, ExecutionStep, StepAction, TraceSink};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub type OptionId = usize;
pub const ROOT: OptionId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Hoc,
    Fon,
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Hoc => write!(f, "hoc"),
            Topology::Fon => write!(f, "fon"),
        }
    }
}

impl std::str::FromStr for Topology {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hoc" => Ok(Topology::Hoc),
            "fon" => Ok(Topology::Fon),
            other => Err(NetError::Topology(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("layer list is empty")]
    NoLayers,
    #[error("the first layer must hold exactly one (root) option, got {0}")]
    RootWidth(usize),
    #[error("layer {0} has no options")]
    EmptyLayer(usize),
    #[error("network needs at least one primitive action")]
    NoPrimitives,
    #[error("unknown topology {0:?}")]
    Topology(String),
    #[error("invalid layer list {0:?}")]
    Layers(String),
    #[error("{0}")]
    Hyper(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub topology: Topology,
    pub layers: Vec<usize>,
    pub n_primitive: usize,
}

impl NetworkSpec {
    pub fn new(topology: Topology, layers: &[usize], n_primitive: usize) -> Self {
        Self {
            topology,
            layers: layers.to_vec(),
            n_primitive,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers.is_empty() {
            return Err(NetError::NoLayers);
        }
        if self.layers[0] != 1 {
            return Err(NetError::RootWidth(self.layers[0]));
        }
        if let Some(i) = self.layers.iter().position(|&m| m == 0) {
            return Err(NetError::EmptyLayer(i));
        }
        if self.n_primitive == 0 {
            return Err(NetError::NoPrimitives);
        }
        Ok(())
    }

    /// Number of option layers (`N`).
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn option_count(&self) -> usize {
        match self.topology {
            Topology::Hoc => self
                .layers
                .iter()
                .scan(1usize, |width, &m| {
                    *width *= m;
                    Some(*width)
                })
                .sum(),
            Topology::Fon => self.layers.iter().sum(),
        }
    }

    /// `⟨1,2,2⟩`-style label.
    pub fn label(&self) -> String {
        let inner: Vec<String> = self.layers.iter().map(|m| m.to_string()).collect();
        format!("{} <{}>", self.topology, inner.join(","))
    }
}

/// Parses `"1,2,2"` (also accepts `<1,2,2>`).
pub fn parse_layers(text: &str) -> Result<Vec<usize>, NetError> {
    let trimmed = text.trim().trim_start_matches(['<', '⟨']).trim_end_matches(['>', '⟩']);
    trimmed
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| NetError::Layers(text.to_string()))
}

/// Path of 1-based child indices from the root; the empty path is the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OptionAddress(pub Vec<usize>);

impl OptionAddress {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, slot: usize) -> Self {
        let mut path = self.0.clone();
        path.push(slot + 1);
        Self(path)
    }
}

impl fmt::Display for OptionAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|i| i.to_string()).collect();
        write!(f, "({})", parts.join(""))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Down,
    Up,
}

/// Environment state plus the active option path and execution mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AugmentedState {
    pub env: usize,
    pub addr: OptionAddress,
    pub mode: ExecMode,
}

/// Static structure of one option node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeInfo {
    pub depth: usize,
    /// Position among the options a parent can select.
    pub slot: usize,
    /// Tree parent for HOC; `None` for the root and for every FON option
    /// (FON parents are whichever option selected it).
    pub parent: Option<OptionId>,
    /// Selectable children; empty on the last layer, whose actions are primitive.
    pub children: Vec<OptionId>,
    /// Display address: the tree address for HOC, `(layer, index)` for FON.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLayout {
    pub spec: NetworkSpec,
    pub nodes: Vec<NodeInfo>,
    pub by_depth: Vec<Vec<OptionId>>,
}

impl NetworkLayout {
    pub fn build(spec: &NetworkSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let n = spec.depth();
        let mut nodes = vec![NodeInfo {
            depth: 0,
            slot: 0,
            parent: None,
            children: Vec::new(),
            label: OptionAddress::root().to_string(),
        }];
        let mut by_depth = vec![vec![ROOT]];
        match spec.topology {
            Topology::Hoc => {
                let mut addrs = vec![OptionAddress::root()];
                for depth in 1..n {
                    let mut layer = Vec::new();
                    for &p in &by_depth[depth - 1] {
                        for slot in 0..spec.layers[depth] {
                            let id = nodes.len();
                            let addr = addrs[p].child(slot);
                            nodes.push(NodeInfo {
                                depth,
                                slot,
                                parent: Some(p),
                                children: Vec::new(),
                                label: addr.to_string(),
                            });
                            addrs.push(addr);
                            nodes[p].children.push(id);
                            layer.push(id);
                        }
                    }
                    by_depth.push(layer);
                }
            }
            Topology::Fon => {
                for depth in 1..n {
                    let layer: Vec<OptionId> = (0..spec.layers[depth])
                        .map(|slot| {
                            nodes.push(NodeInfo {
                                depth,
                                slot,
                                parent: None,
                                children: Vec::new(),
                                label: format!("L{}#{}", depth + 1, slot + 1),
                            });
                            nodes.len() - 1
                        })
                        .collect();
                    for &p in &by_depth[depth - 1] {
                        nodes[p].children = layer.clone();
                    }
                    by_depth.push(layer);
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            nodes,
            by_depth,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.spec.depth()
    }

    pub fn is_leaf(&self, o: OptionId) -> bool {
        self.nodes[o].depth + 1 == self.depth()
    }

    /// Width of the option's action set: children, or primitive actions on the last layer.
    pub fn n_actions(&self, o: OptionId) -> usize {
        if self.is_leaf(o) {
            self.spec.n_primitive
        } else {
            self.nodes[o].children.len()
        }
    }

    pub fn leaves(&self) -> &[OptionId] {
        &self.by_depth[self.depth() - 1]
    }
}

/// Temperatures of the softmax policies and sigmoid terminations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperatures {
    pub tau_pi: f64,
    pub tau_beta: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            tau_pi: 0.01,
            tau_beta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    pub alpha_q: f64,
    pub alpha_pi: f64,
    pub alpha_beta: f64,
    pub tau_pi: f64,
    pub tau_beta: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            alpha_q: 0.01,
            alpha_pi: 1e-5,
            alpha_beta: 0.001,
            tau_pi: 0.01,
            tau_beta: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NetError> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(NetError::Hyper(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        for (name, v) in [
            ("alpha_q", self.alpha_q),
            ("alpha_pi", self.alpha_pi),
            ("alpha_beta", self.alpha_beta),
            ("tau_pi", self.tau_pi),
            ("tau_beta", self.tau_beta),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(NetError::Hyper(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            tau_pi: self.tau_pi,
            tau_beta: self.tau_beta,
        }
    }
}

/// Numerically stable softmax of `logits / tau` written into `out`.
pub fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = ((l - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(logits: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, tau, &mut out);
    out
}

pub fn sigmoid(logit: f64, tau: f64) -> f64 {
    let z = logit / tau;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Learnable tables plus the per-episode bookkeeping of one option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionNode {
    /// Row-major `state × action` logits.
    pub policy_logits: Vec<f64>,
    /// One logit per state. Unused for the root, which never terminates.
    pub termination_logits: Vec<f64>,
    #[serde(skip)]
    pub n_actions: usize,
    #[serde(skip)]
    pub activation_time: usize,
    /// Discounted reward accumulated since the last activation.
    #[serde(skip)]
    pub reward_acc: f64,
    #[serde(skip)]
    pub last_observation: usize,
    #[serde(skip)]
    pub prev_action: usize,
    #[serde(skip)]
    pub terminated: bool,
    #[serde(skip)]
    pub active_parent: Option<OptionId>,
    /// Step at which the parent last selected this option (option-length metric).
    #[serde(skip)]
    pub selected_at: usize,
}

impl OptionNode {
    fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            policy_logits: vec![0.0; n_states * n_actions],
            termination_logits: vec![0.0; n_states],
            n_actions,
            activation_time: 0,
            reward_acc: 0.0,
            last_observation: 0,
            prev_action: 0,
            terminated: false,
            active_parent: None,
            selected_at: 0,
        }
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        &self.policy_logits[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn logits_mut(&mut self, state: usize) -> &mut [f64] {
        &mut self.policy_logits[state * self.n_actions..(state + 1) * self.n_actions]
    }
}

/// Options currently executing, root first (`chain[d]` is the option at depth `d`).
/// Iterating it in reverse gives the deepest-first "path to root".
pub type ActiveChain = Vec<OptionId>;

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layout: NetworkLayout,
    pub nodes: Vec<OptionNode>,
    pub temps: Temperatures,
    pub n_states: usize,
}

impl Network {
    /// All logits zero: uniform policies and termination probability 1/2.
    pub fn init(spec: &NetworkSpec, n_states: usize, temps: Temperatures) -> Result<Self, NetError> {
        let layout = NetworkLayout::build(spec)?;
        let nodes = (0..layout.len())
            .map(|o| OptionNode::zeros(n_states, layout.n_actions(o)))
            .collect();
        Ok(Self {
            layout,
            nodes,
            temps,
            n_states,
        })
    }

    pub fn policy_distribution(&self, option: OptionId, state: usize) -> Vec<f64> {
        softmax(self.nodes[option].logits(state), self.temps.tau_pi)
    }

    pub fn termination_prob(&self, option: OptionId, state: usize) -> f64 {
        sigmoid(self.nodes[option].termination_logits[state], self.temps.tau_beta)
    }

    /// Draws an action index from the option's policy without allocating.
    pub fn sample_action<R: Rng + ?Sized>(&self, option: OptionId, state: usize, rng: &mut R) -> usize {
        let logits = self.nodes[option].logits(state);
        let tau = self.temps.tau_pi;
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let total: f64 = logits.iter().map(|&l| ((l - max) / tau).exp()).sum();
        let mut u = rng.random::<f64>() * total;
        for (i, &l) in logits.iter().enumerate() {
            u -= ((l - max) / tau).exp();
            if u < 0.0 {
                return i;
            }
        }
        logits.len() - 1
    }

    /// Samples the termination decision of a non-root option.
    pub fn sample_termination<R: Rng + ?Sized>(&self, option: OptionId, state: usize, rng: &mut R) -> bool {
        assert_ne!(option, ROOT, "the root option never terminates");
        rng.random::<f64>() < self.termination_prob(option, state)
    }

    /// Descends from `start` (the deepest option still running) to a primitive action,
    /// resetting the bookkeeping of every option that makes a choice. `chain` must end
    /// at `start`; the newly selected options are appended to it.
    pub fn choose_primitive_action<R: Rng + ?Sized, S: TraceSink>(
        &mut self,
        state: usize,
        t: usize,
        chain: &mut ActiveChain,
        rng: &mut R,
        sink: &mut S,
    ) -> usize {
        let mut o = *chain.last().expect("chain holds at least the root");
        loop {
            let action = self.sample_action(o, state, rng);
            let node = &mut self.nodes[o];
            node.activation_time = t;
            node.reward_acc = 0.0;
            node.prev_action = action;
            node.last_observation = state;
            if sink.enabled() {
                sink.record(ExecutionStep {
                    coagent: CoagentId::policy(o),
                    state_key: state as u64,
                    action: if self.layout.is_leaf(o) {
                        StepAction::Primitive(action)
                    } else {
                        StepAction::Child(action)
                    },
                });
            }
            if self.layout.is_leaf(o) {
                return action;
            }
            let child = self.layout.nodes[o].children[action];
            let child_node = &mut self.nodes[child];
            child_node.active_parent = Some(o);
            child_node.selected_at = t;
            chain.push(child);
            o = child;
        }
    }

    /// Samples terminations deepest-first, flagging options that terminate, and
    /// returns the depth of ω, the deepest option that keeps running. The root
    /// never samples, so ω is the root when every option below it terminates.
    pub fn termination_cascade<R: Rng + ?Sized, S: TraceSink>(
        &mut self,
        state: usize,
        chain: &ActiveChain,
        rng: &mut R,
        sink: &mut S,
    ) -> usize {
        for depth in (1..chain.len()).rev() {
            let o = chain[depth];
            let terminate = self.sample_termination(o, state, rng);
            if sink.enabled() {
                sink.record(ExecutionStep {
                    coagent: CoagentId::termination(o),
                    state_key: state as u64,
                    action: StepAction::Terminate(terminate),
                });
            }
            if terminate {
                self.nodes[o].terminated = true;
            } else {
                return depth;
            }
        }
        if sink.enabled() {
            // β_0 ≡ 0: the root's termination coagent always passes control down
            sink.record(ExecutionStep {
                coagent: CoagentId {
                    kind: CoagentKind::Termination,
                    option: ROOT,
                },
                state_key: state as u64,
                action: StepAction::Terminate(false),
            });
        }
        0
    }
}
