//! Coagent-network view of an option network: coagent identities, execution-path
//! recording and the directed graph of which coagent may act after which.

use crate::option_net::{NetworkLayout, NetworkSpec, OptionId, ROOT};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoagentKind {
    Policy,
    Termination,
}

/// A policy or termination coagent of one option node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CoagentId {
    pub kind: CoagentKind,
    pub option: OptionId,
}

impl CoagentId {
    pub fn policy(option: OptionId) -> Self {
        Self {
            kind: CoagentKind::Policy,
            option,
        }
    }

    pub fn termination(option: OptionId) -> Self {
        Self {
            kind: CoagentKind::Termination,
            option,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepAction {
    /// A policy selected the child in this slot.
    Child(usize),
    /// A last-layer policy selected a primitive action.
    Primitive(usize),
    /// A termination function decided (`true` = terminate).
    Terminate(bool),
}

impl StepAction {
    pub fn index(self) -> usize {
        match self {
            StepAction::Child(i) | StepAction::Primitive(i) => i,
            StepAction::Terminate(b) => b as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExecutionStep {
    pub coagent: CoagentId,
    /// Opaque per-coagent input state.
    pub state_key: u64,
    pub action: StepAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPath {
    pub steps: Vec<ExecutionStep>,
    pub primitive: usize,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("cannot close an execution path with no steps")]
    EmptyPath,
    #[error("cannot close an execution path that has not produced a primitive action")]
    OpenPath,
    #[error("the network has no layers")]
    NoLayers,
    #[error("edge endpoint {0:?} is not a vertex")]
    DanglingEdge(CoagentId),
    #[error("vertex {0:?} is not reachable from the root policy")]
    Unreachable(CoagentId),
    #[error("last-layer policy {0:?} has no edge to its own termination")]
    MissingLeafEdge(CoagentId),
    #[error("vertex {0:?} is missing from the graph")]
    MissingVertex(CoagentId),
}

/// Receives coagent decisions as they happen.
pub trait TraceSink {
    fn enabled(&self) -> bool {
        true
    }
    fn record(&mut self, step: ExecutionStep);
}

/// Discards everything; the learner's default.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoopSink;

impl TraceSink for NoopSink {
    fn enabled(&self) -> bool {
        false
    }

    fn record(&mut self, _step: ExecutionStep) {}
}

/// Collects steps into execution paths, closing a path at every primitive action.
#[derive(Debug, Default, Clone)]
pub struct PathRecorder {
    current: Vec<ExecutionStep>,
    paths: Vec<ExecutionPath>,
}

impl PathRecorder {
    pub fn paths(&self) -> &[ExecutionPath] {
        &self.paths
    }

    pub fn pending(&self) -> &[ExecutionStep] {
        &self.current
    }

    pub fn take_paths(&mut self) -> Vec<ExecutionPath> {
        std::mem::take(&mut self.paths)
    }

    /// Closes the pending steps into a path explicitly.
    pub fn close(&mut self) -> Result<&ExecutionPath, GraphError> {
        let last = self.current.last().ok_or(GraphError::EmptyPath)?;
        let primitive = match last.action {
            StepAction::Primitive(a) => a,
            _ => return Err(GraphError::OpenPath),
        };
        self.paths.push(ExecutionPath {
            steps: std::mem::take(&mut self.current),
            primitive,
        });
        Ok(self.paths.last().unwrap())
    }

    /// Steps recorded after the last closed path (an episode ending mid-cascade).
    pub fn discard_pending(&mut self) {
        self.current.clear();
    }
}

impl TraceSink for PathRecorder {
    fn record(&mut self, step: ExecutionStep) {
        let primitive = matches!(step.action, StepAction::Primitive(_));
        self.current.push(step);
        if primitive {
            self.close().expect("primitive step closes the path");
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CoagentGraph {
    pub vertices: BTreeSet<CoagentId>,
    pub edges: BTreeSet<(CoagentId, CoagentId)>,
}

impl CoagentGraph {
    pub fn has_edge(&self, from: CoagentId, to: CoagentId) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn successors(&self, v: CoagentId) -> impl Iterator<Item = CoagentId> + '_ {
        self.edges
            .range((v, CoagentId::policy(0))..)
            .take_while(move |(a, _)| *a == v)
            .map(|&(_, b)| b)
    }

    /// Checks that consecutive steps of a trace follow edges of the graph.
    pub fn admits<'a, I>(&self, steps: I) -> bool
    where
        I: IntoIterator<Item = &'a ExecutionStep>,
    {
        let mut prev: Option<CoagentId> = None;
        for step in steps {
            if let Some(p) = prev {
                if !self.has_edge(p, step.coagent) {
                    return false;
                }
            }
            prev = Some(step.coagent);
        }
        true
    }

    /// Graphviz rendering; labels come from the network layout.
    pub fn to_dot(&self, layout: &NetworkLayout) -> String {
        let name = |v: &CoagentId| {
            let prefix = match v.kind {
                CoagentKind::Policy => "pi",
                CoagentKind::Termination => "beta",
            };
            format!("{prefix}_{}", v.option)
        };
        let mut out = String::from("digraph coagents {\n");
        for v in &self.vertices {
            let symbol = match v.kind {
                CoagentKind::Policy => "π",
                CoagentKind::Termination => "β",
            };
            let _ = writeln!(
                out,
                "  {} [label=\"{}{}\"];",
                name(v),
                symbol,
                layout.nodes[v.option].label
            );
        }
        for (a, b) in &self.edges {
            let _ = writeln!(out, "  {} -> {};", name(a), name(b));
        }
        out.push_str("}\n");
        out
    }

    /// Merges each option's policy and termination into one vertex, keeping every
    /// edge (edges between merged vertices become self-loops).
    pub fn contract_options(&self) -> BTreeSet<(OptionId, OptionId)> {
        self.edges.iter().map(|(a, b)| (a.option, b.option)).collect()
    }
}

/// Builds the coagent graph: policy edges point down the option structure,
/// termination edges point up, every termination hands control to its own policy,
/// and every last-layer policy is followed by its own termination.
pub fn build_graph(spec: &NetworkSpec) -> Result<CoagentGraph, GraphError> {
    if spec.layers.is_empty() {
        return Err(GraphError::NoLayers);
    }
    let layout = NetworkLayout::build(spec).map_err(|_| GraphError::NoLayers)?;
    Ok(graph_of(&layout))
}

pub fn graph_of(layout: &NetworkLayout) -> CoagentGraph {
    let mut g = CoagentGraph::default();
    for o in 0..layout.len() {
        let pi = CoagentId::policy(o);
        let beta = CoagentId::termination(o);
        g.vertices.insert(pi);
        g.vertices.insert(beta);
        g.edges.insert((beta, pi));
        for &c in &layout.nodes[o].children {
            g.edges.insert((pi, CoagentId::policy(c)));
            g.edges.insert((CoagentId::termination(c), beta));
        }
        if layout.is_leaf(o) {
            g.edges.insert((pi, beta));
        }
    }
    g
}

/// Checks edge endpoints, reachability from the root policy and the
/// last-layer policy → own termination edges.
pub fn validate_graph(graph: &CoagentGraph, spec: &NetworkSpec) -> Result<(), GraphError> {
    let layout = NetworkLayout::build(spec).map_err(|_| GraphError::NoLayers)?;
    for (a, b) in &graph.edges {
        for v in [a, b] {
            if !graph.vertices.contains(v) {
                return Err(GraphError::DanglingEdge(*v));
            }
        }
    }
    let root = CoagentId::policy(ROOT);
    if !graph.vertices.contains(&root) {
        return Err(GraphError::MissingVertex(root));
    }
    let mut seen = BTreeSet::from([root]);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for w in graph.successors(v) {
            if seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    if let Some(v) = graph.vertices.iter().find(|v| !seen.contains(v)) {
        return Err(GraphError::Unreachable(*v));
    }
    for &leaf in layout.leaves() {
        let pi = CoagentId::policy(leaf);
        if !graph.vertices.contains(&pi) {
            return Err(GraphError::MissingVertex(pi));
        }
        if !graph.has_edge(pi, CoagentId::termination(leaf)) {
            return Err(GraphError::MissingLeafEdge(pi));
        }
    }
    Ok(())
}

/// Out-degree per vertex, mostly for reporting.
pub fn out_degrees(graph: &CoagentGraph) -> BTreeMap<CoagentId, usize> {
    let mut deg: BTreeMap<CoagentId, usize> = graph.vertices.iter().map(|&v| (v, 0)).collect();
    for (a, _) in &graph.edges {
        *deg.entry(*a).or_default() += 1;
    }
    deg
}
