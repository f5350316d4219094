//! Shared machinery: active-chain enumeration, evaluated policies, linear solves.

use super::OracleError;
use crate::env::FiniteMdpSpec;
use crate::option_net::{Network, OptionAddress, OptionId, ROOT};
use nalgebra::{DMatrix, DVector};
use std::borrow::Cow;
use std::collections::HashMap;

/// Every root-first option chain `[root, o¹, …, oᵈ]` the network can activate,
/// grouped by depth. In FON a chain records which parents wait to be called back.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainIndex {
    pub by_depth: Vec<Vec<Vec<OptionId>>>,
    /// `children[d][k][slot]`: index at depth `d + 1` of the chain extended by `slot`.
    pub children: Vec<Vec<Vec<usize>>>,
    /// `parent[d][k]`: index at depth `d − 1` of the chain without its last option.
    pub parent: Vec<Vec<usize>>,
    lookup: HashMap<Vec<OptionId>, (usize, usize)>,
}

impl ChainIndex {
    pub fn build(net: &Network) -> Self {
        let depth = net.layout.depth();
        let mut by_depth = vec![vec![vec![ROOT]]];
        let mut children = Vec::with_capacity(depth);
        let mut parent = vec![vec![usize::MAX]];
        for d in 0..depth - 1 {
            let mut next = Vec::new();
            let mut kids = Vec::with_capacity(by_depth[d].len());
            let mut next_parent = Vec::new();
            for (k, chain) in by_depth[d].iter().enumerate() {
                let last = *chain.last().unwrap();
                let mut slots = Vec::new();
                for &child in &net.layout.nodes[last].children {
                    let mut extended = chain.clone();
                    extended.push(child);
                    slots.push(next.len());
                    next.push(extended);
                    next_parent.push(k);
                }
                kids.push(slots);
            }
            children.push(kids);
            by_depth.push(next);
            parent.push(next_parent);
        }
        children.push(vec![Vec::new(); by_depth[depth - 1].len()]);
        let lookup = by_depth
            .iter()
            .enumerate()
            .flat_map(|(d, chains)| chains.iter().enumerate().map(move |(k, c)| (c.clone(), (d, k))))
            .collect();
        Self {
            by_depth,
            children,
            parent,
            lookup,
        }
    }

    /// Depth of the leaf level.
    pub fn leaf_depth(&self) -> usize {
        self.by_depth.len() - 1
    }

    pub fn count(&self, depth: usize) -> usize {
        self.by_depth[depth].len()
    }

    pub fn last(&self, depth: usize, k: usize) -> OptionId {
        *self.by_depth[depth][k].last().unwrap()
    }

    pub fn find(&self, chain: &[OptionId]) -> Option<(usize, usize)> {
        self.lookup.get(chain).copied()
    }

    /// Index of the depth-`to` prefix of chain `(depth, k)`.
    pub fn prefix(&self, depth: usize, k: usize, to: usize) -> usize {
        let mut k = k;
        for d in (to + 1..=depth).rev() {
            k = self.parent[d][k];
        }
        k
    }

    /// Resolves a 1-based option address to `(depth, k)`.
    pub fn resolve(&self, net: &Network, addr: &OptionAddress) -> Option<(usize, usize)> {
        let mut chain = vec![ROOT];
        for &slot in &addr.0 {
            let last = *chain.last().unwrap();
            let child = *net.layout.nodes[last].children.get(slot.checked_sub(1)?)?;
            chain.push(child);
        }
        self.find(&chain)
    }
}

/// Policy and termination probabilities of every option at every state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policies {
    pub pi: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub widths: Vec<usize>,
    pub tau_pi: f64,
    pub tau_beta: f64,
}

impl Policies {
    pub fn evaluate(net: &Network) -> Self {
        let n_states = net.n_states;
        let widths: Vec<usize> = net.nodes.iter().map(|n| n.n_actions).collect();
        let pi = (0..net.nodes.len())
            .map(|o| (0..n_states).flat_map(|s| net.policy_distribution(o, s)).collect())
            .collect();
        let beta = (0..net.nodes.len())
            .map(|o| {
                (0..n_states)
                    .map(|s| if o == ROOT { 0.0 } else { net.termination_prob(o, s) })
                    .collect()
            })
            .collect();
        Self {
            pi,
            beta,
            widths,
            tau_pi: net.temps.tau_pi,
            tau_beta: net.temps.tau_beta,
        }
    }

    #[inline]
    pub fn pi(&self, o: OptionId, s: usize, a: usize) -> f64 {
        self.pi[o][s * self.widths[o] + a]
    }

    /// Termination probability; the root's is identically zero.
    #[inline]
    pub fn beta(&self, o: OptionId, s: usize) -> f64 {
        self.beta[o][s]
    }

    /// `dβ/dθ` for the option's logit at `s`.
    #[inline]
    pub fn dbeta(&self, o: OptionId, s: usize) -> f64 {
        let b = self.beta(o, s);
        b * (1.0 - b) / self.tau_beta
    }

    /// Adds `scale · dπ(c|s)/dθ_k` to `row[k]` for every logit `k` of the state.
    pub fn add_dpi(&self, o: OptionId, s: usize, c: usize, scale: f64, grad: &mut [f64]) {
        let w = self.widths[o];
        let pc = self.pi(o, s, c);
        for k in 0..w {
            let indicator = if k == c { 1.0 } else { 0.0 };
            grad[s * w + k] += scale * pc * (indicator - self.pi(o, s, k)) / self.tau_pi;
        }
    }
}

/// Validates `net` against `mdp` and returns the MDP the solvers work on: at γ = 1 the
/// zero-reward absorbing states lose their outgoing mass so their values pin to 0.
pub(crate) fn prepare<'a>(net: &Network, mdp: &'a FiniteMdpSpec) -> Result<Cow<'a, FiniteMdpSpec>, OracleError> {
    check_compatible(net, mdp)?;
    if mdp.gamma < 1.0 {
        return Ok(Cow::Borrowed(mdp));
    }
    let mut cut = mdp.clone();
    for (s, absorbing) in mdp.absorbing_states().into_iter().enumerate() {
        if absorbing {
            for row in &mut cut.transition[s] {
                row.fill(0.0);
            }
        }
    }
    Ok(Cow::Owned(cut))
}

fn check_compatible(net: &Network, mdp: &FiniteMdpSpec) -> Result<(), OracleError> {
    mdp.validate()?;
    if net.n_states != mdp.n_states {
        return Err(OracleError::Mismatch(format!(
            "network has {} states, MDP has {}",
            net.n_states, mdp.n_states
        )));
    }
    for &leaf in net.layout.leaves() {
        if net.layout.n_actions(leaf) != mdp.n_actions {
            return Err(OracleError::Mismatch(format!(
                "leaf option {leaf} has {} actions, MDP has {}",
                net.layout.n_actions(leaf),
                mdp.n_actions
            )));
        }
    }
    if mdp.gamma >= 1.0 && !mdp.is_proper() {
        return Err(OracleError::NonContractive);
    }
    Ok(())
}

/// Largest system solved by dense LU; bigger ones use fixed-point iteration.
pub const DENSE_LIMIT: usize = 2000;
const ITERATION_TOL: f64 = 1e-12;
const MAX_ITERATIONS: usize = 1_000_000;

/// `x = M x + b` with `M` given as sparse rows.
#[derive(Debug, Clone, Default)]
pub(crate) struct LinearSystem {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl LinearSystem {
    pub fn new(n: usize) -> Self {
        Self {
            rows: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    #[inline]
    pub fn add(&mut self, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            self.rows[row].push((col, value));
        }
    }

    /// Solves `(I − M) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.solve_impl(b, false)
    }

    /// Solves `(I − M)ᵀ y = b`, i.e. the occupancy `y = b (I − M)⁻¹` as a row vector.
    pub fn solve_adjoint(&self, b: &[f64]) -> Result<Vec<f64>, OracleError> {
        self.solve_impl(b, true)
    }

    fn solve_impl(&self, b: &[f64], transpose: bool) -> Result<Vec<f64>, OracleError> {
        let n = self.len();
        if n <= DENSE_LIMIT {
            let mut a = DMatrix::<f64>::identity(n, n);
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, v) in row {
                    if transpose {
                        a[(j, i)] -= v;
                    } else {
                        a[(i, j)] -= v;
                    }
                }
            }
            let rhs = DVector::from_column_slice(b);
            let x = a.lu().solve(&rhs).ok_or(OracleError::Singular)?;
            return Ok(x.iter().copied().collect());
        }
        let mut x = b.to_vec();
        for _ in 0..MAX_ITERATIONS {
            let mut next = b.to_vec();
            for (i, row) in self.rows.iter().enumerate() {
                for &(j, v) in row {
                    if transpose {
                        next[j] += v * x[i];
                    } else {
                        next[i] += v * x[j];
                    }
                }
            }
            let delta = next.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            x = next;
            if delta <= ITERATION_TOL {
                return Ok(x);
            }
        }
        Err(OracleError::NotConverged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::option_net::{NetworkSpec, Temperatures, Topology};

    #[test]
    fn chain_counts() {
        let hoc = Network::init(
            &NetworkSpec::new(Topology::Hoc, &[1, 2, 2], 2),
            1,
            Temperatures::default(),
        )
        .unwrap();
        let c = ChainIndex::build(&hoc);
        assert_eq!((c.count(0), c.count(1), c.count(2)), (1, 2, 4));
        let fon = Network::init(
            &NetworkSpec::new(Topology::Fon, &[1, 2, 3], 2),
            1,
            Temperatures::default(),
        )
        .unwrap();
        let c = ChainIndex::build(&fon);
        assert_eq!((c.count(0), c.count(1), c.count(2)), (1, 2, 6));
        // every FON chain through layer 1 reaches all three leaves
        assert_eq!(c.children[1][0].len(), 3);
        assert_eq!(c.prefix(2, 5, 1), 1);
        assert_eq!(c.prefix(2, 5, 0), 0);
    }

    #[test]
    fn resolves_addresses() {
        let hoc = Network::init(
            &NetworkSpec::new(Topology::Hoc, &[1, 2, 2], 2),
            1,
            Temperatures::default(),
        )
        .unwrap();
        let c = ChainIndex::build(&hoc);
        assert_eq!(c.resolve(&hoc, &OptionAddress(vec![])), Some((0, 0)));
        assert_eq!(c.resolve(&hoc, &OptionAddress(vec![2, 1])), Some((2, 2)));
        assert_eq!(c.resolve(&hoc, &OptionAddress(vec![3])), None);
        assert_eq!(c.resolve(&hoc, &OptionAddress(vec![0])), None);
    }

    #[test]
    fn dense_and_iterative_solves_agree() {
        // x = 0.5 x_next + 1 on a 3-cycle, plus its adjoint
        let mut sys = LinearSystem::new(3);
        for i in 0..3 {
            sys.add(i, (i + 1) % 3, 0.5);
        }
        let x = sys.solve(&[1.0, 1.0, 1.0]).unwrap();
        assert!(x.iter().all(|v| (v - 2.0).abs() < 1e-12));
        let y = sys.solve_adjoint(&[1.0, 0.0, 0.0]).unwrap();
        assert!((y.iter().sum::<f64>() - 2.0).abs() < 1e-12);

        let n = DENSE_LIMIT + 1;
        let mut big = LinearSystem::new(n);
        for i in 0..n {
            big.add(i, (i + 1) % n, 0.5);
        }
        let x = big.solve(&vec![1.0; n]).unwrap();
        assert!(x.iter().all(|v| (v - 2.0).abs() < 1e-11));
        let y = big.solve_adjoint(&vec![1.0; n]).unwrap();
        assert!(y.iter().all(|v| (v - 2.0).abs() < 1e-11));
    }
}
