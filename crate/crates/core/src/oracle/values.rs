//! Exact action values over augmented states `(s, chain, mode)`.
//!
//! `q_down[d][k][s]` is the value of the state where the last option of chain
//! `(d, k)` is about to select; `q_up[d][k][s]` the value of the state where that
//! option is about to decide whether to terminate. The root never terminates, so
//! `q_up[0] == q_down[0]`. A primitive action always terminates, so the state after
//! an environment step is the leaf's up state.

use super::model::{prepare, ChainIndex, LinearSystem, Policies};
use super::OracleError;
use crate::env::FiniteMdpSpec;
use crate::option_net::{AugmentedState, ExecMode, Network};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactValueTables {
    pub n_states: usize,
    pub gamma: f64,
    #[serde(skip)]
    pub chains: ChainIndex,
    #[serde(skip)]
    pub policies: Policies,
    /// `[depth][chain][state]`
    pub q_down: Vec<Vec<Vec<f64>>>,
    /// `[depth][chain][state]`, depth 0 mirrors `q_down[0]`.
    pub q_up: Vec<Vec<Vec<f64>>>,
    /// `[leaf chain][state][primitive]`: `Q(s_{o,N,d})`.
    pub q_prim: Vec<Vec<Vec<f64>>>,
    /// `[depth][state][from chain][to chain]`: up at `from` to down at `to`, same level.
    pub p_beta_pi: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[leaf chain][state]`: discounted occupancy of leaf-level down states from the
    /// initial distribution.
    pub mu: Vec<Vec<f64>>,
}

impl ExactValueTables {
    pub fn leaf_depth(&self) -> usize {
        self.chains.leaf_depth()
    }

    /// Value of the up state at `(depth, k)`, the root's down state at depth 0.
    #[inline]
    pub fn q_up_or_root(&self, depth: usize, k: usize, s: usize) -> f64 {
        self.q_up[depth][k][s]
    }

    /// Looks up `Q` of an augmented state; `None` when the address is not a chain.
    pub fn value(&self, net: &Network, state: &AugmentedState) -> Option<f64> {
        let (d, k) = self.chains.resolve(net, &state.addr)?;
        if state.env >= self.n_states {
            return None;
        }
        Some(match state.mode {
            ExecMode::Down => self.q_down[d][k][state.env],
            ExecMode::Up => self.q_up[d][k][state.env],
        })
    }

    /// `J = Σ_s d0(s) Q(s_{o,0,d})`.
    pub fn objective(&self, init_dist: &[f64]) -> f64 {
        init_dist.iter().zip(&self.q_down[0][0]).map(|(p, q)| p * q).sum()
    }
}

/// Unknown layout shared by the value solve and the occupancy solve.
pub(crate) struct Unknowns {
    n_states: usize,
    down_offset: Vec<usize>,
    up_offset: Vec<usize>,
    pub total: usize,
}

impl Unknowns {
    pub fn new(chains: &ChainIndex, n_states: usize) -> Self {
        let mut next = 0;
        let mut down_offset = Vec::new();
        for d in 0..=chains.leaf_depth() {
            down_offset.push(next);
            next += chains.count(d) * n_states;
        }
        let mut up_offset = vec![usize::MAX];
        for d in 1..=chains.leaf_depth() {
            up_offset.push(next);
            next += chains.count(d) * n_states;
        }
        Self {
            n_states,
            down_offset,
            up_offset,
            total: next,
        }
    }

    #[inline]
    pub fn down(&self, d: usize, k: usize, s: usize) -> usize {
        self.down_offset[d] + k * self.n_states + s
    }

    /// Up state, collapsing to the root's down state at depth 0.
    #[inline]
    pub fn up(&self, d: usize, k: usize, s: usize) -> usize {
        if d == 0 {
            self.down(0, 0, s)
        } else {
            self.up_offset[d] + k * self.n_states + s
        }
    }
}

/// Solves the augmented Bellman system exactly.
pub fn exact_q(net: &Network, mdp: &FiniteMdpSpec) -> Result<ExactValueTables, OracleError> {
    solve_tables(net, &*prepare(net, mdp)?)
}

/// [`exact_q`] on an MDP that already went through [`prepare`].
pub(crate) fn solve_tables(net: &Network, mdp: &FiniteMdpSpec) -> Result<ExactValueTables, OracleError> {
    let chains = ChainIndex::build(net);
    let policies = Policies::evaluate(net);
    let n_states = mdp.n_states;
    let leaf = chains.leaf_depth();
    let gamma = mdp.gamma;
    let idx = Unknowns::new(&chains, n_states);
    let r_bar: Vec<Vec<f64>> = (0..n_states)
        .map(|s| (0..mdp.n_actions).map(|a| mdp.expected_reward(s, a)).collect())
        .collect();

    let mut sys = LinearSystem::new(idx.total);
    let mut b = vec![0.0; idx.total];
    for d in 0..=leaf {
        for k in 0..chains.count(d) {
            let o = chains.last(d, k);
            for s in 0..n_states {
                let row = idx.down(d, k, s);
                if d < leaf {
                    for (slot, &child) in chains.children[d][k].iter().enumerate() {
                        sys.add(row, idx.down(d + 1, child, s), policies.pi(o, s, slot));
                    }
                } else {
                    for a in 0..mdp.n_actions {
                        let p = policies.pi(o, s, a);
                        b[row] += p * r_bar[s][a];
                        for (s2, &t) in mdp.transition[s][a].iter().enumerate() {
                            sys.add(row, idx.up(leaf, k, s2), gamma * p * t);
                        }
                    }
                }
                if d >= 1 {
                    let row = idx.up(d, k, s);
                    let beta = policies.beta(o, s);
                    sys.add(row, idx.up(d - 1, chains.parent[d][k], s), beta);
                    sys.add(row, idx.down(d, k, s), 1.0 - beta);
                }
            }
        }
    }
    let x = sys.solve(&b)?;

    let q_down: Vec<Vec<Vec<f64>>> = (0..=leaf)
        .map(|d| {
            (0..chains.count(d))
                .map(|k| (0..n_states).map(|s| x[idx.down(d, k, s)]).collect())
                .collect()
        })
        .collect();
    let q_up: Vec<Vec<Vec<f64>>> = (0..=leaf)
        .map(|d| {
            (0..chains.count(d))
                .map(|k| (0..n_states).map(|s| x[idx.up(d, k, s)]).collect())
                .collect()
        })
        .collect();
    let q_prim: Vec<Vec<Vec<f64>>> = (0..chains.count(leaf))
        .map(|k| {
            (0..n_states)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| {
                            r_bar[s][a]
                                + gamma
                                    * mdp.transition[s][a]
                                        .iter()
                                        .enumerate()
                                        .map(|(s2, &t)| t * q_up[leaf][k][s2])
                                        .sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let p_beta_pi: Vec<_> = (0..=leaf)
        .map(|d| same_level_kernel(&chains, &policies, d, n_states))
        .collect();
    let mu = leaf_occupancy(&chains, &policies, &p_beta_pi[leaf], mdp)?;

    Ok(ExactValueTables {
        n_states,
        gamma,
        chains,
        policies,
        q_down,
        q_up,
        q_prim,
        p_beta_pi,
        mu,
    })
}

/// `J(θ)` for the network's current logits.
pub fn objective(net: &Network, mdp: &FiniteMdpSpec) -> Result<f64, OracleError> {
    Ok(exact_q(net, mdp)?.objective(&mdp.init_dist))
}

/// Probability that a cascade starting at the up state of chain `(d, from)` stops at
/// some level `i ≤ d` and re-descends to chain `(d, to)`:
/// `Σ_i (1 − β_i) Π_{j>i} β_j · Π_{p>i} π^p · 1[to and from share the depth-i prefix]`.
pub fn same_level_kernel(chains: &ChainIndex, policies: &Policies, d: usize, n_states: usize) -> Vec<Vec<Vec<f64>>> {
    let n = chains.count(d);
    (0..n_states)
        .map(|s| {
            (0..n)
                .map(|from| {
                    let c = &chains.by_depth[d][from];
                    let mut row = vec![0.0; n];
                    let mut climb = 1.0;
                    for i in (0..=d).rev() {
                        let stop = climb * (1.0 - policies.beta(c[i], s));
                        for (to, c2) in chains.by_depth[d].iter().enumerate() {
                            if c2[..=i] != c[..=i] {
                                continue;
                            }
                            let descend: f64 = (i + 1..=d)
                                .map(|p| policies.pi(c2[p - 1], s, slot_of(chains, c2, p)))
                                .product();
                            row[to] += stop * descend;
                        }
                        climb *= policies.beta(c[i], s);
                    }
                    row
                })
                .collect()
        })
        .collect()
}

/// Slot of `chain[p]` among the children of `chain[p − 1]`.
pub(crate) fn slot_of(chains: &ChainIndex, chain: &[usize], p: usize) -> usize {
    let (d, k) = chains.find(&chain[..p]).expect("prefix is a chain");
    let (_, child) = chains.find(&chain[..=p]).expect("chain is indexed");
    chains.children[d][k]
        .iter()
        .position(|&c| c == child)
        .expect("child of its prefix")
}

/// Probability that the root, selecting downward at `s`, activates leaf chain `k`.
pub(crate) fn descent_prob(
    chains: &ChainIndex,
    policies: &Policies,
    from_depth: usize,
    to_depth: usize,
    k: usize,
    s: usize,
) -> f64 {
    let chain = &chains.by_depth[to_depth][k];
    (from_depth + 1..=to_depth)
        .map(|p| policies.pi(chain[p - 1], s, slot_of(chains, chain, p)))
        .product()
}

/// `μ = μ0 Σ_k K^k` over leaf-level down states, where one step of `K` is a primitive
/// action, an environment transition discounted by γ, and the same-level
/// cascade-and-reselect kernel at the leaf level.
fn leaf_occupancy(
    chains: &ChainIndex,
    policies: &Policies,
    kernel: &[Vec<Vec<f64>>],
    mdp: &FiniteMdpSpec,
) -> Result<Vec<Vec<f64>>, OracleError> {
    let leaf = chains.leaf_depth();
    let n = chains.count(leaf);
    let n_states = mdp.n_states;
    let at = |k: usize, s: usize| k * n_states + s;
    let mut sys = LinearSystem::new(n * n_states);
    let mut mu0 = vec![0.0; n * n_states];
    for k in 0..n {
        let o = chains.last(leaf, k);
        for s in 0..n_states {
            mu0[at(k, s)] = mdp.init_dist[s] * descent_prob(chains, policies, 0, leaf, k, s);
            for s2 in 0..n_states {
                let step: f64 = (0..mdp.n_actions)
                    .map(|a| policies.pi(o, s, a) * mdp.transition[s][a][s2])
                    .sum();
                for k2 in 0..n {
                    sys.add(at(k, s), at(k2, s2), mdp.gamma * step * kernel[s2][k][k2]);
                }
            }
        }
    }
    let flat = sys.solve_adjoint(&mu0)?;
    Ok((0..n)
        .map(|k| (0..n_states).map(|s| flat[at(k, s)]).collect())
        .collect())
}

/// Largest absolute residual of each Bellman family on the solved tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BellmanResiduals {
    /// `Q(s_{o,l−1,d}) = Σ π^l Q(s_{o,l,d})`, the leaf level against primitive values.
    pub downward: f64,
    /// `Q(s_{o,N,d}) = r + γ Σ P Q(s'_{o,N−1,u})`.
    pub primitive: f64,
    /// Multi-level form: `Q(s_{o,l,d}) = r(s_{o,l}) + γ Σ P_π Q(s'_{o,N−1,u})`.
    pub rollout: f64,
    /// `Q(s_{o,l,u}) = Σ_i (1 − β_i) Π β_j Q(s_{o,i,d})`.
    pub upward: f64,
    /// `Q(s_{o,l,u}) = Σ P_{β,π} Q(s_{o',l,d})`.
    pub upward_kernel: f64,
}

impl BellmanResiduals {
    pub fn max(&self) -> f64 {
        [
            self.downward,
            self.primitive,
            self.rollout,
            self.upward,
            self.upward_kernel,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn bellman_residuals(tables: &ExactValueTables, mdp: &FiniteMdpSpec) -> BellmanResiduals {
    let chains = &tables.chains;
    let pol = &tables.policies;
    let leaf = chains.leaf_depth();
    let n_states = tables.n_states;
    let mut res = BellmanResiduals::default();
    let bump = |slot: &mut f64, v: f64| *slot = slot.max(v.abs());

    for d in 0..=leaf {
        for k in 0..chains.count(d) {
            let o = chains.last(d, k);
            for s in 0..n_states {
                let q = tables.q_down[d][k][s];
                let rhs: f64 = if d < leaf {
                    chains.children[d][k]
                        .iter()
                        .enumerate()
                        .map(|(slot, &child)| pol.pi(o, s, slot) * tables.q_down[d + 1][child][s])
                        .sum()
                } else {
                    (0..mdp.n_actions)
                        .map(|a| pol.pi(o, s, a) * tables.q_prim[k][s][a])
                        .sum()
                };
                bump(&mut res.downward, q - rhs);

                // expand every descent to the leaf and the primitive action
                let mut reward = 0.0;
                let mut future = 0.0;
                for lk in 0..chains.count(leaf) {
                    if chains.prefix(leaf, lk, d) != k {
                        continue;
                    }
                    let reach = descent_prob(chains, pol, d, leaf, lk, s);
                    let lo = chains.last(leaf, lk);
                    for a in 0..mdp.n_actions {
                        let p = reach * pol.pi(lo, s, a);
                        reward += p * mdp.expected_reward(s, a);
                        for (s2, &t) in mdp.transition[s][a].iter().enumerate() {
                            future += p * t * tables.q_up[leaf][lk][s2];
                        }
                    }
                }
                bump(&mut res.rollout, q - (reward + mdp.gamma * future));

                let chain = &chains.by_depth[d][k];
                let mut climb = 1.0;
                let mut up = 0.0;
                for i in (0..=d).rev() {
                    let ki = chains.prefix(d, k, i);
                    up += climb * (1.0 - pol.beta(chain[i], s)) * tables.q_down[i][ki][s];
                    climb *= pol.beta(chain[i], s);
                }
                bump(&mut res.upward, tables.q_up[d][k][s] - up);

                let via_kernel: f64 = tables.p_beta_pi[d][s][k]
                    .iter()
                    .zip(&tables.q_down[d])
                    .map(|(p, qd)| p * qd[s])
                    .sum();
                bump(&mut res.upward_kernel, tables.q_up[d][k][s] - via_kernel);
            }
        }
    }
    for k in 0..chains.count(leaf) {
        for s in 0..n_states {
            for a in 0..mdp.n_actions {
                let next: f64 = mdp.transition[s][a]
                    .iter()
                    .enumerate()
                    .map(|(s2, &t)| t * tables.q_up[leaf][k][s2])
                    .sum();
                bump(
                    &mut res.primitive,
                    tables.q_prim[k][s][a] - (mdp.expected_reward(s, a) + mdp.gamma * next),
                );
            }
        }
    }
    res
}

/// Largest deviation of any `P_{β,π}` row sum from one.
pub fn kernel_row_sum_error(tables: &ExactValueTables) -> f64 {
    tables
        .p_beta_pi
        .iter()
        .flatten()
        .flatten()
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Action values of the termination coagent of chain `(d, k)`, `d ≥ 1`, computed
/// from their own definitions: continuing hands control to the option's policy,
/// terminating hands it to the parent level's cascade and reselection.
pub fn termination_action_values(tables: &ExactValueTables, d: usize, k: usize, s: usize) -> (f64, f64) {
    assert!(d >= 1, "the root has no termination coagent");
    let chains = &tables.chains;
    let pol = &tables.policies;
    let o = chains.last(d, k);
    let leaf = chains.leaf_depth();
    let cont: f64 = if d < leaf {
        chains.children[d][k]
            .iter()
            .enumerate()
            .map(|(slot, &child)| pol.pi(o, s, slot) * tables.q_down[d + 1][child][s])
            .sum()
    } else {
        tables.q_prim[k][s]
            .iter()
            .enumerate()
            .map(|(a, q)| pol.pi(o, s, a) * q)
            .sum()
    };
    let parent = chains.parent[d][k];
    let stop: f64 = tables.p_beta_pi[d - 1][s][parent]
        .iter()
        .zip(&tables.q_down[d - 1])
        .map(|(p, qd)| p * qd[s])
        .sum();
    (cont, stop)
}

/// Largest violation of `A = Q(s_{o,l,d}) − Q(s_{o,l−1,u}) = Q_β(·,0) − Q_β(·,1)`,
/// together with the two component identities.
pub fn advantage_identity_error(tables: &ExactValueTables) -> f64 {
    let chains = &tables.chains;
    let mut worst = 0.0f64;
    for d in 1..=chains.leaf_depth() {
        for k in 0..chains.count(d) {
            let parent = chains.parent[d][k];
            for s in 0..tables.n_states {
                let (cont, stop) = termination_action_values(tables, d, k, s);
                let advantage = tables.q_down[d][k][s] - tables.q_up[d - 1][parent][s];
                worst = worst
                    .max((advantage - (cont - stop)).abs())
                    .max((cont - tables.q_down[d][k][s]).abs())
                    .max((stop - tables.q_up[d - 1][parent][s]).abs());
            }
        }
    }
    worst
}

/// Visit probability of the down state of chain `(m, to)` during one cascade that
/// starts at the up state of chain `(l, from)`, by explicit enumeration of stopping
/// levels and complete descents.
pub fn cascade_visit_prob(tables: &ExactValueTables, s: usize, l: usize, from: usize, m: usize, to: usize) -> f64 {
    let chains = &tables.chains;
    let pol = &tables.policies;
    let leaf = chains.leaf_depth();
    let c = &chains.by_depth[l][from];
    let target = &chains.by_depth[m][to];
    let mut total = 0.0;
    let mut climb = 1.0;
    for i in (0..=l).rev() {
        let stop = climb * (1.0 - pol.beta(c[i], s));
        climb *= pol.beta(c[i], s);
        if i > m {
            // the cascade resumes below level m, so (m, to) is not re-entered
            continue;
        }
        for lk in 0..chains.count(leaf) {
            let full = &chains.by_depth[leaf][lk];
            if full[..=i] != c[..=i] || full[..=m] != target[..] {
                continue;
            }
            total += stop * descent_prob(chains, pol, i, leaf, lk, s);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::option_net::{NetworkSpec, OptionAddress, Temperatures, Topology};

    fn self_loop(gamma: f64) -> FiniteMdpSpec {
        FiniteMdpSpec {
            n_states: 1,
            n_actions: 1,
            transition: vec![vec![vec![1.0]]],
            reward: vec![vec![vec![1.0]]],
            gamma,
            init_dist: vec![1.0],
        }
    }

    #[test]
    fn geometric_series() {
        let net = Network::init(&NetworkSpec::new(Topology::Hoc, &[1], 1), 1, Temperatures::default()).unwrap();
        let t = exact_q(&net, &self_loop(0.5)).unwrap();
        assert!((t.q_down[0][0][0] - 2.0).abs() < 1e-14);
        assert!((t.q_prim[0][0][0] - 2.0).abs() < 1e-14);
        let deep = Network::init(
            &NetworkSpec::new(Topology::Hoc, &[1, 2, 2], 1),
            1,
            Temperatures::default(),
        )
        .unwrap();
        let t = exact_q(&deep, &self_loop(0.5)).unwrap();
        for d in 0..3 {
            for row in &t.q_down[d] {
                assert!((row[0] - 2.0).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn gamma_zero_is_one_step_reward() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let mdp = FiniteMdpSpec::random(3, 2, 0.0, &mut rng);
        let net = Network::init(&NetworkSpec::new(Topology::Fon, &[1, 2], 2), 3, Temperatures::default()).unwrap();
        let t = exact_q(&net, &mdp).unwrap();
        for row in &t.q_prim {
            for (s, qs) in row.iter().enumerate() {
                for (a, q) in qs.iter().enumerate() {
                    assert!((q - mdp.expected_reward(s, a)).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn undiscounted_needs_proper_mdp() {
        let net = Network::init(&NetworkSpec::new(Topology::Hoc, &[1], 1), 1, Temperatures::default()).unwrap();
        assert!(matches!(
            exact_q(&net, &self_loop(1.0)),
            Err(OracleError::NonContractive)
        ));
        // 2-state chain into a zero-reward absorbing state
        let proper = FiniteMdpSpec {
            n_states: 2,
            n_actions: 1,
            transition: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            reward: vec![vec![vec![0.0, 3.0]], vec![vec![0.0, 0.0]]],
            gamma: 1.0,
            init_dist: vec![1.0, 0.0],
        };
        let net = Network::init(&NetworkSpec::new(Topology::Hoc, &[1], 1), 2, Temperatures::default()).unwrap();
        let t = exact_q(&net, &proper).unwrap();
        assert!((t.q_down[0][0][0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn value_lookup_by_augmented_state() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let mdp = FiniteMdpSpec::random(3, 2, 0.9, &mut rng);
        let net = Network::init(&NetworkSpec::new(Topology::Hoc, &[1, 2], 2), 3, Temperatures::default()).unwrap();
        let t = exact_q(&net, &mdp).unwrap();
        let root = AugmentedState {
            env: 1,
            addr: OptionAddress::root(),
            mode: ExecMode::Up,
        };
        assert_eq!(t.value(&net, &root), Some(t.q_down[0][0][1]));
        let child = AugmentedState {
            env: 2,
            addr: OptionAddress(vec![2]),
            mode: ExecMode::Up,
        };
        assert_eq!(t.value(&net, &child), Some(t.q_up[1][1][2]));
        let bad = AugmentedState { env: 3, ..child };
        assert_eq!(t.value(&net, &bad), None);
    }
}
