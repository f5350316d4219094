//! Three independent routes to `∇θ J`: explicit execution paths of the whole
//! network, the sum of per-coagent policy gradients, and central differences.

use super::model::{prepare, ChainIndex, LinearSystem, Policies};
use super::params::{ParamLayout, TableGradient};
use super::values::{objective, solve_tables, ExactValueTables, Unknowns};
use super::OracleError;
use crate::env::FiniteMdpSpec;
use crate::option_net::{Network, OptionId};

/// One coagent decision inside an execution path.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Decision {
    Policy {
        option: OptionId,
        state: usize,
        action: usize,
    },
    Termination {
        option: OptionId,
        state: usize,
        terminate: bool,
    },
}

/// Network-level states at which an execution path starts: the initial descent from
/// the root, or the leaf chain's up state right after a primitive action.
struct PathStates {
    n_states: usize,
    leaf: usize,
}

impl PathStates {
    fn len(&self, chains: &ChainIndex) -> usize {
        if self.leaf == 0 {
            self.n_states
        } else {
            self.n_states * (1 + chains.count(self.leaf))
        }
    }

    fn init(&self, s: usize) -> usize {
        s
    }

    /// The state reached after a primitive action from leaf chain `k` lands in `s`.
    fn after_step(&self, k: usize, s: usize) -> usize {
        if self.leaf == 0 {
            s
        } else {
            self.n_states * (1 + k) + s
        }
    }
}

struct Path<'a> {
    decisions: &'a [Decision],
    probs: &'a [f64],
    leaf_chain: usize,
    action: usize,
}

/// Calls `visit` for every execution path leaving network state `x`.
fn for_each_path(
    chains: &ChainIndex,
    pol: &Policies,
    states: &PathStates,
    x: usize,
    n_actions: usize,
    visit: &mut dyn FnMut(Path<'_>),
) {
    let leaf = states.leaf;
    let s = x % states.n_states;
    let mut decisions = Vec::new();
    let mut probs = Vec::new();
    if x < states.n_states {
        descend(chains, pol, leaf, 0, 0, s, n_actions, &mut decisions, &mut probs, visit);
        return;
    }
    let k = x / states.n_states - 1;
    let chain = &chains.by_depth[leaf][k];
    // terminate levels leaf..=i+1, continue at level i (the root always continues)
    for i in (0..=leaf).rev() {
        for j in (i + 1..=leaf).rev() {
            decisions.push(Decision::Termination {
                option: chain[j],
                state: s,
                terminate: true,
            });
            probs.push(pol.beta(chain[j], s));
        }
        if i >= 1 {
            decisions.push(Decision::Termination {
                option: chain[i],
                state: s,
                terminate: false,
            });
            probs.push(1.0 - pol.beta(chain[i], s));
        }
        let ki = chains.prefix(leaf, k, i);
        descend(
            chains,
            pol,
            leaf,
            i,
            ki,
            s,
            n_actions,
            &mut decisions,
            &mut probs,
            visit,
        );
        decisions.clear();
        probs.clear();
    }
}

#[allow(clippy::too_many_arguments)]
fn descend(
    chains: &ChainIndex,
    pol: &Policies,
    leaf: usize,
    d: usize,
    k: usize,
    s: usize,
    n_actions: usize,
    decisions: &mut Vec<Decision>,
    probs: &mut Vec<f64>,
    visit: &mut dyn FnMut(Path<'_>),
) {
    let o = chains.last(d, k);
    if d == leaf {
        for a in 0..n_actions {
            decisions.push(Decision::Policy {
                option: o,
                state: s,
                action: a,
            });
            probs.push(pol.pi(o, s, a));
            visit(Path {
                decisions,
                probs,
                leaf_chain: k,
                action: a,
            });
            decisions.pop();
            probs.pop();
        }
        return;
    }
    for (slot, &child) in chains.children[d][k].iter().enumerate() {
        decisions.push(Decision::Policy {
            option: o,
            state: s,
            action: slot,
        });
        probs.push(pol.pi(o, s, slot));
        descend(chains, pol, leaf, d + 1, child, s, n_actions, decisions, probs, visit);
        decisions.pop();
        probs.pop();
    }
}

fn add_decision_grad(pol: &Policies, decision: Decision, scale: f64, grad: &mut TableGradient) {
    match decision {
        Decision::Policy { option, state, action } => {
            pol.add_dpi(option, state, action, scale, &mut grad.policy[option])
        }
        Decision::Termination {
            option,
            state,
            terminate,
        } => {
            let sign = if terminate { 1.0 } else { -1.0 };
            grad.termination[option][state] += sign * scale * pol.dbeta(option, state);
        }
    }
}

/// `∇J = Σ_x d(x|x0) Σ_P dΠ(P|x)/dθ · Q_Π(x, P)` over whole execution paths.
///
/// Path values come from a solve at the network level, independent of the
/// augmented-state tables; `dΠ` is expanded with the product rule.
pub fn grad_full_tables(net: &Network, mdp: &FiniteMdpSpec) -> Result<TableGradient, OracleError> {
    let mdp = &*prepare(net, mdp)?;
    let chains = ChainIndex::build(net);
    let pol = Policies::evaluate(net);
    let states = PathStates {
        n_states: mdp.n_states,
        leaf: chains.leaf_depth(),
    };
    let n = states.len(&chains);
    let gamma = mdp.gamma;

    // network-level transition T and expected reward r_X
    let mut sys = LinearSystem::new(n);
    let mut r_x = vec![0.0; n];
    for x in 0..n {
        let s = x % mdp.n_states;
        for_each_path(&chains, &pol, &states, x, mdp.n_actions, &mut |path| {
            let p: f64 = path.probs.iter().product();
            r_x[x] += p * mdp.expected_reward(s, path.action);
            for (s2, &t) in mdp.transition[s][path.action].iter().enumerate() {
                sys.add(x, states.after_step(path.leaf_chain, s2), gamma * p * t);
            }
        });
    }
    let v = sys.solve(&r_x)?;
    let mut d0 = vec![0.0; n];
    for s in 0..mdp.n_states {
        d0[states.init(s)] = mdp.init_dist[s];
    }
    let occupancy = sys.solve_adjoint(&d0)?;

    let mut grad = TableGradient::zeros(net);
    for x in 0..n {
        if occupancy[x] == 0.0 {
            continue;
        }
        let s = x % mdp.n_states;
        for_each_path(&chains, &pol, &states, x, mdp.n_actions, &mut |path| {
            let next: f64 = mdp.transition[s][path.action]
                .iter()
                .enumerate()
                .map(|(s2, &t)| t * v[states.after_step(path.leaf_chain, s2)])
                .sum();
            let q = mdp.expected_reward(s, path.action) + gamma * next;
            let weight = occupancy[x] * q;
            // product rule: every factor differentiated with the others held fixed
            for (m, &decision) in path.decisions.iter().enumerate() {
                let others: f64 = path
                    .probs
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != m)
                    .map(|(_, p)| p)
                    .product();
                add_decision_grad(&pol, decision, weight * others, &mut grad);
            }
        });
    }
    Ok(grad)
}

/// `∇J = Σ_o Σ_{x_o} d(x_o|x0) Σ_u dπ_o(u|x_o)/dθ · Q_{π_o}(x_o, u)`.
///
/// The coagent occupancy lives on augmented states: within an execution path the
/// chain moves without discount, and only the environment step carries γ.
pub fn grad_coagent_sum_tables(net: &Network, mdp: &FiniteMdpSpec) -> Result<TableGradient, OracleError> {
    let mdp = &*prepare(net, mdp)?;
    let tables = solve_tables(net, mdp)?;
    let occupancy = coagent_occupancy(&tables, mdp)?;
    let chains = &tables.chains;
    let pol = &tables.policies;
    let leaf = chains.leaf_depth();
    let idx = Unknowns::new(chains, mdp.n_states);
    let mut grad = TableGradient::zeros(net);
    for d in 0..=leaf {
        for k in 0..chains.count(d) {
            let o = chains.last(d, k);
            for s in 0..mdp.n_states {
                let rho = occupancy[idx.down(d, k, s)];
                if rho != 0.0 {
                    if d < leaf {
                        for (slot, &child) in chains.children[d][k].iter().enumerate() {
                            pol.add_dpi(o, s, slot, rho * tables.q_down[d + 1][child][s], &mut grad.policy[o]);
                        }
                    } else {
                        for a in 0..mdp.n_actions {
                            pol.add_dpi(o, s, a, rho * tables.q_prim[k][s][a], &mut grad.policy[o]);
                        }
                    }
                }
                if d >= 1 {
                    let rho = occupancy[idx.up(d, k, s)];
                    // dβ(1)·Q_β(1) + dβ(0)·Q_β(0) with dβ(0) = −dβ(1)
                    let stop = tables.q_up[d - 1][chains.parent[d][k]][s];
                    let cont = tables.q_down[d][k][s];
                    grad.termination[o][s] += rho * pol.dbeta(o, s) * (stop - cont);
                }
            }
        }
    }
    Ok(grad)
}

/// Discounted visit frequency of every augmented state from the initial distribution.
pub(crate) fn coagent_occupancy(tables: &ExactValueTables, mdp: &FiniteMdpSpec) -> Result<Vec<f64>, OracleError> {
    let chains = &tables.chains;
    let pol = &tables.policies;
    let leaf = chains.leaf_depth();
    let idx = Unknowns::new(chains, mdp.n_states);
    let mut sys = LinearSystem::new(idx.total);
    for d in 0..=leaf {
        for k in 0..chains.count(d) {
            let o = chains.last(d, k);
            for s in 0..mdp.n_states {
                let from = idx.down(d, k, s);
                if d < leaf {
                    for (slot, &child) in chains.children[d][k].iter().enumerate() {
                        sys.add(from, idx.down(d + 1, child, s), pol.pi(o, s, slot));
                    }
                } else {
                    for a in 0..mdp.n_actions {
                        for (s2, &t) in mdp.transition[s][a].iter().enumerate() {
                            sys.add(from, idx.up(leaf, k, s2), mdp.gamma * pol.pi(o, s, a) * t);
                        }
                    }
                }
                if d >= 1 {
                    let from = idx.up(d, k, s);
                    let beta = pol.beta(o, s);
                    sys.add(from, idx.up(d - 1, chains.parent[d][k], s), beta);
                    sys.add(from, idx.down(d, k, s), 1.0 - beta);
                }
            }
        }
    }
    let mut d0 = vec![0.0; idx.total];
    for s in 0..mdp.n_states {
        d0[idx.down(0, 0, s)] = mdp.init_dist[s];
    }
    sys.solve_adjoint(&d0)
}

pub fn grad_full(net: &Network, mdp: &FiniteMdpSpec, params: &ParamLayout) -> Result<Vec<f64>, OracleError> {
    Ok(params.fold(&grad_full_tables(net, mdp)?))
}

pub fn grad_coagent_sum(net: &Network, mdp: &FiniteMdpSpec, params: &ParamLayout) -> Result<Vec<f64>, OracleError> {
    Ok(params.fold(&grad_coagent_sum_tables(net, mdp)?))
}

/// Below this step the central difference is dominated by the solve's rounding.
pub const FD_NOISE_FLOOR: f64 = 1e-7;

/// Central differences `(J(θ + εeᵢ) − J(θ − εeᵢ)) / 2ε` per coordinate of θ.
pub fn grad_fd(net: &Network, mdp: &FiniteMdpSpec, params: &ParamLayout, eps: f64) -> Result<Vec<f64>, OracleError> {
    if eps < FD_NOISE_FLOOR {
        log::warn!("finite-difference step {eps:e} is below the noise floor {FD_NOISE_FLOOR:e}");
    }
    let theta = params.extract(net);
    let mut work = net.clone();
    let mut grad = Vec::with_capacity(theta.len());
    let mut shifted = theta.clone();
    for i in 0..theta.len() {
        shifted[i] = theta[i] + eps;
        params.apply(&shifted, &mut work);
        let plus = objective(&work, mdp)?;
        shifted[i] = theta[i] - eps;
        params.apply(&shifted, &mut work);
        let minus = objective(&work, mdp)?;
        shifted[i] = theta[i];
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}
