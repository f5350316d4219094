//! The hierarchical option-critic gradient assembled from its three terms: the
//! lowest policies weighted by μ, the termination terms with their advantages, and
//! the reselecting policies weighted by `Π β · P_{β,π}`.

use super::model::prepare;
use super::params::{ParamLayout, TableGradient};
use super::values::{descent_prob, solve_tables, ExactValueTables};
use super::OracleError;
use crate::env::FiniteMdpSpec;
use crate::option_net::{Network, Topology};

/// `A(s_{o,l}) = Q(s_{o,l,d}) − Q(s_{o,l−1,u})` for chain `(l, k)`, `l ≥ 1`.
pub fn advantage(tables: &ExactValueTables, l: usize, k: usize, s: usize) -> f64 {
    tables.q_down[l][k][s] - tables.q_up[l - 1][tables.chains.parent[l][k]][s]
}

pub fn grad_hocpgt_tables(net: &Network, mdp: &FiniteMdpSpec) -> Result<TableGradient, OracleError> {
    if net.layout.spec.topology != Topology::Hoc {
        return Err(OracleError::NotHoc);
    }
    let mdp = &*prepare(net, mdp)?;
    let tables = solve_tables(net, mdp)?;
    let chains = &tables.chains;
    let pol = &tables.policies;
    let leaf = chains.leaf_depth();
    let n_states = mdp.n_states;
    let mut grad = TableGradient::zeros(net);

    // the root's descent to the first leaf option, before the decomposition's start state
    for d in 0..leaf {
        for k in 0..chains.count(d) {
            let o = chains.last(d, k);
            for s in 0..n_states {
                let w = mdp.init_dist[s] * descent_prob(chains, pol, 0, d, k, s);
                for (slot, &child) in chains.children[d][k].iter().enumerate() {
                    pol.add_dpi(o, s, slot, w * tables.q_down[d + 1][child][s], &mut grad.policy[o]);
                }
            }
        }
    }

    for k in 0..chains.count(leaf) {
        let lo = chains.last(leaf, k);
        let chain = &chains.by_depth[leaf][k];
        for s in 0..n_states {
            let mu = tables.mu[k][s];
            if mu == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions {
                pol.add_dpi(lo, s, a, mu * tables.q_prim[k][s][a], &mut grad.policy[lo]);
            }
            for s2 in 0..n_states {
                let reach: f64 = (0..mdp.n_actions)
                    .map(|a| pol.pi(lo, s, a) * mdp.transition[s][a][s2])
                    .sum();
                let w = mu * mdp.gamma * reach;
                if w == 0.0 {
                    continue;
                }
                // termination terms, l = 1..N−1
                for l in 1..=leaf {
                    let above: f64 = (l + 1..=leaf).map(|m| pol.beta(chain[m], s2)).product();
                    let kl = chains.prefix(leaf, k, l);
                    grad.termination[chain[l]][s2] -=
                        w * above * pol.dbeta(chain[l], s2) * advantage(&tables, l, kl, s2);
                }
                // reselection terms, j = 1..N−1
                for j in 1..=leaf {
                    let climbed: f64 = (j..=leaf).map(|m| pol.beta(chain[m], s2)).product();
                    if climbed == 0.0 {
                        continue;
                    }
                    let from = chains.prefix(leaf, k, j - 1);
                    for (k2, &p) in tables.p_beta_pi[j - 1][s2][from].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let o2 = chains.last(j - 1, k2);
                        for (slot, &child) in chains.children[j - 1][k2].iter().enumerate() {
                            pol.add_dpi(
                                o2,
                                s2,
                                slot,
                                w * climbed * p * tables.q_down[j][child][s2],
                                &mut grad.policy[o2],
                            );
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub fn grad_hocpgt(net: &Network, mdp: &FiniteMdpSpec, params: &ParamLayout) -> Result<Vec<f64>, OracleError> {
    Ok(params.fold(&grad_hocpgt_tables(net, mdp)?))
}
