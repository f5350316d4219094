//! Bundled fixtures and the cross-check suite behind `coagent verify`.

use super::{
    advantage_identity_error, bellman_residuals, cascade_visit_prob, exact_q, grad_coagent_sum, grad_fd, grad_full,
    grad_hocpgt, kernel_row_sum_error, max_abs_dev, max_rel_dev, ExactValueTables, OracleError, ParamLayout, Sharing,
};
use crate::env::FiniteMdpSpec;
use crate::option_net::{Network, NetworkSpec, Temperatures, Topology};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;

const MDP3: &str = include_str!("../../fixtures/mdp3.json");
const MDP5: &str = include_str!("../../fixtures/mdp5.json");

/// `(n_states, seed)` used to generate each bundled fixture with
/// [`FiniteMdpSpec::random`] (2 actions, γ = 0.9).
pub const FIXTURE_SEEDS: [(usize, u64); 2] = [(3, 3), (5, 5)];

#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: &'static str,
    pub mdp: FiniteMdpSpec,
}

pub fn bundled_fixtures() -> Vec<Fixture> {
    vec![
        Fixture {
            name: "mdp3",
            mdp: FiniteMdpSpec::from_json(MDP3).expect("bundled fixture is valid"),
        },
        Fixture {
            name: "mdp5",
            mdp: FiniteMdpSpec::from_json(MDP5).expect("bundled fixture is valid"),
        },
    ]
}

/// Networks checked on every fixture: FON ⟨1,1⟩, FON ⟨1,2⟩, HOC ⟨1,2⟩, and the deeper
/// HOC ⟨1,2,2⟩ and FON ⟨1,2,2⟩.
pub fn standard_networks(n_primitive: usize) -> Vec<NetworkSpec> {
    vec![
        NetworkSpec::new(Topology::Fon, &[1, 1], n_primitive),
        NetworkSpec::new(Topology::Fon, &[1, 2], n_primitive),
        NetworkSpec::new(Topology::Hoc, &[1, 2], n_primitive),
        NetworkSpec::new(Topology::Hoc, &[1, 2, 2], n_primitive),
        NetworkSpec::new(Topology::Fon, &[1, 2, 2], n_primitive),
    ]
}

/// Ties same-depth tables and aggregates states pairwise.
pub fn shared(n_states: usize) -> Sharing {
    Sharing {
        tie_depth: true,
        state_groups: Some((0..n_states).map(|s| s / 2).collect()),
    }
}

/// Network with logits drawn uniformly from `[−scale, scale]` in parameter space.
pub fn random_network<R: Rng + ?Sized>(
    spec: &NetworkSpec,
    n_states: usize,
    temps: Temperatures,
    params: &ParamLayout,
    scale: f64,
    rng: &mut R,
) -> Result<Network, OracleError> {
    let mut net = Network::init(spec, n_states, temps)?;
    let theta: Vec<f64> = (0..params.dim()).map(|_| rng.random_range(-scale..scale)).collect();
    params.apply(&theta, &mut net);
    Ok(net)
}

/// All gradient forms at one θ, on one shared index map.
#[derive(Debug, Clone, Serialize)]
pub struct GradientReport {
    pub dim: usize,
    pub grad_full: Vec<f64>,
    pub grad_coagent_sum: Vec<f64>,
    pub grad_hocpgt: Option<Vec<f64>>,
    pub grad_fd: Vec<f64>,
    pub fd_eps: f64,
    pub pairwise_max_abs_dev: BTreeMap<String, f64>,
    /// Finite differences against the path form, relative to `‖grad_full‖∞`.
    pub fd_rel_dev: f64,
}

pub fn gradient_report(
    net: &Network,
    mdp: &FiniteMdpSpec,
    params: &ParamLayout,
    fd_eps: f64,
) -> Result<GradientReport, OracleError> {
    let full = grad_full(net, mdp, params)?;
    let coagent = grad_coagent_sum(net, mdp, params)?;
    let hoc = if net.layout.spec.topology == Topology::Hoc {
        Some(grad_hocpgt(net, mdp, params)?)
    } else {
        None
    };
    let fd = grad_fd(net, mdp, params, fd_eps)?;
    let mut dev = BTreeMap::new();
    dev.insert("full_vs_coagent_sum".to_string(), max_abs_dev(&full, &coagent));
    dev.insert("full_vs_fd".to_string(), max_abs_dev(&full, &fd));
    dev.insert("coagent_sum_vs_fd".to_string(), max_abs_dev(&coagent, &fd));
    if let Some(h) = &hoc {
        dev.insert("full_vs_hocpgt".to_string(), max_abs_dev(&full, h));
        dev.insert("coagent_sum_vs_hocpgt".to_string(), max_abs_dev(&coagent, h));
        dev.insert("hocpgt_vs_fd".to_string(), max_abs_dev(h, &fd));
    }
    Ok(GradientReport {
        dim: params.dim(),
        fd_rel_dev: max_rel_dev(&full, &fd),
        grad_full: full,
        grad_coagent_sum: coagent,
        grad_hocpgt: hoc,
        grad_fd: fd,
        fd_eps,
        pairwise_max_abs_dev: dev,
    })
}

/// Largest disagreement between the brute-force cascade visit probability and the
/// two closed forms: extending the same-level kernel downward with policy products,
/// and truncating it upward with termination products.
pub fn generalized_kernel_error(tables: &ExactValueTables) -> f64 {
    let chains = &tables.chains;
    let pol = &tables.policies;
    let depth = chains.leaf_depth();
    let mut worst = 0.0f64;
    for s in 0..tables.n_states {
        for l in 0..=depth {
            for from in 0..chains.count(l) {
                let c = &chains.by_depth[l][from];
                for m in 0..=depth {
                    for to in 0..chains.count(m) {
                        let c2 = &chains.by_depth[m][to];
                        let brute = cascade_visit_prob(tables, s, l, from, m, to);
                        let closed = if m >= l {
                            let head = chains.prefix(m, to, l);
                            let extend: f64 = (l + 1..=m)
                                .map(|p| {
                                    let parent = chains.prefix(m, to, p - 1);
                                    let me = chains.prefix(m, to, p);
                                    let slot = chains.children[p - 1][parent].iter().position(|&x| x == me).unwrap();
                                    pol.pi(c2[p - 1], s, slot)
                                })
                                .product();
                            extend * tables.p_beta_pi[l][s][from][head]
                        } else {
                            let head = chains.prefix(l, from, m);
                            let climb: f64 = (m + 1..=l).map(|j| pol.beta(c[j], s)).product();
                            tables.p_beta_pi[m][s][head][to] * climb
                        };
                        worst = worst.max((brute - closed).abs());
                    }
                }
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    pub coagent_sum: f64,
    pub fd_rel: f64,
    pub hocpgt: f64,
    pub bellman: f64,
    pub kernel_rows: f64,
    pub advantage: f64,
    pub generalized_kernel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            coagent_sum: 1e-9,
            fd_rel: 1e-5,
            hocpgt: 1e-8,
            bellman: 1e-10,
            kernel_rows: 1e-12,
            advantage: 1e-12,
            generalized_kernel: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyConfig {
    pub draws: usize,
    pub gammas: Vec<f64>,
    pub seed: u64,
    pub fd_eps: f64,
    pub logit_scale: f64,
    pub temps: Temperatures,
    pub tolerances: Tolerances,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            draws: 5,
            gammas: vec![0.0, 0.5, 0.9],
            seed: 0,
            fd_eps: 1e-5,
            logit_scale: 2.0,
            temps: Temperatures {
                tau_pi: 1.0,
                tau_beta: 1.0,
            },
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub fixture: String,
    pub network: String,
    pub gamma: f64,
    pub draw: usize,
    pub shared: bool,
    pub full_vs_coagent_sum: f64,
    pub fd_rel_dev: f64,
    pub full_vs_hocpgt: Option<f64>,
    pub bellman: f64,
    pub kernel_rows: f64,
    pub advantage: f64,
    pub generalized_kernel: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Maxima {
    pub full_vs_coagent_sum: f64,
    pub fd_rel_dev: f64,
    pub full_vs_hocpgt: f64,
    pub bellman: f64,
    pub kernel_rows: f64,
    pub advantage: f64,
    pub generalized_kernel: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub cases: Vec<CaseReport>,
    pub maxima: Maxima,
}

impl VerifyReport {
    /// One message per tolerance that some case exceeds.
    pub fn breaches(&self) -> Vec<String> {
        let t = &self.config.tolerances;
        let m = &self.maxima;
        let checks = [
            ("grad_full vs grad_coagent_sum", m.full_vs_coagent_sum, t.coagent_sum),
            ("grad_full vs grad_fd (relative)", m.fd_rel_dev, t.fd_rel),
            ("grad_full vs grad_hocpgt", m.full_vs_hocpgt, t.hocpgt),
            ("Bellman residual", m.bellman, t.bellman),
            ("P_beta_pi row sums", m.kernel_rows, t.kernel_rows),
            ("advantage identity", m.advantage, t.advantage),
            ("generalized kernels", m.generalized_kernel, t.generalized_kernel),
        ];
        checks
            .iter()
            .filter(|(_, value, tol)| !(value <= tol))
            .map(|(name, value, tol)| format!("{name}: {value:e} exceeds {tol:e}"))
            .collect()
    }
}

/// Runs every cross-check over the bundled fixtures, standard networks, discount
/// factors, random draws of θ, and both sharing patterns.
pub fn run_suite(config: &VerifyConfig) -> Result<VerifyReport, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::new();
    let mut maxima = Maxima::default();
    for fixture in bundled_fixtures() {
        for spec in standard_networks(fixture.mdp.n_actions) {
            for &gamma in &config.gammas {
                let mdp = fixture.mdp.with_gamma(gamma);
                for shared_params in [false, true] {
                    let layout = Network::init(&spec, mdp.n_states, config.temps)?.layout;
                    let sharing = if shared_params {
                        shared(mdp.n_states)
                    } else {
                        Sharing::none()
                    };
                    let params = ParamLayout::new(&layout, mdp.n_states, sharing);
                    for draw in 0..config.draws {
                        let net =
                            random_network(&spec, mdp.n_states, config.temps, &params, config.logit_scale, &mut rng)?;
                        let report = gradient_report(&net, &mdp, &params, config.fd_eps)?;
                        let tables = exact_q(&net, &mdp)?;
                        let case = CaseReport {
                            fixture: fixture.name.to_string(),
                            network: spec.label(),
                            gamma,
                            draw,
                            shared: shared_params,
                            full_vs_coagent_sum: report.pairwise_max_abs_dev["full_vs_coagent_sum"],
                            fd_rel_dev: report.fd_rel_dev,
                            full_vs_hocpgt: report.pairwise_max_abs_dev.get("full_vs_hocpgt").copied(),
                            bellman: bellman_residuals(&tables, &mdp).max(),
                            kernel_rows: kernel_row_sum_error(&tables),
                            advantage: advantage_identity_error(&tables),
                            generalized_kernel: generalized_kernel_error(&tables),
                        };
                        maxima.full_vs_coagent_sum = maxima.full_vs_coagent_sum.max(case.full_vs_coagent_sum);
                        maxima.fd_rel_dev = maxima.fd_rel_dev.max(case.fd_rel_dev);
                        maxima.full_vs_hocpgt = maxima.full_vs_hocpgt.max(case.full_vs_hocpgt.unwrap_or(0.0));
                        maxima.bellman = maxima.bellman.max(case.bellman);
                        maxima.kernel_rows = maxima.kernel_rows.max(case.kernel_rows);
                        maxima.advantage = maxima.advantage.max(case.advantage);
                        maxima.generalized_kernel = maxima.generalized_kernel.max(case.generalized_kernel);
                        cases.push(case);
                    }
                }
            }
        }
    }
    Ok(VerifyReport {
        config: config.clone(),
        cases,
        maxima,
    })
}
