//! Exact policy-gradient oracle for small finite MDPs.
//!
//! Everything here is a pure function of the network's logits and an explicit
//! [`FiniteMdpSpec`](crate::env::FiniteMdpSpec).

mod gradients;
mod hocpgt;
mod model;
mod params;
pub mod suite;
mod values;

pub use gradients::{grad_coagent_sum, grad_coagent_sum_tables, grad_fd, grad_full, grad_full_tables, FD_NOISE_FLOOR};
pub use hocpgt::{advantage, grad_hocpgt, grad_hocpgt_tables};
pub use model::{ChainIndex, Policies, DENSE_LIMIT};
pub use params::{ParamLayout, Sharing, TableGradient};
pub use values::{
    advantage_identity_error, bellman_residuals, cascade_visit_prob, exact_q, kernel_row_sum_error, objective,
    same_level_kernel, termination_action_values, BellmanResiduals, ExactValueTables,
};

use crate::env::MdpError;
use crate::option_net::NetError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("undiscounted evaluation needs an MDP that terminates under every policy")]
    NonContractive,
    #[error("the HOC gradient form applies to HOC networks only")]
    NotHoc,
    #[error("network and MDP disagree: {0}")]
    Mismatch(String),
    #[error("the Bellman system is singular")]
    Singular,
    #[error("fixed-point iteration did not converge")]
    NotConverged,
}

/// Largest absolute elementwise difference.
pub fn max_abs_dev(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradients must share one index map");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `max |a − b| / max(‖a‖∞, 1e−12)`.
pub fn max_rel_dev(reference: &[f64], other: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    max_abs_dev(reference, other) / scale
}
