//! Hierarchical option networks (HOC and FON) as coagent networks: a Four Rooms
//! environment, a tabular actor-critic with update-on-arrival, an exact
//! policy-gradient oracle for small finite MDPs, and an experiment harness.

pub mod env;
pub mod graph;
pub mod harness;
pub mod learner;
pub mod option_net;
pub mod oracle;
