#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Federated learning over a multi-subchannel uplink with per-client local
//! iteration budgets.

pub mod allocator;
pub mod phy;
pub mod rng;
pub mod scenario;
pub mod datasets;
pub mod fl;
pub mod convergence;
pub mod harness;
