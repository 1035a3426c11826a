//! Pseudonym privacy for vehicular twins: entropy model, demand, allocation,
//! change protocol, shuffle ledger, attackers and the event loop tying them
//! together.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversary;
pub mod allocator;
pub mod config;
pub mod demand;
pub mod entropy;
pub mod ledger;
pub mod presets;
pub mod protocol;
pub mod report;
pub mod seed;
pub mod sim;
