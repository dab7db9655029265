//! Interactive private federated statistics: local randomizers, privacy
//! amplification bounds, an on-device budget accountant, gated two-server
//! aggregation and adaptive n-gram discovery over simulated fleets.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod aggregation;
pub mod amplification;
pub mod device;
pub mod engine;
pub mod ldp;
pub mod recipe;
