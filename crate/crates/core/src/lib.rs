#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dataset;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod fqi;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod regress;
pub mod sieve;
pub mod simenv;
pub mod rng;
