//! Federated-learning backdoor defenses built around direction alignment
//! inspection, plus the baselines, attacks and simulator used to evaluate them.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod kappa_check;
pub mod model;
pub mod seed;
pub mod sim;
pub mod vecops;

pub use error::{Error, IdxError, Result};
pub use vecops::{ParamVector, SignVector, TopKMask};
