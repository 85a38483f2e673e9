//! Constrained adversarial learning.
//!
//! Robust training is posed as minimizing the expected worst-case loss under
//! a budget on the nominal loss, and solved in the dual: a primal-dual loop
//! that samples perturbations with projected Langevin Monte Carlo, descends
//! on the model parameters, and ascends on the constraint's multiplier.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod expcli;
pub mod lambda_oracle;
pub mod perturb;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
