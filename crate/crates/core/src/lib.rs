//! Policy mirror descent driven by an operator world model.
//!
//! The crate learns a transfer-operator model of an MDP from transition
//! samples via conditional mean embeddings (kernel ridge regression on a
//! state-action kernel), evaluates action-value functions of arbitrary
//! policies in closed form from that model, and optimizes softmax policies
//! with mirror-descent updates. A dense tabular oracle provides exact
//! reference quantities and numerical checks of the operator identities the
//! method rests on.

pub mod env;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod model_io;
pub mod oracle;
pub mod pmd;
pub mod rng;
pub mod worldmodel;

pub use error::{Error, Result};
