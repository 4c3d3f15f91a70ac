//! Clade-guided tree search over self-modifying agent lineages: Thompson
//! sampling on clade-level success posteriors with adaptive expansion
//! scheduling, a synthetic lineage environment, an exact dynamic-programming
//! oracle for the equivalence between clade metaproductivity and terminal
//! Q-values on small decision processes, and estimator diagnostics for the
//! metaproductivity-performance mismatch.

pub mod analyze;
pub mod bandit;
pub mod env;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod runtime;
pub mod sweep;
pub mod tree;

pub use error::{HgmError, Result};
