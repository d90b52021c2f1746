//! Oracle-robust preference alignment on finite prompt/response spaces.

// `!(x > 0.0)` is used throughout so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envelope;
pub mod environment;
pub mod error;
pub mod instances;
pub mod numeric;
pub mod objective;
pub mod optimizer;
pub mod oracle;
pub mod policy;
pub mod trace;
pub mod verification;

pub use environment::{ComparisonTriple, Environment, EnvironmentDocument, RandomEnvironmentSpec};
pub use error::{Error, Result};
pub use numeric::{Matrix, Vector};
pub use objective::{ConstantsBundle, ConstantsInput, Hyperparams};
pub use oracle::{OracleMode, TrueOracle, UncertaintyConfig};
pub use policy::{PolicyParams, PolicyState};
