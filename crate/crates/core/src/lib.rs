// negated comparisons are deliberate: they reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

//! Two-chain factorial hidden Markov model for joint haze/dust
//! classification from hourly air-quality observations.

pub mod decode;
pub mod emissions;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod gridsearch;
pub mod inference;
pub mod io;
pub mod learning;
pub mod mi;
pub mod model;
pub mod sample;
pub mod special;
pub mod variant;

pub use error::{FhmmError, Result};
pub use model::{
    joint_index, kron_transition, split_index, validate_model, ChainParams, EmissionFamily, EmissionParams,
    FhmmModel, HiddenState, InflatedMixtureParams, Inflation, Violation, NUM_STATES,
};
