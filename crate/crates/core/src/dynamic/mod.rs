//! Dynamic measurement: the cycle-accurate simulator, the IR interpreter
//! used for block profiling, and the profile-based estimator.

mod interp;
mod iss;
mod profile;

use thiserror::Error;

pub use interp::{block_key, emit_table, instrument_ir, interpret_ir, profile_counts, split_key, BbCounts, InterpConfig};
pub use iss::{iss_run, simulate, IssConfig, IssueRecord, TokenRecord, Trace};
pub use profile::{estimate_from_counts, ProfileEstimate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynError {
    #[error("deadlock: all live threads blocked on channels {0:?}")]
    Deadlock(Vec<i32>),
    #[error("budget of {0} exceeded")]
    Budget(u64),
    #[error("division by zero")]
    DivByZero,
    #[error("memory access out of bounds at word {0}")]
    OutOfBounds(i64),
    #[error("use of undefined value %{0}")]
    Undefined(String),
    #[error("program is already instrumented")]
    AlreadyInstrumented,
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("count for unknown block {0}")]
    UnknownBlock(String),
    #[error(transparent)]
    Energy(#[from] crate::energy::EnergyError),
    #[error(transparent)]
    Sra(#[from] crate::sra::SraError),
}
