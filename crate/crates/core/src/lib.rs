//! Energy estimation for a deterministic multi-threaded embedded target.
//!
//! Programs are written in a small SSA intermediate representation (EIR),
//! lowered to the XS-lite ISA and related back to the IR through debug
//! locations. Energy is then estimated statically (IPET bounds at either
//! level), by block-count profiling at IR level, or by cycle-accurate
//! simulation of the ISA.
//!
//! The numeric core is generic over [`scalar::Scalar`]: `f64` for speed,
//! `f32` for compactness and [`num_rational::BigRational`] for exact results.

pub mod cfg;
pub mod dynamic;
pub mod energy;
pub mod ilp;
pub mod ir;
pub mod isa;
pub mod lower;
pub mod mapping;
pub mod report;
pub mod scalar;
pub mod sra;
pub mod toolkit;

pub use num_rational::BigRational;

pub use energy::{EnergyError, EnergyModelParams};
pub use ir::{parse_eir, EirProgram};
pub use isa::{IsaProgram, Opcode};
pub use mapping::{IrEnergyMap, MappingTable};
pub use scalar::Scalar;
pub use sra::{Direction, Level, SraResult};
pub use toolkit::{compile, CompileOptions, Compiled, ToolError};

/// Parameters in double precision.
pub type Params = EnergyModelParams<f64>;
/// Parameters in single precision.
pub type Params32 = EnergyModelParams<f32>;
/// Parameters in exact rational arithmetic.
pub type ExactParams = EnergyModelParams<BigRational>;

pub type EnergyMap = IrEnergyMap<f64>;
pub type ExactEnergyMap = IrEnergyMap<BigRational>;

pub type Bound = SraResult<f64>;
pub type ExactBound = SraResult<BigRational>;
