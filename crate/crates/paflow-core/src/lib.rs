//! Pocket-conditioned flow-matching engine for 3D point sets with discrete
//! labels: variance schedules, conditional probability paths, an
//! SE(3)-equivariant vector-field network with a built-in affinity head,
//! predictor-guided Euler sampling, and a pocket-descriptor atom-count
//! predictor. Everything is generic over the scalar type; the aliases below
//! pin the f64 instantiation used by the CLI and the test suites.

pub mod diffcore;
pub mod egnn;
pub mod flowpath;
pub mod geomdata;
pub mod guidance;
pub mod num;
pub mod schedule;
pub mod sizer;
pub mod trainer;
pub mod stats;

pub use num::Real;

/// Default scalar for shipped binaries and tests.
pub type Scalar = f64;

/// f64 variance schedule.
pub type Schedule = schedule::VarianceSchedule<Scalar>;
