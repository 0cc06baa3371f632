//! Product-form analysis of multi-class single-server queueing networks in
//! which every document keeps exactly one packet in flight.
//!
//! - [`topology`]: queues, routes, traffic and the packet state spaces `S(n)`.
//! - [`productform`]: normalizing constants, stationary pmfs and the spinning
//!   allocation, generic over [`Scalar`].
//! - [`fairness`]: the proportionally fair allocation, the rate functions
//!   `beta_rho` and `alpha_rho`, and the invariant manifold.
//! - [`simulate`]: seeded flow-level, packet-level and closed-network simulators.
//! - [`experiments`]: JSON network files, experiment drivers and CSV output.

pub mod experiments;
pub mod fairness;
pub mod productform;
pub mod scalar;
pub mod simulate;
pub mod topology;

pub use num_rational::BigRational;

pub use experiments::{ExperimentError as Error, ExperimentKind, ExperimentSpec, ResultTable};
pub use fairness::{solve_pf, FairnessError, PfSolution};
pub use productform::{Allocation, NormalizingTable, ProductFormError};
pub use scalar::Scalar;
pub use simulate::{SimConfig, SimError, Trajectory};
pub use topology::{PacketVector, Topology, TopologyError, TrafficProfile};

/// Exact arithmetic scalar.
pub type Exact = BigRational;
/// Normalizing table in double precision.
pub type Table = NormalizingTable<f64>;
/// Normalizing table in exact rationals.
pub type ExactTable = NormalizingTable<BigRational>;
/// Spinning or PF allocation in double precision.
pub type Rates = Allocation<f64>;
/// Spinning allocation in exact rationals.
pub type ExactRates = Allocation<BigRational>;
