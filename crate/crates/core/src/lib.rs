//! Communication-overhead optimisation for federated learning.
//!
//! A FedAvg simulator with a per-array sparsify-and-quantise upload codec,
//! driven by NSGA-II over the configuration genome `{m, E, mu_1..mu_l, b_1..b_l}`.

pub mod campaign;
pub mod codec;
pub mod data;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod nsga2;
pub mod objectives;
pub mod report;
pub mod scalar;
pub mod seed;

pub use scalar::Scalar;

/// Production precision.
pub type Real = f32;
pub type Params = nn::ModelParams<Real>;
pub type Payload = codec::LayerPayload<Real>;
pub type Outcome = federation::FlOutcome<Real>;
