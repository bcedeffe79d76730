//! Reflected stochastic bridge toolkit.
//!
//! This crate implements diffusion bridges constrained to compact domains:
//! geometry and reflection operators ([`domains`]), reflected SDE simulation,
//! entropic optimal transport solvers, score networks, bridge training, and
//! sampling utilities. Modules are added here as they land.

pub mod domains;
pub mod eot;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod sampling;
pub mod scorenet;
pub mod sde;
pub mod tasks;
pub mod training;

pub use domains::{CurveParams, Domain};
pub use eot::{CostMatrix, Coupling, DiscreteMeasure, PotentialPair};
pub use sampling::{NormalizedPrior, PriorSpec};
pub use scorenet::{Adam, Ema, FieldNet, Mlp};
pub use sde::{DriftSpec, TimeGrid, Trajectory};
pub use tasks::Task;
pub use training::{BridgeNets, TrainConfig};
