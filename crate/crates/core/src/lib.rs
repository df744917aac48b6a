//! Seedable multi-agent microgrid energy-management simulator.
//!
//! Three agents (deferrable loads, PV, storage) trade through a
//! uniform-price market each hour. Coordination is learned with a
//! belief-aware double DQN, compared against a Nash best-response DQN and a
//! model-based ADMM dispatcher, all under lossy message exchange.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix `f64`.

pub mod admm;
pub mod belief;
pub mod checkpoint;
pub mod comm;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod harness;
pub mod learner;
pub mod lp;
pub mod lstm;
pub mod market;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Field, Scalar};

pub type Grid = grid::GridConfig<f64>;
pub type Network = lstm::LstmNetwork<f64>;
pub type Belief = belief::DirichletBelief<f64>;
pub type Observation = belief::ObservationModel<f64>;
pub type Clearing = market::ClearingResult<f64>;
pub type CheckpointF64 = checkpoint::Checkpoint<f64>;
