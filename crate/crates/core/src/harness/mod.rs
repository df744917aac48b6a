//! Experiment driver: configuration, the simulated day for each
//! coordination scheme, multi-seed statistics, CSV files and plots.

pub mod agent;
pub mod config;
pub mod experiment;
pub mod output;
pub mod plot;
pub mod sim;
pub mod world;

pub use config::{Algorithm, PaHandling, RunConfig};
pub use experiment::{isolation_probe, run_experiment, run_seed, run_sweep, ExperimentReport, SweepParam};
pub use sim::{EpisodeOptions, MetricsRow, Simulation, SCHEMA_VERSION};
pub use world::World;
