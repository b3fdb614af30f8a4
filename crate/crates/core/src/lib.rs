//! Score-based generative sampling with overdamped (OU) and kinetic (kOU)
//! Ornstein-Uhlenbeck forward processes, exponential-integrator samplers,
//! inexact score oracles and convergence diagnostics.

pub mod diagnostics;
pub mod error;
pub mod info;
pub mod kernels;
pub mod linalg;
pub mod mixture;
pub mod oracle;
pub mod pipeline;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use mixture::{Component, GaussianMixture};
pub use oracle::{OracleKind, OracleSpec, Process, ScoreOracle};
pub use sampler::{RunConfig, SampleBatch};
pub use schedule::{make_schedule, Schedule, ScheduleKind};
