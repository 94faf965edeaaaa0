//! Generalized Nash equilibria of average aggregative games with affine
//! coupling constraints, computed by a distributed primal-dual projection
//! iteration in which agents exchange information over a doubly stochastic
//! communication network.
//!
//! The crate is organized bottom-up:
//!
//! * [`comm`] holds the communication matrix and consensus mixing,
//! * [`projection`] the Euclidean projections onto local constraint sets,
//! * [`game`] the game model, aggregates and game operators,
//! * [`solver`] the distributed iteration and its compact matrix form,
//! * [`quality`] feasibility, ε-Nash and variational-inequality diagnostics,
//! * [`cournot`] the multi-market Cournot game with transportation costs,
//! * [`config`] the experiment configuration consumed by the command line,
//! * [`experiment`] the configured runs and their CSV output.

pub mod comm;
pub mod config;
pub mod cournot;
mod error;
pub mod experiment;
pub mod game;
pub(crate) mod linalg;
pub mod projection;
pub mod quality;
pub mod solver;

pub use comm::{CommMatrix, Direction, ValidationReport};
pub use error::{Error, Result};
pub use game::{Agent, AgentCost, Coupling, Game, Mode, Rounds, StrategyProfile};
pub use projection::{Halfspace, LocalSet};
pub use quality::QualityReport;
pub use solver::{EquilibriumReport, SolverConfig, StopNorm};
