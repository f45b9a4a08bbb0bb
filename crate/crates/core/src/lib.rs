//! Differentially-private data exploration.
//!
//! Analysts declare what they want to learn about a sensitive table as an
//! [`intent::IntentGraph`], preview candidate count requests on a
//! Gaussian-copula [`simulator::SimulationModel`], get ranked request
//! strategies from the [`recommender`], and only then spend privacy budget on
//! real noisy answers from the [`curator::Curator`].
//!
//! The raw table never leaves the curator. Everything else in this crate
//! works on simulated data or on responses that have already been noised.
//!
//! See the guide under `book/` for a walk-through of each piece.

pub mod accuracy;
pub mod curator;
pub mod demo;
pub mod intent;
pub mod recommender;
pub mod schema;
pub mod session;
pub mod simulator;

pub use accuracy::{AccuracyError, AccuracyReport, Target};
pub use curator::{BudgetLedger, Curator, CuratorError, DataRequest, NoisyResponse};
pub use intent::{IntentError, IntentGraph, Prototype, ProgressEstimate};
pub use recommender::{QConfig, RecommendError, StrategyCandidate};
pub use schema::{AttributeSchema, Dataset, Schema, SchemaError, SetDivision, ValueDivision};
pub use session::{Session, SessionError};
pub use simulator::{SimulationError, SimulationModel};

// Runs the guide's code listings as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/schemas.md")]
    mod schemas {}
    #[doc = include_str!("../../../book/src/budget.md")]
    mod budget {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/accuracy.md")]
    mod accuracy {}
    #[doc = include_str!("../../../book/src/intent.md")]
    mod intent {}
    #[doc = include_str!("../../../book/src/recommendation.md")]
    mod recommendation {}
    #[doc = include_str!("../../../book/src/sessions.md")]
    mod sessions {}
}
