//! Evolutionary neural architecture search with elastic architecture
//! transfer.
//!
//! The crate searches a block-coded mobile CNN space with tournament
//! selection, scores models by accuracy traded against size, and tracks the
//! quality of the whole population to decide convergence. A search on a
//! small task yields a basic architecture whose perturbations seed the search
//! on a large task.
//!
//! Fitness comes from an [`evaluators::Evaluator`]: the bundled
//! [`evaluators::SyntheticEvaluator`] is a deterministic landscape with a
//! tunable correlation between the two tasks, and
//! [`evaluators::ExternalEvaluator`] talks to a real trainer process.

pub mod cli;
pub mod error;
pub mod evaluators;
pub mod evolution;
pub mod metrics;
pub mod perturbation;
pub mod scoring;
pub mod search_space;
pub mod transfer;
pub mod weight_store;

pub use error::{Error, Result};
pub use evaluators::{EvalBudget, EvalResult, Evaluator, LandscapeConfig, SyntheticEvaluator, Task};
pub use evolution::{Engine, EvolutionConfig, InitSource, ModelRecord, Population};
pub use scoring::{model_score, population_quality, QualityParams, ScoreParams};
pub use search_space::{ArchCode, BlockCode, SearchSpaceConfig};
pub use transfer::{run_eat, run_from_scratch, Pipeline, Report, TransferConfig};
