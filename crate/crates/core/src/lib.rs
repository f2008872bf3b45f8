//! Budget-constrained key/value cache eviction.
//!
//! Eviction policies are built from two independent parts: an importance
//! score that orders cached tokens and an eviction scope that protects some
//! of them. The crate provides the cache engine ([`cache`]), the policy
//! framework ([`policies`]), a seeded toy decoder-only transformer to drive
//! it ([`model`]), an attention-trace format with a replay engine
//! ([`trace`]), and experiment protocols on top ([`analysis`]).

pub mod analysis;
pub mod cache;
pub mod error;
mod io;
pub mod model;
pub mod parallel;
pub mod policies;
pub mod stats;
pub mod tensor;
pub mod trace;

pub use cache::{BudgetMode, BudgetSpec, CacheSet, HeadCache, ResolvedBudget};
pub use error::{Error, Result};
pub use io::write_atomic;
pub use model::{forward_step, generate, init_model, ModelConfig, StepOutput, ToyModel};
pub use policies::{ImportanceMethod, Policy, PolicySpec, ScopeMethod};
pub use stats::ImportanceStats;
pub use tensor::{Matrix, ProbRow};
pub use trace::{AttentionTrace, ReplayResult};
