//! Capacity allocation for ordered-entry loss systems.
//!
//! Customers arrive by a renewal process and try servers `1, 2, …` in order,
//! taking the first idle one. Server `n` works at rate `μ_n` and the rates
//! share a fixed budget `Σ μ_n ≤ μ`. The crate evaluates the overflow
//! process seen by each server, derives blocking and delay metrics, checks
//! feasibility, optimizes the split of capacity and cross-checks everything
//! against a discrete-event simulator.

pub mod allocation;
pub mod arrival;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geometric;
pub mod metrics;
pub mod optimizer;
pub mod overflow;
pub mod report;
pub mod search;
pub mod simulate;
pub mod stability;

pub use allocation::Allocation;
pub use arrival::{ArrivalFamily, ArrivalModel};
pub use error::{Error, Result};
pub use metrics::{Extended, SystemMetrics};
pub use overflow::OverflowChain;
