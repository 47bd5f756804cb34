//! Scenario loading, initialization, closed-loop Monte-Carlo simulation,
//! metrics, persistence and mode comparison.

pub mod compare;
pub mod init;
pub mod metrics;
pub mod persist;
pub mod scenario;
pub mod sim;

pub use compare::{compare, Comparison};
pub use init::{initialize, initialize_with, InitOptions, InitReport, Initialized};
pub use metrics::{BatchSummary, RunMetrics, TrajRow};
pub use scenario::Scenario;
pub use sim::{simulate, simulate_run, RunRecord, SimOptions};
