//! Policies, the simulation loop, metrics, sweeps and persistence.

pub mod audit;
pub mod config;
pub mod export;
pub mod metrics;
pub mod run;
pub mod sweep;

pub use audit::AuditPool;
pub use config::{Policy, PolicyParams, RunConfig, CONFIG_KEYS};
pub use metrics::MetricsReport;
pub use run::{episode_config, run_stream, Artifacts, AuditLogEntry, RunOutput};
pub use sweep::{run_sweep, SweepGrid, SweepRow};
