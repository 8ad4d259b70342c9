//! Deployment harness, oracle-based checking and benchmarks for the
//! versioned blob store, plus the `vblob` command-line tool.

pub mod bench_ops;
pub mod config;
pub mod deploy;
pub mod harness;
pub mod oracle;
pub mod report;
pub mod sim;

pub use deploy::{DeployConfig, Deployment, Transport};
pub use harness::{run_random_suite, SuiteConfig};
pub use oracle::OracleStore;
pub use report::RunReport;
pub use sim::TreeSim;
