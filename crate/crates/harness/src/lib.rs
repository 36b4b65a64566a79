//! Evaluation harness for the MVANet PAD network: ISO-style error rates
//! (APCER/BPCER/ACER), cross- and intra-database protocols, and report
//! files that are byte-identical across reruns for a fixed seed.

pub mod config;
pub mod error;
pub mod metrics;
pub mod protocol;

pub use config::{ProtocolChoice, RunConfig, SpecChoice};
pub use error::{Error, Result};
pub use metrics::{
    average_acer, average_acer_exact, compute_metrics, Counts, Decision, EvalReport, Rational,
};
pub use protocol::{evaluate_manifest, run_protocol, FoldResult, ProtocolOutcome};
