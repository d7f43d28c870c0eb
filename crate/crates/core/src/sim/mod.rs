//! Cycle-clock simulation of guests running under the kernel, and the
//! measurements taken from its trace.

mod cost;
mod engine;
pub mod metrics;
mod trace;

pub use cost::CostModel;
pub use engine::{workloads_for, Checkpoint, CycleAccount, FaultRecord, RunStatus, SimError, Simulator};
pub use metrics::{
    latency_histogram, latency_samples, measurement, overhead_ratio, worst_case_latency, Histogram, LatencySample,
    Measurement, MetricsError, Ratio,
};
pub use trace::{Trace, TraceKind, TraceRecord};
