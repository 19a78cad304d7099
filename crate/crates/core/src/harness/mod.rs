//! Synthetic long-tail workloads and a deterministic replay of them against
//! the optimal, truncated and near-line matchers.

pub mod cost;
pub mod report;
pub mod sim;
pub mod workload;

pub use cost::{cost_model, CostInputs, CostRow, CostTable};
pub use report::{compare, Comparison, DeltaRow, Distribution, MatcherReport, NearlineReport, SimReport};
pub use sim::{run, MatcherKind, SimConfig, TfmsConfig};
pub use workload::{generate, EventRecord, TrafficBody, TrafficRecord, Workload, WorkloadSpec};
