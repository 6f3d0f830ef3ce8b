//! Discrete-event simulation of LLM inference serving clusters.
//!
//! The pipeline runs profile → estimate → simulate → search:
//!
//! * [`model_spec`] describes the transformer and its sharded operator set,
//! * [`profiler`] prices kernels with an analytical device oracle or reads
//!   measured profiles,
//! * [`estimator`] fits per-kernel regressors and predicts batch times,
//! * [`workload`] loads and synthesizes request traces,
//! * [`scheduler`] plans KV memory, routes requests and forms batches,
//! * [`sim`] advances virtual time and records per-request timelines,
//! * [`metrics`] turns timelines into latency and utilization figures,
//! * [`search`] finds the cheapest deployment that meets latency targets.

pub mod cli;
pub mod estimator;
pub mod metrics;
pub mod model_spec;
pub mod parallel;
pub mod profiler;
pub mod scheduler;
pub mod search;
pub mod sim;
pub mod workload;

pub use estimator::{BatchComposition, EstimatorModel, RuntimePredictor};
pub use model_spec::{ModelSpec, OperatorDescriptor, ParallelismConfig};
pub use profiler::DeviceProfile;
