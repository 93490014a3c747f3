//! Layer-wise parameter synchronization for data-parallel training.
//!
//! The crate is organized bottom-up:
//!
//! - [`modelspec`]: model, layer and cluster descriptions.
//! - [`planner`]: per-layer byte-cost model and PS/SFB scheme selection.
//! - [`transport`]: frame codec, traffic metering, TCP and simulated networks.
//! - [`kvstore`]: chunk partitioning and the bulk-synchronous server shard.
//! - [`sfb`]: sufficient factors, their wire format and peer application.
//! - [`engine`]: reference fully-connected trainer, synthetic data and oracle.
//! - [`baselines`]: 1-bit quantization with residual.
//! - [`syncer`]: per-layer sync state machine and the overlap timeline.
//! - [`coordinator`]: the replicated information book.
//! - [`runtime`]: distributed training over TCP.
//! - [`bench`]: simulated scaling and load-balance experiments.

pub mod baselines;
pub mod bench;
pub mod coordinator;
pub mod engine;
pub mod kvstore;
pub mod linalg;
pub mod modelspec;
pub mod planner;
pub mod runtime;
pub mod sfb;
pub mod syncer;
pub mod transport;

pub use modelspec::{ClusterConfig, LayerKind, LayerSpec, ModelSpec};
pub use planner::{CommPlan, Scheme};
