//! Memory-hierarchy micro-benchmarks: a dependent-load pointer chase for
//! read-only and write-back latency, a multi-worker sequential scan for
//! bandwidth, sweep orchestration over buffer sizes and worker counts, and
//! the analysis that turns sweeps into comparison tables.

pub mod analysis;
pub mod backend;
pub mod chase;
pub mod env;
pub mod error;
pub mod model;
pub mod oracle;
pub mod stats;
pub mod store;
pub mod stream;
pub mod sweep;

pub use error::{Error, Result};
pub use model::{
    AccessMode, Backing, Bytes, ChaseResult, ChaseSpec, DeviceKind, DeviceProfile, Nanos,
    RatioTable, StreamResult, StreamSpec,
};
