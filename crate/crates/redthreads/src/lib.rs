//! Adaptive redundant multithreading in a single process.
//!
//! Applications scope *spheres of replication* around critical computations.
//! Each sphere executes as a fork-join region — serially, or with two
//! (detection) or three (correction) redundant replicas whose compared
//! outputs are checked at the implied barrier. The runtime modulates the
//! redundancy at sphere granularity: with the dynamic policy enabled,
//! execution starts serial, turns redundant on the first fault-event
//! notification and falls back to serial once the system has stayed quiet
//! for longer than the average gap between events.
//!
//! Two optimizations trade latency for throughput: *lazy* detection defers
//! output comparison to a dedicated detection thread behind a cyclic buffer,
//! and *thread clustering* pins duplicate replicas onto dedicated cores at
//! lowered priority.
//!
//! ```
//! use redthreads::{Runtime64, RuntimeConfig, SphereInputs, SphereSpec, Outputs, Strength};
//! use std::sync::Arc;
//!
//! let rt = Runtime64::with_config(RuntimeConfig {
//!     max_strength: Strength::Detect,
//!     ..RuntimeConfig::default()
//! })
//! .unwrap();
//!
//! let spec = SphereSpec::new(0u64, Strength::Detect)
//!     .share(["xs"])
//!     .private(["scale"])
//!     .compare(["sum"]);
//! let xs: Arc<Vec<f64>> = Arc::new((0..64).map(f64::from).collect());
//!
//! let result = rt
//!     .execute_sphere(&spec, SphereInputs::new(xs, 2.0f64), |_replica, xs, scale| {
//!         let sum = xs.iter().map(|x| x * scale).sum::<f64>();
//!         (Outputs::scalar("sum", sum), ())
//!     })
//!     .unwrap();
//! let (record, _) = result.canonical().unwrap();
//! assert_eq!(record.values[0].1.as_scalar(), Some(4032.0));
//! rt.finalize().unwrap();
//! ```

pub mod cluster;
mod icv;
pub mod lazy;
pub mod lock;
pub mod monitor;
mod pool;
pub mod runtime;
pub mod scalar;
pub mod sphere;

pub use cluster::{build_plan, AffinityPlan, PlanError, Priority, ThreadRole, UnsupportedPlatform};
pub use lazy::{BufferFull, CyclicBuffer, DeferredOutcome, DeferredReport, OutputBufferEntry};
pub use lock::{LockError, RtLock};
pub use monitor::{
    decide_mode, install_user_signal_hook, EventSource, EventStatistics, EventTime, FaultEvent,
    Monitor, MonitorError,
};
pub use runtime::{
    finalize, initialize, thread_num, EntryHook, FaultHook, FinalizeError, FinalizeReport,
    InitError, NotInSphere, Outputs, Runtime, RuntimeClock, RuntimeConfig, SphereError,
    SphereInputs, SphereOutcome, SphereResult,
};
pub use scalar::Scalar;
pub use sphere::{
    compare_outputs, majority_vote, validate_spec, ComparePolicy, ComparisonOutcome, OutputRecord,
    ShapeError, SpecError, SphereId, SphereSpec, Strength, Value, VoteResult, REPLICA_MISSING,
};

/// Runtime over 64-bit float payloads, the common configuration.
pub type Runtime64 = Runtime<f64>;
/// Runtime over 32-bit float payloads.
pub type Runtime32 = Runtime<f32>;
/// Output record over 64-bit float payloads.
pub type Record64 = OutputRecord<f64>;
/// Compared payload over 64-bit floats.
pub type Value64 = Value<f64>;
