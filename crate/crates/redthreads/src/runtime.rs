//! The fork-join executor.
//!
//! A sphere of replication executes as a fork-join region: serially, or with
//! two or three redundant replicas followed by comparison or voting at the
//! implied barrier. Dispatch is decided once per sphere from the strength
//! control variable, so the runtime (or its monitor) can modulate redundancy
//! between spheres without the caller changing code.
//!
//! Shared bindings are passed to every replica behind an `Arc` (one copy,
//! shared by reference); private bindings are cloned per replica, which is
//! the private-copy semantics of the scoping model. Units must be
//! deterministic and side-effect-free outside their private bindings and
//! their output record.

use crate::cluster::AffinityPlan;
use crate::icv::Icv;
use crate::lazy::{DeferredReport, DetectionCallback, LazyEngine};
use crate::monitor::{EventTime, FaultEvent, Monitor, MonitorError};
use crate::pool::WorkerPool;
use crate::scalar::Scalar;
use crate::sphere::{
    compare_outputs, majority_vote, ComparisonOutcome, OutputRecord, SpecError, SphereId,
    SphereSpec, Strength, Value, VoteResult, REPLICA_MISSING,
};
use std::borrow::Cow;
use std::cell::Cell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Runtime configuration. [`RuntimeConfig::from_env`] seeds the defaults from
/// the `REDTHREADS_*` environment variables; explicit settings win.
#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    /// Redundancy cap. The strength control variable never exceeds this.
    pub max_strength: Strength,
    /// Whether the monitor may rewrite the current strength.
    pub dynamic: bool,
    /// Core count used for affinity plans; `None` detects the host's.
    pub num_cores: Option<usize>,
    /// Worker threads for duplicate replicas; `None` sizes the pool to the
    /// maximum strength (one worker per duplicate replica).
    pub workers: Option<usize>,
    /// Defer detection-mode comparison to the detection thread.
    pub lazy: bool,
    pub lazy_capacity: usize,
    /// Producers block on a full buffer (the default) or fail fast.
    pub lazy_block_on_full: bool,
    /// Sliding-window length of the time-between-events estimator.
    pub tbe_window: usize,
    /// Optional free-running policy evaluator; by default the policy runs at
    /// sphere entries and event ingestion only.
    pub monitor_poll_interval: Option<Duration>,
    /// Cluster duplicate threads on dedicated cores at lowered priority.
    pub clustering: bool,
    /// Cores per clustering island; `None` means one island spanning all.
    pub island_size: Option<usize>,
    /// Niceness applied to lowered-priority threads.
    pub lowered_nice: i32,
    /// Artificial delay before each detector scan (timing experiments).
    pub detector_scan_delay: Option<Duration>,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            max_strength: Strength::Correct,
            dynamic: false,
            num_cores: None,
            workers: None,
            lazy: false,
            lazy_capacity: 64,
            lazy_block_on_full: true,
            tbe_window: 32,
            monitor_poll_interval: None,
            clustering: false,
            island_size: None,
            lowered_nice: 10,
            detector_scan_delay: None,
        }
    }
}

impl RuntimeConfig {
    /// Defaults seeded from `REDTHREADS_STRENGTH` (off|detect|correct),
    /// `REDTHREADS_DYNAMIC` (0|1) and `REDTHREADS_NUM_CORES`. Unparsable
    /// values fall back to the built-in defaults.
    pub fn from_env() -> RuntimeConfig {
        let mut cfg = RuntimeConfig::default();
        if let Ok(v) = std::env::var("REDTHREADS_STRENGTH") {
            if let Ok(s) = v.parse::<Strength>() {
                cfg.max_strength = s;
            }
        }
        if let Ok(v) = std::env::var("REDTHREADS_DYNAMIC") {
            match v.trim() {
                "1" | "true" => cfg.dynamic = true,
                "0" | "false" => cfg.dynamic = false,
                _ => {}
            }
        }
        if let Ok(v) = std::env::var("REDTHREADS_NUM_CORES") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    cfg.num_cores = Some(n);
                }
            }
        }
        cfg
    }

    pub(crate) fn detected_cores(&self) -> usize {
        self.num_cores.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
    }

    fn worker_count(&self) -> usize {
        self.workers
            .unwrap_or_else(|| self.max_strength.replica_count() - 1)
    }
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error("a redthreads runtime is already initialized in this process")]
    AlreadyInitialized,
    #[error("failed to create runtime threads: {0}")]
    Resource(#[from] std::io::Error),
    #[error("invalid clustering configuration: {0}")]
    Cluster(String),
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FinalizeError {
    #[error("spheres are still in flight")]
    PendingSpheres,
    #[error("runtime already finalized")]
    AlreadyFinalized,
}

/// Error raised by [`Runtime::execute_sphere`] for caller bugs. Detected
/// faults are not errors; they surface in [`SphereOutcome`].
#[derive(Debug, Error)]
pub enum SphereError {
    #[error("invalid sphere spec: {0}")]
    InvalidSpec(#[from] SpecError),
    #[error("spheres of replication cannot nest")]
    NestedSphere,
    #[error("runtime has been finalized")]
    RuntimeClosed,
    #[error("unit outputs do not match the compare list: {0}")]
    OutputContract(String),
    #[error("replica outputs have incompatible shapes: {0}")]
    Shape(#[from] crate::sphere::ShapeError),
    #[error("lazy output buffer is full")]
    LazyBufferFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("not inside a sphere of replication")]
pub struct NotInSphere;

/// Inputs of one sphere: `shared` is handed to every replica by reference,
/// `private` is cloned per replica.
pub struct SphereInputs<S: ?Sized, P> {
    pub shared: Arc<S>,
    pub private: P,
}

impl<S: ?Sized, P> SphereInputs<S, P> {
    pub fn new(shared: Arc<S>, private: P) -> Self {
        SphereInputs { shared, private }
    }
}

impl<P> SphereInputs<(), P> {
    /// Sphere with no shared bindings.
    pub fn private_only(private: P) -> Self {
        SphereInputs {
            shared: Arc::new(()),
            private,
        }
    }
}

/// Output builder for replicable units. Push one value per compare-list
/// entry, in compare-list order.
#[derive(Debug, Clone)]
pub struct Outputs<T> {
    items: Vec<(Cow<'static, str>, Value<T>)>,
}

impl<T: Scalar> Outputs<T> {
    pub fn new() -> Self {
        Outputs { items: Vec::new() }
    }

    /// Single-scalar output, the common case.
    pub fn scalar(name: impl Into<Cow<'static, str>>, value: T) -> Self {
        Outputs {
            items: vec![(name.into(), Value::Scalar(value))],
        }
    }

    pub fn push(&mut self, name: impl Into<Cow<'static, str>>, value: Value<T>) {
        self.items.push((name.into(), value));
    }

    pub fn with(mut self, name: impl Into<Cow<'static, str>>, value: Value<T>) -> Self {
        self.push(name, value);
        self
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

impl<T: Scalar> Default for Outputs<T> {
    fn default() -> Self {
        Outputs::new()
    }
}

/// How a sphere resolved.
#[derive(Debug)]
pub enum SphereOutcome<T, C> {
    /// Ran once, unreplicated.
    SerialDone { record: OutputRecord<T>, carry: C },
    /// Replicas agreed at the barrier.
    Verified { record: OutputRecord<T>, carry: C },
    /// Three replicas voted; the outvoted replica's divergence was masked.
    Corrected {
        record: OutputRecord<T>,
        carry: C,
        outvoted: usize,
    },
    /// Lazy mode: the primary's record was deposited for deferred comparison
    /// and execution continued without waiting for the duplicate.
    Deferred { record: OutputRecord<T>, carry: C },
    /// Two replicas disagreed; which one is wrong is unknowable with two.
    DetectedError(ComparisonOutcome),
    /// No two replicas agreed on some compared variable.
    UncorrectableError,
}

/// Outcome of a sphere plus the wall duration of the region.
#[derive(Debug)]
pub struct SphereResult<T, C> {
    pub outcome: SphereOutcome<T, C>,
    pub elapsed: Duration,
}

impl<T, C> SphereResult<T, C> {
    /// The canonical record and carry the application should continue with,
    /// when one exists. Deferred results hand back the primary's outputs,
    /// whose verification is still pending.
    pub fn canonical(self) -> Option<(OutputRecord<T>, C)> {
        match self.outcome {
            SphereOutcome::SerialDone { record, carry }
            | SphereOutcome::Verified { record, carry }
            | SphereOutcome::Corrected { record, carry, .. }
            | SphereOutcome::Deferred { record, carry } => Some((record, carry)),
            SphereOutcome::DetectedError(_) | SphereOutcome::UncorrectableError => None,
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(
            self.outcome,
            SphereOutcome::DetectedError(_) | SphereOutcome::UncorrectableError
        )
    }
}

/// Fault-injection hook: called once per replica record, after the unit
/// returns and before the record reaches comparison or the lazy buffer.
/// Arguments: sphere sequence number, effective replica count, record.
pub type FaultHook<T> = Arc<dyn Fn(u64, usize, &mut OutputRecord<T>) + Send + Sync>;

/// Sphere-entry hook: called with the sphere sequence number before the mode
/// decision, so harnesses can pace event injection by sphere index.
pub type EntryHook = Arc<dyn Fn(u64) + Send + Sync>;

thread_local! {
    static CURRENT_REPLICA: Cell<Option<usize>> = const { Cell::new(None) };
}

/// Replica index of the calling thread, `0..replica_count`.
///
/// Errors outside a sphere. Stable for the replica's lifetime.
pub fn thread_num() -> Result<usize, NotInSphere> {
    CURRENT_REPLICA.with(|c| c.get()).ok_or(NotInSphere)
}

struct ReplicaScope {
    prior: Option<usize>,
}

impl ReplicaScope {
    fn enter(replica: usize) -> ReplicaScope {
        let prior = CURRENT_REPLICA.with(|c| c.replace(Some(replica)));
        ReplicaScope { prior }
    }
}

impl Drop for ReplicaScope {
    fn drop(&mut self) {
        let prior = self.prior;
        CURRENT_REPLICA.with(|c| c.set(prior));
    }
}

static PROCESS_SLOT: AtomicBool = AtomicBool::new(false);

/// Initializes the process-wide runtime: worker pool, control variables and
/// event monitoring. With the dynamic policy enabled execution starts in
/// serial mode; otherwise the current strength starts at the configured
/// maximum. At most one runtime created through this entry point may be live
/// per process.
pub fn initialize<T: Scalar>(config: RuntimeConfig) -> Result<Runtime<T>, InitError> {
    if PROCESS_SLOT
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(InitError::AlreadyInitialized);
    }
    match Runtime::build(config, true) {
        Ok(rt) => Ok(rt),
        Err(e) => {
            PROCESS_SLOT.store(false, Ordering::SeqCst);
            Err(e)
        }
    }
}

/// Joins all runtime threads. Any lazy buffer is drained first, so every
/// pending comparison is resolved before this returns.
pub fn finalize<T: Scalar>(runtime: Runtime<T>) -> Result<FinalizeReport, FinalizeError> {
    runtime.finalize()
}

/// Everything resolved during finalization.
#[derive(Debug, Clone, Default)]
pub struct FinalizeReport {
    pub deferred: DeferredReport,
}

/// Copyable clock anchored at the runtime's initialization instant.
#[derive(Debug, Clone, Copy)]
pub struct RuntimeClock {
    epoch: Instant,
}

impl RuntimeClock {
    pub fn now(&self) -> EventTime {
        EventTime(self.epoch.elapsed().as_nanos() as u64)
    }
}

struct Inner<T: Scalar> {
    cfg: RuntimeConfig,
    icv: Arc<Icv>,
    monitor: Arc<Monitor>,
    pool: WorkerPool,
    lazy: Option<LazyEngine<T>>,
    seq: AtomicU64,
    inflight: AtomicUsize,
    lazy_pending: Arc<AtomicUsize>,
    epoch: Instant,
    closed: AtomicBool,
    torn_down: AtomicBool,
    owns_process_slot: bool,
    poller_stop: Arc<AtomicBool>,
    poller: Mutex<Option<JoinHandle<()>>>,
    fault_hook: Mutex<Option<FaultHook<T>>>,
    entry_hook: Mutex<Option<EntryHook>>,
    plan_slot: Mutex<Option<AffinityPlan>>,
}

impl<T: Scalar> Drop for Inner<T> {
    fn drop(&mut self) {
        self.teardown_threads();
        if self.owns_process_slot {
            PROCESS_SLOT.store(false, Ordering::SeqCst);
        }
    }
}

impl<T: Scalar> Inner<T> {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn teardown_threads(&self) {
        if self.torn_down.swap(true, Ordering::SeqCst) {
            return;
        }
        self.poller_stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.poller.lock().unwrap().take() {
            let _ = handle.join();
        }
        if let Some(lazy) = &self.lazy {
            let _ = lazy.shutdown_and_drain();
        }
        self.pool.shutdown();
    }
}

/// Handle to the runtime. Cheap to clone and shareable across application
/// threads; spheres may execute concurrently from different threads.
pub struct Runtime<T: Scalar> {
    inner: Arc<Inner<T>>,
}

impl<T: Scalar> Clone for Runtime<T> {
    fn clone(&self) -> Self {
        Runtime {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Runtime<T> {
    /// Builds a runtime without claiming the process-wide slot. Embeddable:
    /// harnesses and tests may run several of these, one at a time or
    /// concurrently.
    pub fn with_config(config: RuntimeConfig) -> Result<Runtime<T>, InitError> {
        Runtime::build(config, false)
    }

    fn build(cfg: RuntimeConfig, owns_process_slot: bool) -> Result<Runtime<T>, InitError> {
        let initial = if cfg.dynamic {
            Strength::Off
        } else {
            cfg.max_strength
        };
        let icv = Arc::new(Icv::new(cfg.max_strength, cfg.dynamic, initial));
        let monitor = Arc::new(Monitor::with_icv(Arc::clone(&icv), cfg.tbe_window));
        let pool = WorkerPool::spawn(cfg.worker_count())?;
        let lazy = if cfg.lazy {
            Some(LazyEngine::spawn(
                cfg.lazy_capacity,
                cfg.lazy_block_on_full,
                cfg.detector_scan_delay,
            )?)
        } else {
            None
        };

        let inner = Arc::new(Inner {
            icv,
            monitor,
            pool,
            lazy,
            seq: AtomicU64::new(0),
            inflight: AtomicUsize::new(0),
            lazy_pending: Arc::new(AtomicUsize::new(0)),
            epoch: Instant::now(),
            closed: AtomicBool::new(false),
            torn_down: AtomicBool::new(false),
            owns_process_slot,
            poller_stop: Arc::new(AtomicBool::new(false)),
            poller: Mutex::new(None),
            fault_hook: Mutex::new(None),
            entry_hook: Mutex::new(None),
            plan_slot: Mutex::new(None),
            cfg,
        });
        let rt = Runtime { inner };

        if let Some(interval) = rt.inner.cfg.monitor_poll_interval {
            let monitor = Arc::clone(&rt.inner.monitor);
            let stop = Arc::clone(&rt.inner.poller_stop);
            let epoch = rt.inner.epoch;
            let handle = std::thread::Builder::new()
                .name("redthreads-poller".into())
                .spawn(move || {
                    while !stop.load(Ordering::SeqCst) {
                        std::thread::sleep(interval);
                        monitor.poll_and_apply(epoch.elapsed().as_nanos() as u64);
                    }
                })?;
            *rt.inner.poller.lock().unwrap() = Some(handle);
        }

        if rt.inner.cfg.clustering {
            let cores = rt.inner.cfg.detected_cores();
            let island = rt.inner.cfg.island_size.unwrap_or(cores);
            let plan = crate::cluster::build_plan(cores, island, true)
                .map_err(|e| InitError::Cluster(e.to_string()))?;
            // Affinity control is best-effort; an unsupported platform runs
            // unpinned.
            let _ = rt.apply_plan(&plan);
        }

        Ok(rt)
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.inner.cfg
    }

    /// Monotonic runtime clock, nanoseconds since initialization.
    pub fn now(&self) -> EventTime {
        EventTime(self.inner.now_ns())
    }

    pub fn get_strength(&self) -> Strength {
        self.inner.icv.current()
    }

    /// Caps at the configured maximum; takes effect at the next sphere entry.
    pub fn set_strength(&self, s: Strength) {
        self.inner.icv.set_current(s);
    }

    pub fn max_strength(&self) -> Strength {
        self.inner.icv.max()
    }

    pub fn get_dynamic(&self) -> bool {
        self.inner.icv.dynamic_enabled()
    }

    /// Gates whether the monitor may rewrite the current strength.
    pub fn set_dynamic(&self, flag: bool) {
        self.inner.icv.set_dynamic(flag);
    }

    pub fn monitor(&self) -> &Monitor {
        &self.inner.monitor
    }

    /// Shared handle to the monitor, for hooks that outlive a borrow. Holding
    /// it does not keep the runtime alive.
    pub fn monitor_handle(&self) -> Arc<Monitor> {
        Arc::clone(&self.inner.monitor)
    }

    /// Copyable view of the runtime's monotonic clock.
    pub fn clock(&self) -> RuntimeClock {
        RuntimeClock {
            epoch: self.inner.epoch,
        }
    }

    /// Feeds one fault event to the monitor (the programmatic channel).
    pub fn ingest_event(&self, event: FaultEvent) -> Result<crate::monitor::EventStatistics, MonitorError> {
        self.inner.monitor.ingest_event(event)
    }

    /// Installs the fault-injection hook applied to every replica record.
    pub fn set_fault_injection_hook(&self, hook: Option<FaultHook<T>>) {
        *self.inner.fault_hook.lock().unwrap() = hook;
    }

    /// Installs the sphere-entry hook.
    pub fn set_sphere_entry_hook(&self, hook: Option<EntryHook>) {
        *self.inner.entry_hook.lock().unwrap() = hook;
    }

    /// Callback fired by the detection thread on each deferred mismatch.
    pub fn set_detection_callback(&self, cb: Option<DetectionCallback>) {
        if let Some(lazy) = &self.inner.lazy {
            lazy.set_callback(cb);
        }
    }

    /// Snapshot of the deferred-detection report accumulated so far.
    pub fn deferred_outcomes(&self) -> DeferredReport {
        self.inner
            .lazy
            .as_ref()
            .map(|l| l.snapshot())
            .unwrap_or_default()
    }

    /// Occupancy of the lazy buffer, if lazy mode is enabled.
    pub fn lazy_occupancy(&self) -> Option<usize> {
        self.inner.lazy.as_ref().map(|l| l.buffer.occupancy())
    }

    pub(crate) fn worker_tids(&self) -> Vec<i64> {
        self.inner.pool.worker_tids()
    }

    pub(crate) fn detector_tid(&self) -> Option<i64> {
        self.inner.lazy.as_ref().and_then(|l| l.detector_tid())
    }

    pub(crate) fn lowered_nice(&self) -> i32 {
        self.inner.cfg.lowered_nice
    }

    pub(crate) fn record_plan(&self, plan: &AffinityPlan) {
        *self.inner.plan_slot.lock().unwrap() = Some(plan.clone());
    }

    /// The affinity plan last recorded by [`Runtime::apply_plan`].
    pub fn recorded_plan(&self) -> Option<AffinityPlan> {
        self.inner.plan_slot.lock().unwrap().clone()
    }

    /// Joins all runtime threads after draining pending lazy comparisons.
    /// Fails with `PendingSpheres` when a sphere is still in flight.
    pub fn finalize(self) -> Result<FinalizeReport, FinalizeError> {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return Err(FinalizeError::AlreadyFinalized);
        }
        if self.inner.inflight.load(Ordering::SeqCst) > 0 {
            self.inner.closed.store(false, Ordering::SeqCst);
            return Err(FinalizeError::PendingSpheres);
        }
        // Queued duplicate replicas are runtime-internal work: let them
        // finish before draining the buffer.
        while self.inner.lazy_pending.load(Ordering::SeqCst) > 0 {
            std::thread::yield_now();
        }
        self.inner.poller_stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.inner.poller.lock().unwrap().take() {
            let _ = handle.join();
        }
        let deferred = match &self.inner.lazy {
            Some(lazy) => lazy.shutdown_and_drain(),
            None => DeferredReport::default(),
        };
        self.inner.pool.shutdown();
        self.inner.torn_down.store(true, Ordering::SeqCst);
        Ok(FinalizeReport { deferred })
    }

    /// Executes one sphere of replication.
    ///
    /// The effective strength is `min(spec.strength_requested, current)`
    /// where the current strength is read once, indivisibly, at entry.
    /// Detected faults and uncorrectable votes are reported through
    /// [`SphereOutcome`]; `Err` is reserved for caller bugs (invalid spec,
    /// nesting, broken output contract).
    pub fn execute_sphere<S, P, C, F>(
        &self,
        spec: &SphereSpec,
        inputs: SphereInputs<S, P>,
        unit: F,
    ) -> Result<SphereResult<T, C>, SphereError>
    where
        S: Send + Sync + ?Sized + 'static,
        P: Clone + Send + 'static,
        C: Send + 'static,
        F: Fn(usize, &S, P) -> (Outputs<T>, C) + Clone + Send + Sync + 'static,
    {
        if CURRENT_REPLICA.with(|c| c.get()).is_some() {
            return Err(SphereError::NestedSphere);
        }
        spec.validate()?;

        let started = Instant::now();
        // Claim in-flight status before checking for closure so finalize
        // either sees this sphere or this sphere sees the closure.
        let _guard = InflightGuard::enter(&self.inner.inflight);
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(SphereError::RuntimeClosed);
        }
        let seq = self.inner.seq.fetch_add(1, Ordering::Relaxed);

        let entry_hook = self.inner.entry_hook.lock().unwrap().clone();
        if let Some(hook) = entry_hook {
            hook(seq);
        }
        self.inner.monitor.poll_and_apply(self.inner.now_ns());

        let effective = spec.strength_requested.min(self.inner.icv.current());
        let fault_hook = self.inner.fault_hook.lock().unwrap().clone();

        let outcome = match effective {
            Strength::Off => self.run_serial(spec, inputs, unit, seq, &fault_hook)?,
            Strength::Detect if self.inner.lazy.is_some() => {
                self.run_lazy_detect(spec, inputs, unit, seq, &fault_hook)?
            }
            Strength::Detect | Strength::Correct => {
                self.run_eager(spec, inputs, unit, seq, effective, &fault_hook)?
            }
        };

        Ok(SphereResult {
            outcome,
            elapsed: started.elapsed(),
        })
    }

    fn run_serial<S, P, C, F>(
        &self,
        spec: &SphereSpec,
        inputs: SphereInputs<S, P>,
        unit: F,
        seq: u64,
        hook: &Option<FaultHook<T>>,
    ) -> Result<SphereOutcome<T, C>, SphereError>
    where
        S: Send + Sync + ?Sized + 'static,
        P: Clone + Send + 'static,
        F: Fn(usize, &S, P) -> (Outputs<T>, C) + Clone + Send + Sync + 'static,
    {
        let (outputs, carry) = {
            let _scope = ReplicaScope::enter(0);
            unit(0, &inputs.shared, inputs.private)
        };
        let mut record = build_record(spec.id, &spec.compare_vars, 0, outputs)?;
        if let Some(h) = hook {
            h(seq, 1, &mut record);
        }
        Ok(SphereOutcome::SerialDone { record, carry })
    }

    fn run_eager<S, P, C, F>(
        &self,
        spec: &SphereSpec,
        inputs: SphereInputs<S, P>,
        unit: F,
        seq: u64,
        effective: Strength,
        hook: &Option<FaultHook<T>>,
    ) -> Result<SphereOutcome<T, C>, SphereError>
    where
        S: Send + Sync + ?Sized + 'static,
        P: Clone + Send + 'static,
        C: Send + 'static,
        F: Fn(usize, &S, P) -> (Outputs<T>, C) + Clone + Send + Sync + 'static,
    {
        let n = effective.replica_count();
        let duplicates = n - 1;
        let cell: Arc<EagerCell<T, C>> = Arc::new(EagerCell::new(duplicates));

        for replica in 1..n {
            let cell = Arc::clone(&cell);
            let unit = unit.clone();
            let shared = Arc::clone(&inputs.shared);
            let private = inputs.private.clone();
            self.inner.pool.submit(Box::new(move || {
                let result = catch_unwind(AssertUnwindSafe(|| {
                    let _scope = ReplicaScope::enter(replica);
                    unit(replica, &shared, private)
                }))
                .map_err(panic_note);
                *cell.slots[replica - 1].lock().unwrap() = Some(result);
                cell.done.fetch_add(1, Ordering::Release);
            }));
        }

        let primary = catch_unwind(AssertUnwindSafe(|| {
            let _scope = ReplicaScope::enter(0);
            unit(0, &inputs.shared, inputs.private)
        }))
        .map_err(panic_note);

        // Implied barrier: every replica must have produced its outputs
        // before comparison.
        let mut spins: u32 = 0;
        while cell.done.load(Ordering::Acquire) < duplicates {
            spins = spins.wrapping_add(1);
            if spins % 64 == 0 {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
        }

        let mut raw: Vec<Result<(Outputs<T>, C), String>> = Vec::with_capacity(n);
        raw.push(primary);
        for slot in &cell.slots {
            raw.push(slot.lock().unwrap().take().expect("replica completed"));
        }

        if raw.iter().all(|r| r.is_err()) {
            let note = raw[0].as_ref().err().cloned().unwrap_or_default();
            panic!("{}: every replica panicked: {note}", spec.id);
        }

        let mut replicas: Vec<Option<(OutputRecord<T>, C)>> = Vec::with_capacity(n);
        for (replica, result) in raw.into_iter().enumerate() {
            match result {
                Ok((outputs, carry)) => {
                    let mut record = build_record(spec.id, &spec.compare_vars, replica, outputs)?;
                    if let Some(h) = hook {
                        h(seq, n, &mut record);
                    }
                    replicas.push(Some((record, carry)));
                }
                Err(_) => replicas.push(None),
            }
        }

        match effective {
            Strength::Detect => resolve_detect(replicas, spec.compare_policy),
            Strength::Correct => resolve_correct(replicas, spec.compare_policy),
            Strength::Off => unreachable!("eager path runs redundantly"),
        }
    }

    fn run_lazy_detect<S, P, C, F>(
        &self,
        spec: &SphereSpec,
        inputs: SphereInputs<S, P>,
        unit: F,
        seq: u64,
        hook: &Option<FaultHook<T>>,
    ) -> Result<SphereOutcome<T, C>, SphereError>
    where
        S: Send + Sync + ?Sized + 'static,
        P: Clone + Send + 'static,
        C: Send + 'static,
        F: Fn(usize, &S, P) -> (Outputs<T>, C) + Clone + Send + Sync + 'static,
    {
        let lazy = self.inner.lazy.as_ref().expect("lazy engine present");
        let buffer = Arc::clone(&lazy.buffer);
        let meta = LazyMeta {
            sphere_id: spec.id,
            compare_vars: spec.compare_vars.clone(),
            policy: spec.compare_policy,
        };

        // Queue the duplicate first so it overlaps with the primary.
        self.inner.lazy_pending.fetch_add(1, Ordering::SeqCst);
        {
            let unit = unit.clone();
            let shared = Arc::clone(&inputs.shared);
            let private = inputs.private.clone();
            let hook = hook.clone();
            let meta = meta.clone();
            let buffer = Arc::clone(&buffer);
            let pending = PendingGuard {
                counter: Arc::clone(&self.inner.lazy_pending),
            };
            self.inner.pool.submit(Box::new(move || {
                let _pending = pending; // decremented on drop, panic included
                let result = catch_unwind(AssertUnwindSafe(|| {
                    let _scope = ReplicaScope::enter(1);
                    unit(1, &shared, private)
                }));
                if let Ok((outputs, _carry)) = result {
                    if let Ok(mut record) =
                        build_record(meta.sphere_id, &meta.compare_vars, 1, outputs)
                    {
                        if let Some(h) = &hook {
                            h(seq, 2, &mut record);
                        }
                        let _ = buffer.deposit(1, record, seq, meta.policy);
                    }
                }
                // A panicked or contract-violating duplicate deposits
                // nothing; the drain reports the half-pair as a mismatch.
            }));
        }

        let (outputs, carry) = {
            let _scope = ReplicaScope::enter(0);
            unit(0, &inputs.shared, inputs.private)
        };
        let mut record = build_record(spec.id, &spec.compare_vars, 0, outputs)?;
        if let Some(h) = hook {
            h(seq, 2, &mut record);
        }
        buffer
            .deposit(0, record.clone(), seq, meta.policy)
            .map_err(|_| SphereError::LazyBufferFull)?;

        Ok(SphereOutcome::Deferred { record, carry })
    }
}

#[derive(Clone)]
struct LazyMeta {
    sphere_id: SphereId,
    compare_vars: Vec<Arc<str>>,
    policy: crate::sphere::ComparePolicy,
}

// Holds only the counter, not the runtime: queued duplicate tasks must not
// keep the runtime alive, or its teardown could run on a worker thread and
// try to join itself.
struct PendingGuard {
    counter: Arc<AtomicUsize>,
}

impl Drop for PendingGuard {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

struct InflightGuard<'a> {
    counter: &'a AtomicUsize,
}

impl<'a> InflightGuard<'a> {
    fn enter(counter: &'a AtomicUsize) -> Self {
        counter.fetch_add(1, Ordering::SeqCst);
        InflightGuard { counter }
    }
}

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

struct EagerCell<T, C> {
    done: AtomicUsize,
    slots: Vec<Mutex<Option<Result<(Outputs<T>, C), String>>>>,
}

impl<T, C> EagerCell<T, C> {
    fn new(duplicates: usize) -> Self {
        EagerCell {
            done: AtomicUsize::new(0),
            slots: (0..duplicates).map(|_| Mutex::new(None)).collect(),
        }
    }
}

fn panic_note(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "replica panicked".to_string()
    }
}

fn build_record<T: Scalar>(
    sphere_id: SphereId,
    compare_vars: &[Arc<str>],
    replica: usize,
    outputs: Outputs<T>,
) -> Result<OutputRecord<T>, SphereError> {
    if outputs.items.len() != compare_vars.len() {
        return Err(SphereError::OutputContract(format!(
            "{sphere_id}: expected {} compared outputs, unit produced {}",
            compare_vars.len(),
            outputs.items.len()
        )));
    }
    let mut values = Vec::with_capacity(compare_vars.len());
    for (expected, (got, value)) in compare_vars.iter().zip(outputs.items) {
        if expected.as_ref() != got.as_ref() {
            return Err(SphereError::OutputContract(format!(
                "{sphere_id}: expected output `{expected}`, unit produced `{got}`"
            )));
        }
        values.push((Arc::clone(expected), value));
    }
    Ok(OutputRecord::new(sphere_id, replica, values))
}

fn resolve_detect<T: Scalar, C>(
    mut replicas: Vec<Option<(OutputRecord<T>, C)>>,
    policy: crate::sphere::ComparePolicy,
) -> Result<SphereOutcome<T, C>, SphereError> {
    let b = replicas.pop().expect("two replicas");
    let a = replicas.pop().expect("two replicas");
    match (a, b) {
        (Some((ra, ca)), Some((rb, _))) => match compare_outputs(&ra, &rb, policy)? {
            ComparisonOutcome::Match => Ok(SphereOutcome::Verified {
                record: ra,
                carry: ca,
            }),
            mismatch => Ok(SphereOutcome::DetectedError(mismatch)),
        },
        (Some(_), None) => Ok(SphereOutcome::DetectedError(missing(0, 1))),
        (None, Some(_)) => Ok(SphereOutcome::DetectedError(missing(1, 0))),
        (None, None) => unreachable!("all-panicked handled earlier"),
    }
}

fn resolve_correct<T: Scalar, C>(
    mut replicas: Vec<Option<(OutputRecord<T>, C)>>,
    policy: crate::sphere::ComparePolicy,
) -> Result<SphereOutcome<T, C>, SphereError> {
    let present: Vec<usize> = replicas
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.is_some().then_some(i))
        .collect();

    match present.len() {
        3 => {
            let (rc, cc) = replicas[2].take().expect("present");
            let (rb, cb) = replicas[1].take().expect("present");
            let (ra, ca) = replicas[0].take().expect("present");
            match majority_vote(&ra, &rb, &rc, policy)? {
                VoteResult::Unanimous(_) => Ok(SphereOutcome::Verified {
                    record: ra,
                    carry: ca,
                }),
                VoteResult::MajorityCorrected { values, outvoted } => {
                    let canonical = [0usize, 1, 2]
                        .into_iter()
                        .find(|&i| i != outvoted)
                        .expect("two replicas remain");
                    let carry = match canonical {
                        0 => ca,
                        1 => cb,
                        _ => cc,
                    };
                    let record = OutputRecord::new(ra.sphere_id, canonical, values);
                    Ok(SphereOutcome::Corrected {
                        record,
                        carry,
                        outvoted,
                    })
                }
                VoteResult::NoMajority => Ok(SphereOutcome::UncorrectableError),
            }
        }
        2 => {
            // The aborted replica is a divergent output: the two survivors
            // form the majority iff they agree.
            let missing_idx = (0..3).find(|i| !present.contains(i)).expect("one missing");
            let (rj, _) = replicas[present[1]].take().expect("present");
            let (ri, ci) = replicas[present[0]].take().expect("present");
            match compare_outputs(&ri, &rj, policy)? {
                ComparisonOutcome::Match => Ok(SphereOutcome::Corrected {
                    record: ri,
                    carry: ci,
                    outvoted: missing_idx,
                }),
                _ => Ok(SphereOutcome::UncorrectableError),
            }
        }
        _ => Ok(SphereOutcome::UncorrectableError),
    }
}

fn missing(present: usize, missing: usize) -> ComparisonOutcome {
    ComparisonOutcome::Mismatch {
        first_divergent: REPLICA_MISSING.to_string(),
        replicas: (present, missing),
    }
}
