//! Deferred output comparison.
//!
//! In lazy mode the replicas of a detection sphere deposit their output
//! records into a lock-protected cyclic FIFO instead of synchronizing at the
//! barrier. A dedicated low-priority detection thread compares completed
//! pairs off the critical path and records the outcomes in a deferred report.
//! Lazy evaluation applies to detection strength only; correction remains
//! eager because the voted value must be available at the join.

use crate::scalar::Scalar;
use crate::sphere::{
    compare_outputs, ComparePolicy, ComparisonOutcome, OutputRecord, REPLICA_MISSING,
};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;
use thiserror::Error;

/// A comparison resolved off the critical path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeferredOutcome {
    /// Sphere sequence number the compared pair belongs to.
    pub sequence: u64,
    pub outcome: ComparisonOutcome,
}

/// Ordered log of deferred comparison outcomes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeferredReport {
    pub outcomes: Vec<DeferredOutcome>,
}

impl DeferredReport {
    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Number of deferred mismatches.
    pub fn mismatches(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| !o.outcome.is_match())
            .count()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("lazy output buffer is full")]
pub struct BufferFull;

/// One slot of the cyclic buffer: a pair of replica records keyed by sphere
/// sequence number, plus the activity flag used for reclamation.
#[derive(Debug)]
pub struct OutputBufferEntry<T> {
    sequence: u64,
    policy: ComparePolicy,
    elements: [Option<OutputRecord<T>>; 2],
    active: bool,
}

impl<T> OutputBufferEntry<T> {
    fn empty() -> Self {
        OutputBufferEntry {
            sequence: 0,
            policy: ComparePolicy::Bitwise,
            elements: [None, None],
            active: false,
        }
    }

    /// Validity flags of the two elements; true iff the element is present.
    pub fn valid_flags(&self) -> (bool, bool) {
        (self.elements[0].is_some(), self.elements[1].is_some())
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    fn clear(&mut self) {
        self.elements = [None, None];
        self.active = false;
    }
}

/// Cyclic FIFO of output pairs, one lock per entry.
///
/// Slots are keyed by sequence number modulo capacity. A producer that finds
/// its slot still occupied by an older sphere blocks until the detector
/// reclaims it (or fails fast, configurably).
pub struct CyclicBuffer<T> {
    slots: Vec<Mutex<OutputBufferEntry<T>>>,
    capacity: usize,
    block_on_full: bool,
    occupied: AtomicUsize,
    space_gate: Mutex<()>,
    space_cv: Condvar,
    work_gate: Mutex<()>,
    work_cv: Condvar,
}

impl<T: Scalar> CyclicBuffer<T> {
    pub fn new(capacity: usize, block_on_full: bool) -> CyclicBuffer<T> {
        let capacity = capacity.max(1);
        CyclicBuffer {
            slots: (0..capacity)
                .map(|_| Mutex::new(OutputBufferEntry::empty()))
                .collect(),
            capacity,
            block_on_full,
            occupied: AtomicUsize::new(0),
            space_gate: Mutex::new(()),
            space_cv: Condvar::new(),
            work_gate: Mutex::new(()),
            work_cv: Condvar::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of active entries.
    pub fn occupancy(&self) -> usize {
        self.occupied.load(Ordering::Relaxed)
    }

    /// Stores one replica's record in the slot keyed by `sequence`.
    pub fn deposit(
        &self,
        replica: usize,
        record: OutputRecord<T>,
        sequence: u64,
        policy: ComparePolicy,
    ) -> Result<(), BufferFull> {
        debug_assert!(replica < 2);
        let mut record = Some(record);
        loop {
            {
                let slot = &self.slots[(sequence % self.capacity as u64) as usize];
                let mut entry = slot.lock().unwrap();
                if !entry.active {
                    entry.active = true;
                    entry.sequence = sequence;
                    entry.policy = policy;
                    entry.elements[replica] = record.take();
                    self.occupied.fetch_add(1, Ordering::Relaxed);
                } else if entry.sequence == sequence {
                    entry.elements[replica] = record.take();
                } else if !self.block_on_full {
                    return Err(BufferFull);
                }
            }
            if record.is_none() {
                let _g = self.work_gate.lock().unwrap();
                self.work_cv.notify_one();
                return Ok(());
            }
            // Slot still owned by an older sphere: wait for reclamation.
            let guard = self.space_gate.lock().unwrap();
            let _ = self
                .space_cv
                .wait_timeout(guard, Duration::from_millis(1))
                .unwrap();
        }
    }

    /// Compares every entry whose pair is complete, reclaims those slots and
    /// returns the outcomes in sequence order. Half-complete entries are left
    /// untouched.
    pub fn scan(&self) -> Vec<DeferredOutcome> {
        let mut ready = Vec::new();
        for slot in &self.slots {
            let mut entry = slot.lock().unwrap();
            if entry.active && entry.elements[0].is_some() && entry.elements[1].is_some() {
                let a = entry.elements[0].take().unwrap();
                let b = entry.elements[1].take().unwrap();
                let outcome = compare_pair(&a, &b, entry.policy);
                ready.push(DeferredOutcome {
                    sequence: entry.sequence,
                    outcome,
                });
                entry.clear();
                self.occupied.fetch_sub(1, Ordering::Relaxed);
            }
        }
        if !ready.is_empty() {
            ready.sort_by_key(|o| o.sequence);
            let _g = self.space_gate.lock().unwrap();
            self.space_cv.notify_all();
        }
        ready
    }

    /// Resolves everything still active, including half-complete pairs whose
    /// missing replica will never arrive; callers must have quiesced the
    /// producers first.
    pub fn drain_remaining(&self) -> Vec<DeferredOutcome> {
        let mut out = Vec::new();
        for slot in &self.slots {
            let mut entry = slot.lock().unwrap();
            if !entry.active {
                continue;
            }
            let outcome = match (entry.elements[0].take(), entry.elements[1].take()) {
                (Some(a), Some(b)) => compare_pair(&a, &b, entry.policy),
                (Some(_), None) => missing_replica(0, 1),
                (None, Some(_)) => missing_replica(1, 0),
                (None, None) => missing_replica(0, 1),
            };
            out.push(DeferredOutcome {
                sequence: entry.sequence,
                outcome,
            });
            entry.clear();
            self.occupied.fetch_sub(1, Ordering::Relaxed);
        }
        out.sort_by_key(|o| o.sequence);
        {
            let _g = self.space_gate.lock().unwrap();
            self.space_cv.notify_all();
        }
        out
    }

    fn wait_for_work(&self, timeout: Duration) {
        let guard = self.work_gate.lock().unwrap();
        let _ = self.work_cv.wait_timeout(guard, timeout).unwrap();
    }

    fn notify_work(&self) {
        let _g = self.work_gate.lock().unwrap();
        self.work_cv.notify_all();
    }
}

fn compare_pair<T: Scalar>(
    a: &OutputRecord<T>,
    b: &OutputRecord<T>,
    policy: ComparePolicy,
) -> ComparisonOutcome {
    // Shape errors cannot arise from records the executor built against one
    // spec; fold them into a mismatch so the detector thread never dies.
    compare_outputs(a, b, policy).unwrap_or_else(|e| ComparisonOutcome::Mismatch {
        first_divergent: format!("shape-error: {e}"),
        replicas: (a.replica_index, b.replica_index),
    })
}

fn missing_replica(present: usize, missing: usize) -> ComparisonOutcome {
    ComparisonOutcome::Mismatch {
        first_divergent: REPLICA_MISSING.to_string(),
        replicas: (present, missing),
    }
}

pub(crate) type DetectionCallback = Arc<dyn Fn(&DeferredOutcome) + Send + Sync>;

/// The buffer, the detection thread and the accumulated deferred report.
pub(crate) struct LazyEngine<T: Scalar> {
    pub(crate) buffer: Arc<CyclicBuffer<T>>,
    report: Arc<Mutex<Vec<DeferredOutcome>>>,
    callback: Arc<Mutex<Option<DetectionCallback>>>,
    stop: Arc<AtomicBool>,
    detector: Mutex<Option<JoinHandle<()>>>,
    detector_tid: Arc<Mutex<Option<i64>>>,
}

impl<T: Scalar> LazyEngine<T> {
    pub(crate) fn spawn(
        capacity: usize,
        block_on_full: bool,
        scan_delay: Option<Duration>,
    ) -> std::io::Result<LazyEngine<T>> {
        let buffer = Arc::new(CyclicBuffer::new(capacity, block_on_full));
        let report: Arc<Mutex<Vec<DeferredOutcome>>> = Arc::new(Mutex::new(Vec::new()));
        let callback: Arc<Mutex<Option<DetectionCallback>>> = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let detector_tid = Arc::new(Mutex::new(None));

        let handle = {
            let buffer = Arc::clone(&buffer);
            let report = Arc::clone(&report);
            let callback = Arc::clone(&callback);
            let stop = Arc::clone(&stop);
            let detector_tid = Arc::clone(&detector_tid);
            std::thread::Builder::new()
                .name("redthreads-detector".into())
                .spawn(move || {
                    *detector_tid.lock().unwrap() = Some(crate::cluster::current_tid());
                    loop {
                        if let Some(delay) = scan_delay {
                            std::thread::sleep(delay);
                        }
                        let ready = buffer.scan();
                        if ready.is_empty() {
                            if stop.load(Ordering::SeqCst) {
                                return;
                            }
                            buffer.wait_for_work(Duration::from_micros(200));
                        } else {
                            publish(&report, &callback, ready);
                        }
                    }
                })?
        };
        // The detector registers its thread id first thing; wait so affinity
        // plans applied right after initialization can reach it.
        while detector_tid.lock().unwrap().is_none() {
            std::thread::yield_now();
        }

        Ok(LazyEngine {
            buffer,
            report,
            callback,
            stop,
            detector: Mutex::new(Some(handle)),
            detector_tid,
        })
    }

    pub(crate) fn set_callback(&self, cb: Option<DetectionCallback>) {
        *self.callback.lock().unwrap() = cb;
    }

    pub(crate) fn snapshot(&self) -> DeferredReport {
        DeferredReport {
            outcomes: self.report.lock().unwrap().clone(),
        }
    }

    pub(crate) fn detector_tid(&self) -> Option<i64> {
        *self.detector_tid.lock().unwrap()
    }

    /// Stops the detection thread (after it has compared every complete
    /// pair), resolves stragglers and returns the full report.
    pub(crate) fn shutdown_and_drain(&self) -> DeferredReport {
        self.join_detector();
        let remaining = self.buffer.drain_remaining();
        publish(&self.report, &self.callback, remaining);
        self.snapshot()
    }

    fn join_detector(&self) {
        self.stop.store(true, Ordering::SeqCst);
        self.buffer.notify_work();
        if let Some(handle) = self.detector.lock().unwrap().take() {
            if handle.thread().id() != std::thread::current().id() {
                let _ = handle.join();
            }
        }
    }
}

impl<T: Scalar> Drop for LazyEngine<T> {
    fn drop(&mut self) {
        self.join_detector();
    }
}

fn publish(
    report: &Mutex<Vec<DeferredOutcome>>,
    callback: &Mutex<Option<DetectionCallback>>,
    ready: Vec<DeferredOutcome>,
) {
    if ready.is_empty() {
        return;
    }
    let cb = callback.lock().unwrap().clone();
    let mut log = report.lock().unwrap();
    for item in ready {
        if let Some(cb) = &cb {
            if !item.outcome.is_match() {
                cb(&item);
            }
        }
        log.push(item);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{SphereId, Value};

    fn rec(replica: usize, v: f64) -> OutputRecord<f64> {
        OutputRecord::new(
            SphereId(7),
            replica,
            vec![(Arc::from("y"), Value::Scalar(v))],
        )
    }

    #[test]
    fn deposit_tracks_validity_and_active_flags() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        buf.deposit(0, rec(0, 1.0), 7, ComparePolicy::Bitwise).unwrap();
        {
            let entry = buf.slots[7 % 4].lock().unwrap();
            assert!(entry.is_active());
            assert_eq!(entry.valid_flags(), (true, false));
        }
        buf.deposit(1, rec(1, 1.0), 7, ComparePolicy::Bitwise).unwrap();
        {
            let entry = buf.slots[7 % 4].lock().unwrap();
            assert_eq!(entry.valid_flags(), (true, true));
        }
        assert_eq!(buf.occupancy(), 1);
    }

    #[test]
    fn scan_compares_complete_pairs_and_reclaims() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        buf.deposit(0, rec(0, 1.0), 3, ComparePolicy::Bitwise).unwrap();
        buf.deposit(1, rec(1, 1.0), 3, ComparePolicy::Bitwise).unwrap();
        let out = buf.scan();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sequence, 3);
        assert!(out[0].outcome.is_match());
        assert_eq!(buf.occupancy(), 0);
    }

    #[test]
    fn scan_leaves_half_pairs_untouched() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        buf.deposit(0, rec(0, 1.0), 3, ComparePolicy::Bitwise).unwrap();
        assert!(buf.scan().is_empty());
        assert_eq!(buf.occupancy(), 1);
    }

    #[test]
    fn scan_reports_corrupted_pair_as_mismatch() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        buf.deposit(0, rec(0, 1.0), 9, ComparePolicy::Bitwise).unwrap();
        buf.deposit(1, rec(1, 2.0), 9, ComparePolicy::Bitwise).unwrap();
        let out = buf.scan();
        assert_eq!(out.len(), 1);
        assert!(!out[0].outcome.is_match());
    }

    #[test]
    fn producer_fails_fast_when_configured() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(1, false);
        buf.deposit(0, rec(0, 1.0), 0, ComparePolicy::Bitwise).unwrap();
        assert_eq!(
            buf.deposit(0, rec(0, 1.0), 1, ComparePolicy::Bitwise),
            Err(BufferFull)
        );
    }

    #[test]
    fn producer_blocks_until_slot_reclaimed() {
        let buf: Arc<CyclicBuffer<f64>> = Arc::new(CyclicBuffer::new(1, true));
        buf.deposit(0, rec(0, 1.0), 0, ComparePolicy::Bitwise).unwrap();
        buf.deposit(1, rec(1, 1.0), 0, ComparePolicy::Bitwise).unwrap();

        let producer = {
            let buf = Arc::clone(&buf);
            std::thread::spawn(move || {
                buf.deposit(0, rec(0, 2.0), 1, ComparePolicy::Bitwise).unwrap();
            })
        };
        // Give the producer a moment to hit the occupied slot, then reclaim.
        std::thread::sleep(Duration::from_millis(5));
        let first = buf.scan();
        assert_eq!(first.len(), 1);
        producer.join().unwrap();
        assert_eq!(buf.occupancy(), 1);
    }

    #[test]
    fn drain_reports_half_pairs_as_replica_missing() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        buf.deposit(1, rec(1, 1.0), 5, ComparePolicy::Bitwise).unwrap();
        let out = buf.drain_remaining();
        assert_eq!(out.len(), 1);
        match &out[0].outcome {
            ComparisonOutcome::Mismatch {
                first_divergent,
                replicas,
            } => {
                assert_eq!(first_divergent, REPLICA_MISSING);
                assert_eq!(*replicas, (1, 0));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn drain_preserves_fifo_order() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(8, true);
        for seq in 0..5u64 {
            buf.deposit(0, rec(0, seq as f64), seq, ComparePolicy::Bitwise).unwrap();
            buf.deposit(1, rec(1, seq as f64), seq, ComparePolicy::Bitwise).unwrap();
        }
        let out = buf.drain_remaining();
        let seqs: Vec<u64> = out.iter().map(|o| o.sequence).collect();
        assert_eq!(seqs, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn drain_of_empty_buffer_is_empty() {
        let buf: CyclicBuffer<f64> = CyclicBuffer::new(4, true);
        assert!(buf.drain_remaining().is_empty());
    }
}
