//! Fault-event monitor and the event-interval adaptation policy.
//!
//! The monitor logs fault-event notifications, maintains the mean
//! time-between-events (TBE) over a sliding window of inter-arrival gaps and
//! the time-since-last-event (TSLE), and rewrites the strength control
//! variable: redundancy turns on at the first event and turns off once the
//! system has been quiet for longer than the average gap.
//!
//! Events arrive either programmatically ([`Monitor::ingest_event`]) or via
//! an OS user-signal hook that only bumps a counter from the handler; the
//! counter is drained into real events at the next poll.

use crate::icv::Icv;
use crate::sphere::Strength;
use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use thiserror::Error;

/// Nanoseconds on the runtime's monotonic clock. Injected events may carry
/// synthetic timestamps for deterministic tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventTime(pub u64);

impl EventTime {
    pub fn nanos(self) -> u64 {
        self.0
    }

    fn since(self, earlier: EventTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl From<u64> for EventTime {
    fn from(v: u64) -> Self {
        EventTime(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventSource {
    /// Delivered by the host system (e.g. the user-signal hook).
    External,
    /// Produced by a fault-injection harness.
    Injected,
}

/// One fault-event notification. The payload is an opaque tag; event types
/// are deliberately not differentiated by the adaptation policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEvent {
    pub timestamp: EventTime,
    pub source: EventSource,
    pub payload: u64,
}

impl FaultEvent {
    pub fn new(timestamp: impl Into<EventTime>, source: EventSource) -> FaultEvent {
        FaultEvent {
            timestamp: timestamp.into(),
            source,
            payload: 0,
        }
    }
}

/// Snapshot of the monitor's event statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventStatistics {
    pub event_count: u64,
    /// Mean of the windowed inter-arrival gaps, in nanoseconds. `None` until
    /// at least two events have been observed.
    pub mean_tbe: Option<f64>,
    pub last_event_time: Option<EventTime>,
}

impl EventStatistics {
    /// Time since the last event at `now`, or `None` before the first event.
    pub fn tsle(&self, now: EventTime) -> Option<u64> {
        self.last_event_time.map(|last| now.since(last))
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MonitorError {
    #[error("event timestamp {got:?} precedes the last logged event {last:?}")]
    TimestampRegression { last: EventTime, got: EventTime },
}

/// The opportunistic mode decision.
///
/// Off with an empty log; off once the time since the last event exceeds the
/// mean TBE; otherwise the configured maximum strength. With a single event
/// the mean is undefined and redundancy stays on — no disable trigger exists
/// until an average gap can be computed.
pub fn decide_mode(stats: &EventStatistics, now: EventTime, max_strength: Strength) -> Strength {
    if stats.event_count == 0 {
        return Strength::Off;
    }
    if let (Some(mean), Some(tsle)) = (stats.mean_tbe, stats.tsle(now)) {
        if tsle as f64 > mean {
            return Strength::Off;
        }
    }
    max_strength
}

const EVENT_LOG_CAP: usize = 1 << 16;

struct MonitorState {
    log: Vec<FaultEvent>,
    gaps: VecDeque<u64>,
    count: u64,
    last: Option<EventTime>,
}

/// Ingests fault events, maintains TBE/TSLE statistics and applies the
/// adaptation policy to the strength control variable.
pub struct Monitor {
    icv: Arc<Icv>,
    state: Mutex<MonitorState>,
    window: usize,
}

impl Monitor {
    /// Standalone monitor with its own control variables, for deterministic
    /// policy tests and embedding.
    pub fn standalone(max_strength: Strength, dynamic: bool, window: usize) -> Monitor {
        let initial = if dynamic { Strength::Off } else { max_strength };
        Monitor::with_icv(Arc::new(Icv::new(max_strength, dynamic, initial)), window)
    }

    pub(crate) fn with_icv(icv: Arc<Icv>, window: usize) -> Monitor {
        Monitor {
            icv,
            state: Mutex::new(MonitorState {
                log: Vec::new(),
                gaps: VecDeque::new(),
                count: 0,
                last: None,
            }),
            window: window.max(1),
        }
    }

    /// Appends an event to the log and updates the statistics. If the dynamic
    /// policy is enabled the strength control variable is raised to the
    /// configured maximum (the time since this event is zero).
    pub fn ingest_event(&self, event: FaultEvent) -> Result<EventStatistics, MonitorError> {
        let stats = {
            let mut st = self.state.lock().unwrap();
            if let Some(last) = st.last {
                if event.timestamp < last {
                    return Err(MonitorError::TimestampRegression {
                        last,
                        got: event.timestamp,
                    });
                }
                let gap = event.timestamp.since(last);
                if st.gaps.len() == self.window {
                    st.gaps.pop_front();
                }
                st.gaps.push_back(gap);
            }
            st.last = Some(event.timestamp);
            st.count += 1;
            if st.log.len() < EVENT_LOG_CAP {
                st.log.push(event);
            }
            snapshot(&st)
        };
        if self.icv.dynamic_enabled() {
            self.icv.set_current(self.icv.max());
        }
        Ok(stats)
    }

    pub fn statistics(&self) -> EventStatistics {
        snapshot(&self.state.lock().unwrap())
    }

    /// Number of events logged so far.
    pub fn event_count(&self) -> u64 {
        self.state.lock().unwrap().count
    }

    /// Copy of the event log (bounded).
    pub fn event_log(&self) -> Vec<FaultEvent> {
        self.state.lock().unwrap().log.clone()
    }

    /// Current strength as decided by the policy at `now`.
    ///
    /// When the dynamic policy is enabled this drains any pending signal
    /// deliveries, applies [`decide_mode`] to the control variable and
    /// returns the applied strength; otherwise it is a no-op returning the
    /// current strength. Called at every sphere entry and usable from a
    /// periodic evaluator.
    pub fn poll_and_apply(&self, now: impl Into<EventTime>) -> Strength {
        let now = now.into();
        self.drain_signals(now);
        if !self.icv.dynamic_enabled() {
            return self.icv.current();
        }
        let s = decide_mode(&self.statistics(), now, self.icv.max());
        self.icv.set_current(s);
        s
    }

    fn drain_signals(&self, now: EventTime) {
        if !signal_hook_installed() {
            return;
        }
        let pending = SIGNAL_PENDING.swap(0, Ordering::AcqRel);
        for _ in 0..pending {
            // Deliveries observed in one drain share the drain timestamp.
            let _ = self.ingest_event(FaultEvent::new(now, EventSource::External));
        }
    }
}

fn snapshot(st: &MonitorState) -> EventStatistics {
    let mean_tbe = if st.count >= 2 && !st.gaps.is_empty() {
        Some(st.gaps.iter().sum::<u64>() as f64 / st.gaps.len() as f64)
    } else {
        None
    };
    EventStatistics {
        event_count: st.count,
        mean_tbe,
        last_event_time: st.last,
    }
}

static SIGNAL_PENDING: AtomicUsize = AtomicUsize::new(0);
static SIGNAL_HOOK_INSTALLED: AtomicBool = AtomicBool::new(false);

pub(crate) fn signal_hook_installed() -> bool {
    SIGNAL_HOOK_INSTALLED.load(Ordering::Acquire)
}

/// Installs a process-wide SIGUSR1 handler that logs one fault event per
/// delivery. The handler only increments a counter (async-signal-safe); the
/// events materialize at the next monitor poll. Install at most once per
/// process, for the runtime that owns event monitoring.
#[cfg(unix)]
pub fn install_user_signal_hook() -> std::io::Result<()> {
    extern "C" fn on_user_signal(_sig: libc::c_int) {
        SIGNAL_PENDING.fetch_add(1, Ordering::Release);
    }

    unsafe {
        let mut action: libc::sigaction = std::mem::zeroed();
        action.sa_sigaction = on_user_signal as *const () as usize;
        libc::sigemptyset(&mut action.sa_mask);
        if libc::sigaction(libc::SIGUSR1, &action, std::ptr::null_mut()) != 0 {
            return Err(std::io::Error::last_os_error());
        }
    }
    SIGNAL_HOOK_INSTALLED.store(true, Ordering::Release);
    Ok(())
}

#[cfg(not(unix))]
pub fn install_user_signal_hook() -> std::io::Result<()> {
    Err(std::io::Error::new(
        std::io::ErrorKind::Unsupported,
        "user-signal hook requires a unix platform",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64) -> FaultEvent {
        FaultEvent::new(t, EventSource::Injected)
    }

    #[test]
    fn first_event_enables_redundancy() {
        let m = Monitor::standalone(Strength::Detect, true, 32);
        assert_eq!(m.poll_and_apply(0u64), Strength::Off);
        let stats = m.ingest_event(ev(5)).unwrap();
        assert_eq!(stats.event_count, 1);
        assert_eq!(stats.mean_tbe, None);
        assert_eq!(m.poll_and_apply(6u64), Strength::Detect);
    }

    #[test]
    fn mean_tbe_is_mean_of_gaps() {
        let m = Monitor::standalone(Strength::Detect, true, 32);
        for t in [0, 10, 30] {
            m.ingest_event(ev(t)).unwrap();
        }
        let stats = m.statistics();
        assert_eq!(stats.event_count, 3);
        assert_eq!(stats.mean_tbe, Some(15.0));
    }

    #[test]
    fn timestamp_regression_is_rejected() {
        let m = Monitor::standalone(Strength::Detect, true, 32);
        m.ingest_event(ev(7)).unwrap();
        assert_eq!(
            m.ingest_event(ev(3)),
            Err(MonitorError::TimestampRegression {
                last: EventTime(7),
                got: EventTime(3),
            })
        );
    }

    #[test]
    fn decide_mode_matches_tsle_arithmetic() {
        let m = Monitor::standalone(Strength::Correct, true, 32);
        for t in [0, 10, 30] {
            m.ingest_event(ev(t)).unwrap();
        }
        let stats = m.statistics();
        // TSLE = 10 <= mean 15: stay on.
        assert_eq!(decide_mode(&stats, EventTime(40), Strength::Correct), Strength::Correct);
        // TSLE = 16 > mean 15: off.
        assert_eq!(decide_mode(&stats, EventTime(46), Strength::Correct), Strength::Off);
    }

    #[test]
    fn decide_mode_off_with_empty_log() {
        let m = Monitor::standalone(Strength::Correct, true, 32);
        assert_eq!(decide_mode(&m.statistics(), EventTime(100), Strength::Correct), Strength::Off);
    }

    #[test]
    fn single_event_keeps_redundancy_on() {
        let m = Monitor::standalone(Strength::Detect, true, 32);
        m.ingest_event(ev(0)).unwrap();
        assert_eq!(m.poll_and_apply(1_000_000_000u64), Strength::Detect);
    }

    #[test]
    fn gated_when_dynamic_disabled() {
        let m = Monitor::standalone(Strength::Detect, false, 32);
        m.ingest_event(ev(5)).unwrap();
        assert_eq!(m.poll_and_apply(6u64), Strength::Detect);
        // A static runtime keeps whatever the control variable held.
        let stats = m.statistics();
        assert_eq!(stats.event_count, 1);
    }

    #[test]
    fn window_bounds_the_gap_history() {
        let m = Monitor::standalone(Strength::Detect, true, 2);
        for t in [0, 100, 104, 108] {
            m.ingest_event(ev(t)).unwrap();
        }
        // Window of 2 keeps gaps {4, 4}; the initial 100 gap has aged out.
        assert_eq!(m.statistics().mean_tbe, Some(4.0));
    }

    #[test]
    fn replay_is_deterministic() {
        let trace = [0u64, 12, 19, 50, 51, 90];
        let polls = [5u64, 15, 30, 60, 80, 120, 200];
        let run = || {
            let m = Monitor::standalone(Strength::Detect, true, 32);
            let mut applied = Vec::new();
            let mut ei = 0;
            for &p in &polls {
                while ei < trace.len() && trace[ei] <= p {
                    m.ingest_event(ev(trace[ei])).unwrap();
                    ei += 1;
                }
                applied.push(m.poll_and_apply(p));
            }
            applied
        };
        assert_eq!(run(), run());
    }
}
