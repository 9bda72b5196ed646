//! Event-interval adaptation: the strength control variable tracks fault
//! events, redundancy decays once the system stays quiet for longer than the
//! mean event gap, and the whole state machine replays deterministically.

use proptest::prelude::*;
use redthreads::{
    decide_mode, EventSource, EventStatistics, EventTime, FaultEvent, Monitor, Outputs, Runtime,
    RuntimeConfig, SphereInputs, SphereOutcome, SphereSpec, Strength,
};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

fn ev(t: u64) -> FaultEvent {
    FaultEvent::new(t, EventSource::Injected)
}

/// Applies a synthetic trace against a poll schedule and returns the
/// de-duplicated strength sequence.
fn strength_sequence(trace: &[u64], polls: &[u64], max: Strength) -> Vec<Strength> {
    let monitor = Monitor::standalone(max, true, 32);
    let mut out: Vec<Strength> = Vec::new();
    let mut next_event = 0;
    for &p in polls {
        while next_event < trace.len() && trace[next_event] <= p {
            monitor.ingest_event(ev(trace[next_event])).unwrap();
            next_event += 1;
        }
        let s = monitor.poll_and_apply(p);
        if out.last() != Some(&s) {
            out.push(s);
        }
    }
    out
}

#[test]
fn short_burst_then_silence_disables_redundancy() {
    // Two clustered events (mean gap 10), then nothing: serial, redundant
    // while the system looks faulty, serial again once quiet.
    let trace = [100, 110];
    let polls = [50, 105, 115, 119, 200];
    assert_eq!(
        strength_sequence(&trace, &polls, Strength::Detect),
        vec![Strength::Off, Strength::Detect, Strength::Off]
    );
}

#[test]
fn dense_burst_keeps_redundancy_for_the_rest_of_the_run() {
    let trace: Vec<u64> = (0..20).map(|i| 100 + i * 5).collect();
    let polls: Vec<u64> = (0..40).map(|i| i * 5).collect();
    assert_eq!(
        strength_sequence(&trace, &polls, Strength::Detect),
        vec![Strength::Off, Strength::Detect]
    );
}

#[test]
fn zero_event_trace_stays_serial() {
    let polls: Vec<u64> = (0..100).map(|i| i * 10).collect();
    assert_eq!(
        strength_sequence(&[], &polls, Strength::Correct),
        vec![Strength::Off]
    );
}

#[test]
fn zero_event_trace_executes_every_sphere_serially() {
    let rt = Runtime::<f64>::with_config(RuntimeConfig {
        max_strength: Strength::Detect,
        dynamic: true,
        ..RuntimeConfig::default()
    })
    .unwrap();
    let spec = SphereSpec::new(1u64, Strength::Detect).private(["x"]).compare(["y"]);
    let counter = Arc::new(AtomicUsize::new(0));
    let n = 200;
    for i in 0..n {
        let c = Arc::clone(&counter);
        let result = rt
            .execute_sphere(
                &spec,
                SphereInputs::private_only(i as f64),
                move |_r, _s: &(), x: f64| {
                    c.fetch_add(1, Ordering::SeqCst);
                    (Outputs::scalar("y", x), ())
                },
            )
            .unwrap();
        assert!(matches!(result.outcome, SphereOutcome::SerialDone { .. }));
    }
    // One invocation per sphere: the redundant fraction is zero.
    assert_eq!(counter.load(Ordering::SeqCst), n);
    rt.finalize().unwrap();
}

#[test]
fn event_switches_runtime_to_redundant_and_quiet_decays_it() {
    let rt = Runtime::<f64>::with_config(RuntimeConfig {
        max_strength: Strength::Detect,
        dynamic: true,
        ..RuntimeConfig::default()
    })
    .unwrap();
    let spec = SphereSpec::new(2u64, Strength::Detect).private(["x"]).compare(["y"]);
    let unit = |_r: usize, _s: &(), x: f64| (Outputs::scalar("y", x), ());

    let r = rt.execute_sphere(&spec, SphereInputs::private_only(0.0), unit).unwrap();
    assert!(matches!(r.outcome, SphereOutcome::SerialDone { .. }));

    // Two events 2ms apart: mean TBE is ~2ms.
    rt.ingest_event(FaultEvent::new(rt.now(), EventSource::Injected)).unwrap();
    std::thread::sleep(std::time::Duration::from_millis(2));
    rt.ingest_event(FaultEvent::new(rt.now(), EventSource::Injected)).unwrap();

    let r = rt.execute_sphere(&spec, SphereInputs::private_only(1.0), unit).unwrap();
    assert!(matches!(r.outcome, SphereOutcome::Verified { .. }));

    // Stay quiet for much longer than the mean gap.
    std::thread::sleep(std::time::Duration::from_millis(40));
    let r = rt.execute_sphere(&spec, SphereInputs::private_only(2.0), unit).unwrap();
    assert!(matches!(r.outcome, SphereOutcome::SerialDone { .. }));
    rt.finalize().unwrap();
}

#[test]
fn monitor_gating_blocks_icv_rewrites() {
    let monitor = Monitor::standalone(Strength::Detect, false, 32);
    monitor.ingest_event(ev(5)).unwrap();
    // Static policy: the event is logged but the strength stays put.
    assert_eq!(monitor.poll_and_apply(6u64), Strength::Detect);
    assert_eq!(monitor.event_count(), 1);
}

#[test]
fn runtime_set_dynamic_gates_the_monitor() {
    let rt = Runtime::<f64>::with_config(RuntimeConfig {
        max_strength: Strength::Detect,
        dynamic: true,
        ..RuntimeConfig::default()
    })
    .unwrap();
    rt.set_dynamic(false);
    assert!(!rt.get_dynamic());
    // Events arrive but the monitor may not rewrite the strength.
    rt.ingest_event(FaultEvent::new(rt.now(), EventSource::Injected)).unwrap();
    assert_eq!(rt.get_strength(), Strength::Off);
    rt.set_dynamic(true);
    assert!(rt.get_dynamic());
    rt.finalize().unwrap();
}

#[cfg(unix)]
#[test]
fn user_signal_hook_logs_one_event_per_delivery() {
    redthreads::install_user_signal_hook().unwrap();
    let monitor = Monitor::standalone(Strength::Detect, true, 32);
    unsafe {
        libc::raise(libc::SIGUSR1);
        libc::raise(libc::SIGUSR1);
        libc::raise(libc::SIGUSR1);
    }
    let applied = monitor.poll_and_apply(1_000u64);
    assert_eq!(applied, Strength::Detect);
    assert_eq!(monitor.event_count(), 3);
    assert!(monitor
        .event_log()
        .iter()
        .all(|e| e.source == EventSource::External));
}

/// Pure helper mirroring the poll loop with the mean TBE frozen to the value
/// estimated on the shared prefix, so that adding events can only lower the
/// time since the last event.
fn rmt_poll_count(events: &[u64], polls: &[u64], frozen_mean: Option<f64>) -> usize {
    polls
        .iter()
        .filter(|&&p| {
            let seen: Vec<u64> = events.iter().copied().filter(|&e| e <= p).collect();
            let stats = EventStatistics {
                event_count: seen.len() as u64,
                mean_tbe: if seen.len() >= 2 { frozen_mean } else { None },
                last_event_time: seen.last().copied().map(EventTime),
            };
            decide_mode(&stats, EventTime(p), Strength::Detect) != Strength::Off
        })
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn adding_events_never_reduces_redundant_polls(
        base in proptest::collection::vec(0u64..10_000, 0..20),
        extra in proptest::collection::vec(1u64..500, 0..10),
        polls in proptest::collection::vec(0u64..12_000, 1..40),
    ) {
        let mut base = base;
        base.sort_unstable();
        let mut polls = polls;
        polls.sort_unstable();

        // Suffix extension: appended events occur after the base trace.
        let start = base.last().copied().unwrap_or(0) + 1;
        let mut t = start;
        let mut extended = base.clone();
        for gap in extra {
            t += gap;
            extended.push(t);
        }

        let frozen_mean = if base.len() >= 2 {
            let gaps: Vec<u64> = base.windows(2).map(|w| w[1] - w[0]).collect();
            Some(gaps.iter().sum::<u64>() as f64 / gaps.len() as f64)
        } else {
            None
        };

        let before = rmt_poll_count(&base, &polls, frozen_mean);
        let after = rmt_poll_count(&extended, &polls, frozen_mean);
        prop_assert!(after >= before, "before={before} after={after}");
    }

    #[test]
    fn decide_mode_never_exceeds_max(
        count in 0u64..100,
        last in proptest::option::of(0u64..10_000),
        mean in proptest::option::of(1.0f64..10_000.0),
        now in 0u64..20_000,
        max_idx in 0u8..3,
    ) {
        let max = match max_idx {
            0 => Strength::Off,
            1 => Strength::Detect,
            _ => Strength::Correct,
        };
        let stats = EventStatistics {
            event_count: count,
            mean_tbe: if count >= 2 { mean } else { None },
            last_event_time: last.map(EventTime),
        };
        prop_assert!(decide_mode(&stats, EventTime(now), max) <= max);
    }
}

#[test]
fn replayed_traces_yield_identical_strength_sequences() {
    let trace: Vec<u64> = vec![5, 9, 14, 200, 203, 207, 1000];
    let polls: Vec<u64> = (0..150).map(|i| i * 10).collect();
    let a = strength_sequence(&trace, &polls, Strength::Correct);
    let b = strength_sequence(&trace, &polls, Strength::Correct);
    assert_eq!(a, b);
}
