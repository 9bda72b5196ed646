//! Deterministic fault injection.
//!
//! A plan is a seed plus a rate; the concrete schedule for a run — which
//! spheres get hit, on which replica slot, at which bit — is a pure function
//! of (seed, rate, kind, run index, run length). Sphere targets are sampled
//! without replacement, so one sphere receives at most one corruption and a
//! single-fault model holds at every strength.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use redthreads::{OutputRecord, Scalar, Value};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionKind {
    /// Events are fed to the monitor only; program state is untouched.
    NotificationOnly,
    /// One replica's output record gets a single bit flipped before
    /// comparison.
    CorruptCompareVar,
}

impl FromStr for InjectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "notify" | "notification" | "notification_only" => Ok(InjectionKind::NotificationOnly),
            "corrupt" | "corrupt_compare_var" => Ok(InjectionKind::CorruptCompareVar),
            other => Err(format!("unknown injection kind `{other}` (expected notify|corrupt)")),
        }
    }
}

/// Seeded fault-injection plan: `rate` expected events per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    pub seed: u64,
    pub rate: f64,
    pub kind: InjectionKind,
}

/// One scheduled event of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionEvent {
    /// Sphere ordinal (the runtime sequence number within the run).
    pub sphere: u64,
    /// Replica slot in 0..3, reduced modulo the effective replica count.
    pub replica_slot: usize,
    /// Bit flipped in the targeted payload.
    pub bit: u32,
    /// Seed for choosing the element within array payloads.
    pub element_seed: u64,
}

/// The events of one run, sorted by sphere ordinal.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSchedule {
    pub events: Vec<InjectionEvent>,
}

impl RunSchedule {
    pub fn event_for(&self, sphere: u64) -> Option<&InjectionEvent> {
        self.events
            .binary_search_by_key(&sphere, |e| e.sphere)
            .ok()
            .map(|i| &self.events[i])
    }
}

fn mix(seed: u64, run_index: u32) -> u64 {
    // splitmix64 over the pair, so per-run streams are independent.
    let mut z = seed ^ (u64::from(run_index).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl InjectionPlan {
    pub fn new(seed: u64, rate: f64, kind: InjectionKind) -> Self {
        assert!(rate >= 0.0, "rate must be nonnegative");
        InjectionPlan { seed, rate, kind }
    }

    /// Derives the schedule of one run: event count = floor(rate) plus a
    /// Bernoulli trial on the fraction, positions sampled uniformly without
    /// replacement over the run's spheres.
    pub fn schedule_for_run(&self, run_index: u32, run_length: u64) -> RunSchedule {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, run_index));
        let mut n_events = self.rate.floor() as u64;
        let frac = self.rate - self.rate.floor();
        if frac > 0.0 && rng.gen_range(0.0..1.0) < frac {
            n_events += 1;
        }
        let n_events = n_events.min(run_length);

        let mut seen = HashSet::with_capacity(n_events as usize);
        while (seen.len() as u64) < n_events {
            seen.insert(rng.gen_range(0..run_length));
        }
        // Hash-set iteration order is not deterministic; sort before drawing
        // the per-event attributes.
        let mut spheres: Vec<u64> = seen.into_iter().collect();
        spheres.sort_unstable();
        let events = spheres
            .into_iter()
            .map(|sphere| InjectionEvent {
                sphere,
                replica_slot: rng.gen_range(0..3usize),
                bit: rng.gen_range(0..64u32),
                element_seed: rng.next_u64(),
            })
            .collect();
        RunSchedule { events }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum InjectError {
    #[error("record has no variable named `{0}`")]
    UnknownVariable(String),
    #[error("bit {bit} out of range for a {width}-bit payload")]
    BitOutOfRange { bit: u32, width: u32 },
}

/// Returns a copy of `rec` with exactly one bit flipped in the named payload
/// (the element of an array payload is chosen by `rng`).
pub fn inject_corruption<T: Scalar>(
    rec: &OutputRecord<T>,
    var_name: &str,
    bit: u32,
    rng: &mut impl Rng,
) -> Result<OutputRecord<T>, InjectError> {
    if bit >= T::BITS {
        return Err(InjectError::BitOutOfRange { bit, width: T::BITS });
    }
    let mut out = rec.clone();
    let value = out
        .values
        .iter_mut()
        .find(|(n, _)| n.as_ref() == var_name)
        .map(|(_, v)| v)
        .ok_or_else(|| InjectError::UnknownVariable(var_name.to_string()))?;
    match value {
        Value::Scalar(v) => *v = v.flip_bit(bit),
        Value::Array(vs) => {
            let i = rng.gen_range(0..vs.len());
            vs[i] = vs[i].flip_bit(bit);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use redthreads::SphereId;
    use std::sync::Arc;

    fn record<T: Scalar>(v: Value<T>) -> OutputRecord<T> {
        OutputRecord::new(SphereId(0), 0, vec![(Arc::from("y"), v)])
    }

    #[test]
    fn flip_bit_zero_of_integer_four_gives_five() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = record(Value::Scalar(4i64));
        let out = inject_corruption(&rec, "y", 0, &mut rng).unwrap();
        assert_eq!(out.values[0].1.as_scalar(), Some(5));
    }

    #[test]
    fn double_flip_restores_the_record() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = record(Value::Scalar(1234.5678f64));
        let once = inject_corruption(&rec, "y", 13, &mut rng).unwrap();
        let twice = inject_corruption(&once, "y", 13, &mut rng).unwrap();
        assert_eq!(
            twice.values[0].1.as_scalar().unwrap().to_bits(),
            rec.values[0].1.as_scalar().unwrap().to_bits()
        );
    }

    #[test]
    fn sign_bit_flip_negates_a_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = record(Value::Scalar(1.0f64));
        let out = inject_corruption(&rec, "y", 63, &mut rng).unwrap();
        assert_eq!(out.values[0].1.as_scalar(), Some(-1.0));
    }

    #[test]
    fn unknown_variable_and_bad_bit_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rec = record(Value::Scalar(1.0f64));
        assert_eq!(
            inject_corruption(&rec, "z", 0, &mut rng),
            Err(InjectError::UnknownVariable("z".into()))
        );
        assert_eq!(
            inject_corruption(&rec, "y", 64, &mut rng),
            Err(InjectError::BitOutOfRange { bit: 64, width: 64 })
        );
    }

    #[test]
    fn schedules_are_pure_functions_of_their_inputs() {
        let plan = InjectionPlan::new(42, 2.5, InjectionKind::CorruptCompareVar);
        for run in 0..10 {
            assert_eq!(plan.schedule_for_run(run, 500), plan.schedule_for_run(run, 500));
        }
        // Different runs randomize the intervals.
        assert_ne!(
            plan.schedule_for_run(0, 500).events,
            plan.schedule_for_run(1, 500).events
        );
    }

    #[test]
    fn schedule_targets_distinct_spheres() {
        let plan = InjectionPlan::new(7, 8.0, InjectionKind::CorruptCompareVar);
        for run in 0..20 {
            let schedule = plan.schedule_for_run(run, 64);
            let spheres: HashSet<u64> = schedule.events.iter().map(|e| e.sphere).collect();
            assert_eq!(spheres.len(), schedule.events.len());
            assert_eq!(schedule.events.len(), 8);
            assert!(spheres.iter().all(|&s| s < 64));
        }
    }

    #[test]
    fn integer_rates_give_exact_event_counts() {
        let plan = InjectionPlan::new(3, 4.0, InjectionKind::NotificationOnly);
        for run in 0..50 {
            assert_eq!(plan.schedule_for_run(run, 1000).events.len(), 4);
        }
    }

    #[test]
    fn zero_rate_gives_empty_schedules() {
        let plan = InjectionPlan::new(3, 0.0, InjectionKind::NotificationOnly);
        for run in 0..20 {
            assert!(plan.schedule_for_run(run, 1000).events.is_empty());
        }
    }

    #[test]
    fn event_count_never_exceeds_run_length() {
        let plan = InjectionPlan::new(11, 100.0, InjectionKind::CorruptCompareVar);
        assert_eq!(plan.schedule_for_run(0, 10).events.len(), 10);
    }
}
