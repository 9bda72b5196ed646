//! Fault-injection campaigns: repeated kernel runs under a seeded injection
//! plan, with per-run outcomes and aggregate statistics.
//!
//! A run counts as failed when it silently produces a wrong result or ends
//! in an unrecoverable state; runs whose faults were detected are discarded
//! by the application and are not failures. Wall times are normalized by a
//! fault-free serial baseline of the same kernel.

use super::inject::{InjectionEvent, InjectionKind, InjectionPlan, RunSchedule};
use super::stats;
use crate::kernels::{output_matches, AbortKind, Kernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redthreads::{EventSource, FaultEvent, Runtime, RuntimeConfig, Strength};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub strength: Strength,
    pub dynamic: bool,
    pub lazy: bool,
    pub cluster: bool,
    pub island_size: Option<usize>,
    pub plan: InjectionPlan,
    pub n_runs: u32,
    /// Fault-free serial runs used to measure the normalization baseline.
    pub baseline_runs: u32,
    /// Reuse an externally measured baseline instead of measuring one, so
    /// several campaigns over one kernel share a normalization denominator.
    pub baseline_override_s: Option<f64>,
}

impl CampaignConfig {
    pub fn new(strength: Strength, plan: InjectionPlan, n_runs: u32) -> Self {
        CampaignConfig {
            strength,
            dynamic: false,
            lazy: false,
            cluster: false,
            island_size: None,
            plan,
            n_runs,
            baseline_runs: 10,
            baseline_override_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Correct,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: u32,
    pub injected: u32,
    pub wall_s: f64,
    pub normalized_time: f64,
    pub detections: u64,
    pub corrections: u64,
    pub uncorrectable: u64,
    /// The application discarded this run after a detection.
    pub discarded: bool,
    pub outcome: RunOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_normalized_time: f64,
    pub min_normalized_time: f64,
    pub max_normalized_time: f64,
    pub failure_rate: f64,
    pub total_injected: u64,
    pub total_detections: u64,
    pub total_corrections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub kernel: String,
    pub strength: String,
    pub dynamic: bool,
    pub lazy: bool,
    pub cluster: bool,
    pub seed: u64,
    pub rate: f64,
    pub kind: InjectionKind,
    pub n_runs: u32,
    pub sphere_count: u64,
    pub baseline_wall_s: f64,
    pub aggregates: Aggregates,
    pub runs: Vec<RunRecord>,
}

impl CampaignReport {
    pub fn normalized_times(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.normalized_time).collect()
    }
}

fn runtime_for(cfg: &CampaignConfig) -> Runtime<f64> {
    Runtime::with_config(RuntimeConfig {
        max_strength: cfg.strength,
        dynamic: cfg.dynamic,
        lazy: cfg.lazy,
        clustering: cfg.cluster,
        island_size: cfg.island_size,
        ..RuntimeConfig::default()
    })
    .expect("campaign runtime construction")
}

fn serial_runtime() -> Runtime<f64> {
    Runtime::with_config(RuntimeConfig {
        max_strength: Strength::Off,
        ..RuntimeConfig::default()
    })
    .expect("baseline runtime construction")
}

/// Mean fault-free serial wall time of the kernel, including runtime
/// teardown, so redundant-mode runs are normalized against the same
/// boundaries they are measured at.
pub fn measure_baseline(kernel: &dyn Kernel, runs: u32) -> f64 {
    // One unmeasured warmup.
    {
        let rt = serial_runtime();
        kernel.run(&rt, Strength::Off).expect("fault-free serial run");
        rt.finalize().expect("idle runtime");
    }
    let mut walls = Vec::with_capacity(runs as usize);
    for _ in 0..runs.max(1) {
        let rt = serial_runtime();
        let t0 = Instant::now();
        kernel.run(&rt, Strength::Off).expect("fault-free serial run");
        rt.finalize().expect("idle runtime");
        walls.push(t0.elapsed().as_secs_f64());
    }
    stats::mean(&walls)
}

fn install_hooks(rt: &Runtime<f64>, kind: InjectionKind, schedule: &Arc<RunSchedule>) {
    match kind {
        InjectionKind::NotificationOnly => {
            let monitor = rt.monitor_handle();
            let clock = rt.clock();
            let schedule = Arc::clone(schedule);
            rt.set_sphere_entry_hook(Some(Arc::new(move |seq| {
                if schedule.event_for(seq).is_some() {
                    let _ = monitor
                        .ingest_event(FaultEvent::new(clock.now(), EventSource::Injected));
                }
            })));
        }
        InjectionKind::CorruptCompareVar => {
            let schedule = Arc::clone(schedule);
            rt.set_fault_injection_hook(Some(Arc::new(move |seq, n_effective, rec| {
                let Some(event) = schedule.event_for(seq) else {
                    return;
                };
                if rec.replica_index != event.replica_slot % n_effective.max(1) {
                    return;
                }
                apply_corruption(rec, event);
            })));
        }
    }
}

fn apply_corruption(rec: &mut redthreads::OutputRecord<f64>, event: &InjectionEvent) {
    let mut rng = ChaCha8Rng::seed_from_u64(event.element_seed);
    let name = rec.values[0].0.clone();
    match super::inject::inject_corruption(rec, name.as_ref(), event.bit % 64, &mut rng) {
        Ok(corrupted) => *rec = corrupted,
        Err(e) => panic!("corruption of a kernel record failed: {e}"),
    }
}

/// Executes `cfg.n_runs` independent runs of `kernel` under the plan and
/// returns the full report.
pub fn run_campaign(kernel: &dyn Kernel, cfg: &CampaignConfig) -> CampaignReport {
    let baseline_wall_s = cfg
        .baseline_override_s
        .unwrap_or_else(|| measure_baseline(kernel, cfg.baseline_runs));
    let sphere_count = kernel.sphere_count();

    let mut runs = Vec::with_capacity(cfg.n_runs as usize);
    for run_index in 0..cfg.n_runs {
        let schedule = Arc::new(cfg.plan.schedule_for_run(run_index, sphere_count));
        let injected = schedule.events.len() as u32;

        let rt = runtime_for(cfg);
        install_hooks(&rt, cfg.plan.kind, &schedule);

        let t0 = Instant::now();
        let result = kernel.run(&rt, cfg.strength);
        let finalize = rt.finalize().expect("quiesced runtime");
        let wall_s = t0.elapsed().as_secs_f64();

        let deferred_mismatches = finalize.deferred.mismatches() as u64;
        let (detections, corrections, uncorrectable, discarded, outcome) = match &result {
            Ok(kernel_run) => {
                let detections = kernel_run.detections + deferred_mismatches;
                let matches =
                    output_matches(&kernel_run.output, kernel.reference(), kernel.tolerance());
                if matches {
                    (
                        detections,
                        kernel_run.corrections,
                        0,
                        deferred_mismatches > 0,
                        RunOutcome::Correct,
                    )
                } else if detections > 0 {
                    // Wrong output, but flagged: the application discards it.
                    (detections, kernel_run.corrections, 0, true, RunOutcome::Correct)
                } else {
                    (detections, kernel_run.corrections, 0, false, RunOutcome::Failed)
                }
            }
            Err(abort) => {
                let detections = abort.detections + deferred_mismatches;
                match abort.kind {
                    AbortKind::Detected => {
                        (detections, abort.corrections, 0, true, RunOutcome::Correct)
                    }
                    AbortKind::StateCorrupt if detections > 0 => {
                        (detections, abort.corrections, 0, true, RunOutcome::Correct)
                    }
                    AbortKind::StateCorrupt => {
                        (detections, abort.corrections, 0, false, RunOutcome::Failed)
                    }
                    AbortKind::Uncorrectable => {
                        (detections, abort.corrections, 1, false, RunOutcome::Failed)
                    }
                    AbortKind::Solver(_) => {
                        (detections, abort.corrections, 0, false, RunOutcome::Failed)
                    }
                }
            }
        };

        runs.push(RunRecord {
            run: run_index,
            injected,
            wall_s,
            normalized_time: wall_s / baseline_wall_s,
            detections,
            corrections,
            uncorrectable,
            discarded,
            outcome,
        });
    }

    let normalized: Vec<f64> = runs.iter().map(|r| r.normalized_time).collect();
    let failures = runs.iter().filter(|r| r.outcome == RunOutcome::Failed).count();
    let aggregates = Aggregates {
        mean_normalized_time: stats::mean(&normalized),
        min_normalized_time: normalized.iter().copied().fold(f64::INFINITY, f64::min),
        max_normalized_time: normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        failure_rate: failures as f64 / runs.len().max(1) as f64,
        total_injected: runs.iter().map(|r| r.injected as u64).sum(),
        total_detections: runs.iter().map(|r| r.detections).sum(),
        total_corrections: runs.iter().map(|r| r.corrections).sum(),
    };

    CampaignReport {
        kernel: kernel.name().to_string(),
        strength: cfg.strength.to_string(),
        dynamic: cfg.dynamic,
        lazy: cfg.lazy,
        cluster: cfg.cluster,
        seed: cfg.plan.seed,
        rate: cfg.plan.rate,
        kind: cfg.plan.kind,
        n_runs: cfg.n_runs,
        sphere_count,
        baseline_wall_s,
        aggregates,
        runs,
    }
}

/// Sweeps injection rates and returns `(rate, failure_rate)` pairs for the
/// robustness rating.
pub fn failure_sweep(
    kernel: &dyn Kernel,
    base: &CampaignConfig,
    rates: &[f64],
) -> Vec<(f64, f64)> {
    let baseline = base
        .baseline_override_s
        .unwrap_or_else(|| measure_baseline(kernel, base.baseline_runs));
    rates
        .iter()
        .map(|&rate| {
            let mut cfg = base.clone();
            cfg.plan = InjectionPlan::new(base.plan.seed, rate, base.plan.kind);
            cfg.baseline_override_s = Some(baseline);
            let report = run_campaign(kernel, &cfg);
            (rate, report.aggregates.failure_rate)
        })
        .collect()
}
