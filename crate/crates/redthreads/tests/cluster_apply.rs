//! Applying affinity plans to live runtimes: best-effort pinning, graceful
//! degradation, and independence of results from scheduling.

use redthreads::cluster::observed_affinity;
use redthreads::{
    build_plan, Outputs, Runtime, RuntimeConfig, SphereInputs, SphereSpec, Strength,
};
use std::sync::Arc;

fn run_sums(rt: &Runtime<f64>, n: u64) -> Vec<u64> {
    let spec = SphereSpec::new(4u64, Strength::Detect)
        .share(["xs"])
        .private(["row"])
        .compare(["y"]);
    let xs: Arc<Vec<f64>> = Arc::new((0..256).map(|i| (i as f64) * 0.37).collect());
    (0..n)
        .map(|row| {
            let result = rt
                .execute_sphere(
                    &spec,
                    SphereInputs::new(Arc::clone(&xs), row),
                    |_r, xs: &Vec<f64>, row: u64| {
                        let y = xs.iter().map(|x| x * (row as f64 + 1.0)).sum::<f64>();
                        (Outputs::scalar("y", y), ())
                    },
                )
                .unwrap();
            let (record, ()) = result.canonical().expect("fault-free sphere");
            record.values[0].1.as_scalar().unwrap().to_bits()
        })
        .collect()
}

#[test]
fn apply_plan_pins_or_degrades_gracefully() {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2);
    if cores < 2 {
        return;
    }
    let rt = Runtime::<f64>::with_config(RuntimeConfig {
        max_strength: Strength::Detect,
        ..RuntimeConfig::default()
    })
    .unwrap();
    let plan = build_plan(cores, cores, true).unwrap();

    match rt.apply_plan(&plan) {
        Ok(()) => {
            // Observable pinning: the calling thread took the primary role,
            // so its affinity must equal the plan's primary core set.
            let primary_cores = plan.cores_for(redthreads::ThreadRole::Primary);
            if let Some(observed) = observed_affinity(redthreads::cluster::current_tid()) {
                assert_eq!(observed, primary_cores, "primary thread affinity");
            }
        }
        Err(warning) => {
            // Restricted host: the plan is recorded and execution proceeds.
            assert!(!warning.detail.is_empty());
        }
    }
    assert_eq!(rt.recorded_plan().as_ref(), Some(&plan));
    // Either way the runtime keeps producing correct results.
    let sums = run_sums(&rt, 32);
    assert_eq!(sums.len(), 32);
    rt.finalize().unwrap();
}

#[test]
fn disabled_plan_issues_no_pinning() {
    let rt = Runtime::<f64>::with_config(RuntimeConfig::default()).unwrap();
    let plan = build_plan(4, 2, false).unwrap();
    assert_eq!(rt.apply_plan(&plan), Ok(()));
    rt.finalize().unwrap();
}

#[test]
fn scheduling_never_changes_values() {
    let unpinned = {
        let rt = Runtime::<f64>::with_config(RuntimeConfig {
            max_strength: Strength::Detect,
            ..RuntimeConfig::default()
        })
        .unwrap();
        let sums = run_sums(&rt, 64);
        rt.finalize().unwrap();
        sums
    };
    let clustered = {
        let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2);
        let rt = Runtime::<f64>::with_config(RuntimeConfig {
            max_strength: Strength::Detect,
            clustering: cores >= 2,
            ..RuntimeConfig::default()
        })
        .unwrap();
        let sums = run_sums(&rt, 64);
        rt.finalize().unwrap();
        sums
    };
    assert_eq!(unpinned, clustered);
}
