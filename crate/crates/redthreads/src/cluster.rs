//! Thread clustering: affinity plans and priority assignment.
//!
//! With clustering enabled, the duplicate replicas of every island are pinned
//! onto a single dedicated core at lowered priority while primary threads
//! spread across the remaining cores. The detection thread is co-located with
//! the duplicates so primaries stay uncontended. Scheduling never changes
//! values, only timing; affinity failures degrade to unpinned execution.

use crate::runtime::Runtime;
use crate::scalar::Scalar;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ThreadRole {
    Primary,
    Duplicate,
    Detector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Priority {
    Elevated,
    Lowered,
}

/// Static thread-to-core mapping plus per-role priorities.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityPlan {
    pub n_cores: usize,
    pub island_size: usize,
    pub clustering_enabled: bool,
    /// Core sets per role. With clustering disabled every role may run on
    /// every core.
    pub assignments: BTreeMap<ThreadRole, Vec<usize>>,
    pub priorities: BTreeMap<ThreadRole, Priority>,
}

impl AffinityPlan {
    pub fn cores_for(&self, role: ThreadRole) -> &[usize] {
        self.assignments.get(&role).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn priority_of(&self, role: ThreadRole) -> Priority {
        *self.priorities.get(&role).unwrap_or(&Priority::Elevated)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("island size {island_size} is invalid for {n_cores} cores (need 2 <= island <= cores)")]
    InvalidIsland { island_size: usize, n_cores: usize },
}

/// Builds the static affinity plan.
///
/// Clustering disabled yields the balanced baseline: all roles unpinned at
/// equal priority. Enabled, the cores are split into islands of
/// `island_size`; in each island the last core hosts every duplicate (and the
/// detector) while the remaining cores host primaries. A trailing partial
/// island of one core is folded into the primary set.
pub fn build_plan(
    n_cores: usize,
    island_size: usize,
    clustering_enabled: bool,
) -> Result<AffinityPlan, PlanError> {
    if clustering_enabled && (island_size < 2 || island_size > n_cores) {
        return Err(PlanError::InvalidIsland {
            island_size,
            n_cores,
        });
    }

    let mut assignments = BTreeMap::new();
    let mut priorities = BTreeMap::new();

    if !clustering_enabled {
        let all: Vec<usize> = (0..n_cores).collect();
        for role in [ThreadRole::Primary, ThreadRole::Duplicate, ThreadRole::Detector] {
            assignments.insert(role, all.clone());
            priorities.insert(role, Priority::Elevated);
        }
        return Ok(AffinityPlan {
            n_cores,
            island_size,
            clustering_enabled,
            assignments,
            priorities,
        });
    }

    let mut primary = Vec::new();
    let mut duplicate = Vec::new();
    let mut start = 0;
    while start < n_cores {
        let end = (start + island_size).min(n_cores);
        let island = end - start;
        if island >= 2 {
            duplicate.push(end - 1);
            primary.extend(start..end - 1);
        } else {
            primary.extend(start..end);
        }
        start = end;
    }

    assignments.insert(ThreadRole::Primary, primary);
    assignments.insert(ThreadRole::Duplicate, duplicate.clone());
    assignments.insert(ThreadRole::Detector, duplicate);
    priorities.insert(ThreadRole::Primary, Priority::Elevated);
    priorities.insert(ThreadRole::Duplicate, Priority::Lowered);
    priorities.insert(ThreadRole::Detector, Priority::Lowered);

    Ok(AffinityPlan {
        n_cores,
        island_size,
        clustering_enabled,
        assignments,
        priorities,
    })
}

/// Affinity or priority control is unavailable; execution proceeds unpinned.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("thread affinity/priority control unavailable: {detail}")]
pub struct UnsupportedPlatform {
    pub detail: String,
}

impl<T: Scalar> Runtime<T> {
    /// Applies a plan to the runtime's threads: the calling thread takes the
    /// primary role, pool workers take the duplicate role and the detection
    /// thread (if any) the detector role. Best effort: on hosts without
    /// affinity control the plan is recorded and `UnsupportedPlatform` is
    /// returned as a warning.
    pub fn apply_plan(&self, plan: &AffinityPlan) -> Result<(), UnsupportedPlatform> {
        self.record_plan(plan);
        if !plan.clustering_enabled {
            return Ok(());
        }

        let lowered_nice = self.lowered_nice();
        let mut failures = Vec::new();

        let primary_tid = current_tid();
        if let Err(e) = pin_and_prioritize(
            primary_tid,
            plan.cores_for(ThreadRole::Primary),
            plan.priority_of(ThreadRole::Primary),
            lowered_nice,
        ) {
            failures.push(format!("primary: {e}"));
        }
        for tid in self.worker_tids() {
            if let Err(e) = pin_and_prioritize(
                tid,
                plan.cores_for(ThreadRole::Duplicate),
                plan.priority_of(ThreadRole::Duplicate),
                lowered_nice,
            ) {
                failures.push(format!("duplicate {tid}: {e}"));
            }
        }
        if let Some(tid) = self.detector_tid() {
            if let Err(e) = pin_and_prioritize(
                tid,
                plan.cores_for(ThreadRole::Detector),
                plan.priority_of(ThreadRole::Detector),
                lowered_nice,
            ) {
                failures.push(format!("detector {tid}: {e}"));
            }
        }

        if failures.is_empty() {
            Ok(())
        } else {
            Err(UnsupportedPlatform {
                detail: failures.join("; "),
            })
        }
    }
}

fn pin_and_prioritize(
    tid: i64,
    cores: &[usize],
    priority: Priority,
    lowered_nice: i32,
) -> Result<(), UnsupportedPlatform> {
    set_affinity(tid, cores)?;
    let nice = match priority {
        Priority::Elevated => 0,
        Priority::Lowered => lowered_nice,
    };
    set_nice(tid, nice)
}

/// OS thread id of the calling thread (0 where unavailable).
#[cfg(target_os = "linux")]
pub fn current_tid() -> i64 {
    unsafe { libc::syscall(libc::SYS_gettid) }
}

/// OS thread id of the calling thread (0 where unavailable).
#[cfg(not(target_os = "linux"))]
pub fn current_tid() -> i64 {
    0
}

#[cfg(target_os = "linux")]
fn set_affinity(tid: i64, cores: &[usize]) -> Result<(), UnsupportedPlatform> {
    if cores.is_empty() {
        return Ok(());
    }
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        for &core in cores {
            libc::CPU_SET(core, &mut set);
        }
        if libc::sched_setaffinity(tid as libc::pid_t, std::mem::size_of::<libc::cpu_set_t>(), &set)
            != 0
        {
            return Err(UnsupportedPlatform {
                detail: format!(
                    "sched_setaffinity failed: {}",
                    std::io::Error::last_os_error()
                ),
            });
        }
    }
    Ok(())
}

#[cfg(target_os = "linux")]
fn set_nice(tid: i64, nice: i32) -> Result<(), UnsupportedPlatform> {
    unsafe {
        // setpriority returns -1 both on error and as a legal priority;
        // clear errno first to tell them apart.
        *libc::__errno_location() = 0;
        if libc::setpriority(libc::PRIO_PROCESS, tid as libc::id_t, nice) != 0
            && *libc::__errno_location() != 0
        {
            return Err(UnsupportedPlatform {
                detail: format!("setpriority failed: {}", std::io::Error::last_os_error()),
            });
        }
    }
    Ok(())
}

/// Core set a thread is currently allowed on, when the host exposes it.
/// Useful for checking that an applied plan took effect.
#[cfg(target_os = "linux")]
pub fn observed_affinity(tid: i64) -> Option<Vec<usize>> {
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        if libc::sched_getaffinity(tid as libc::pid_t, std::mem::size_of::<libc::cpu_set_t>(), &mut set)
            != 0
        {
            return None;
        }
        Some((0..libc::CPU_SETSIZE as usize).filter(|&c| libc::CPU_ISSET(c, &set)).collect())
    }
}

#[cfg(not(target_os = "linux"))]
fn set_affinity(_tid: i64, _cores: &[usize]) -> Result<(), UnsupportedPlatform> {
    Err(UnsupportedPlatform {
        detail: "affinity control requires linux".to_string(),
    })
}

#[cfg(not(target_os = "linux"))]
fn set_nice(_tid: i64, _nice: i32) -> Result<(), UnsupportedPlatform> {
    Err(UnsupportedPlatform {
        detail: "priority control requires linux".to_string(),
    })
}

/// Core set a thread is currently allowed on, when the host exposes it.
#[cfg(not(target_os = "linux"))]
pub fn observed_affinity(_tid: i64) -> Option<Vec<usize>> {
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_core_single_island() {
        let plan = build_plan(4, 4, true).unwrap();
        assert_eq!(plan.cores_for(ThreadRole::Duplicate), &[3]);
        assert_eq!(plan.cores_for(ThreadRole::Detector), &[3]);
        assert_eq!(plan.cores_for(ThreadRole::Primary), &[0, 1, 2]);
    }

    #[test]
    fn eight_cores_two_islands() {
        let plan = build_plan(8, 4, true).unwrap();
        assert_eq!(plan.cores_for(ThreadRole::Duplicate), &[3, 7]);
        assert_eq!(plan.cores_for(ThreadRole::Primary), &[0, 1, 2, 4, 5, 6]);
    }

    #[test]
    fn island_of_one_is_invalid() {
        assert_eq!(
            build_plan(4, 1, true),
            Err(PlanError::InvalidIsland {
                island_size: 1,
                n_cores: 4
            })
        );
    }

    #[test]
    fn island_larger_than_cores_is_invalid() {
        assert!(build_plan(2, 4, true).is_err());
    }

    #[test]
    fn trailing_single_core_island_folds_into_primaries() {
        let plan = build_plan(5, 2, true).unwrap();
        assert_eq!(plan.cores_for(ThreadRole::Duplicate), &[1, 3]);
        assert_eq!(plan.cores_for(ThreadRole::Primary), &[0, 2, 4]);
    }

    #[test]
    fn disabled_plan_leaves_roles_unpinned_and_equal() {
        let plan = build_plan(4, 2, false).unwrap();
        for role in [ThreadRole::Primary, ThreadRole::Duplicate, ThreadRole::Detector] {
            assert_eq!(plan.cores_for(role), &[0, 1, 2, 3]);
            assert_eq!(plan.priority_of(role), Priority::Elevated);
        }
    }

    #[test]
    fn clustered_priorities_favor_the_primary() {
        let plan = build_plan(4, 4, true).unwrap();
        assert_eq!(plan.priority_of(ThreadRole::Primary), Priority::Elevated);
        assert_eq!(plan.priority_of(ThreadRole::Duplicate), Priority::Lowered);
        assert_eq!(plan.priority_of(ThreadRole::Detector), Priority::Lowered);
    }

    #[test]
    fn plan_construction_is_pure() {
        assert_eq!(build_plan(8, 4, true), build_plan(8, 4, true));
        assert_eq!(build_plan(6, 3, false), build_plan(6, 3, false));
    }
}
