//! Pooled worker threads that execute duplicate replicas.
//!
//! Workers are created once at runtime initialization and reused across
//! spheres. The handoff path spins briefly before parking so that a stream
//! of fine-grained spheres keeps the latency in the sub-microsecond range.

use crossbeam_deque::{Injector, Steal};
use std::io;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

pub(crate) type Task = Box<dyn FnOnce() + Send>;

/// Spin iterations before a worker parks. Yields are interleaved so an
/// oversubscribed box still makes progress.
const SPIN_BUDGET: u32 = 4096;

struct PoolShared {
    injector: Injector<Task>,
    shutdown: AtomicBool,
    parked: AtomicUsize,
    gate: Mutex<()>,
    cv: Condvar,
}

pub(crate) struct WorkerPool {
    shared: Arc<PoolShared>,
    handles: Mutex<Vec<JoinHandle<()>>>,
    /// OS thread ids of the workers, for affinity/priority control.
    worker_tids: Arc<Mutex<Vec<i64>>>,
}

impl WorkerPool {
    pub(crate) fn spawn(workers: usize) -> io::Result<WorkerPool> {
        let shared = Arc::new(PoolShared {
            injector: Injector::new(),
            shutdown: AtomicBool::new(false),
            parked: AtomicUsize::new(0),
            gate: Mutex::new(()),
            cv: Condvar::new(),
        });
        let worker_tids = Arc::new(Mutex::new(Vec::with_capacity(workers)));
        let mut handles = Vec::with_capacity(workers);
        for i in 0..workers {
            let shared = Arc::clone(&shared);
            let tids = Arc::clone(&worker_tids);
            let handle = std::thread::Builder::new()
                .name(format!("redthreads-worker-{i}"))
                .spawn(move || {
                    tids.lock().unwrap().push(crate::cluster::current_tid());
                    worker_loop(&shared);
                })?;
            handles.push(handle);
        }
        // Workers register their thread ids first thing; wait for the
        // registrations so affinity plans applied right after initialization
        // reach every worker (and the pool is warm before the first sphere).
        while worker_tids.lock().unwrap().len() < workers {
            std::thread::yield_now();
        }
        Ok(WorkerPool {
            shared,
            handles: Mutex::new(handles),
            worker_tids,
        })
    }

    pub(crate) fn submit(&self, task: Task) {
        self.shared.injector.push(task);
        if self.shared.parked.load(Ordering::Relaxed) > 0 {
            let _g = self.shared.gate.lock().unwrap();
            self.shared.cv.notify_one();
        }
    }

    pub(crate) fn worker_tids(&self) -> Vec<i64> {
        self.worker_tids.lock().unwrap().clone()
    }

    /// Signals shutdown and joins every worker. Queued tasks are drained
    /// before workers exit.
    pub(crate) fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        {
            let _g = self.shared.gate.lock().unwrap();
            self.shared.cv.notify_all();
        }
        let me = std::thread::current().id();
        for handle in self.handles.lock().unwrap().drain(..) {
            // A worker may end up dropping the last runtime handle; never
            // join the current thread.
            if handle.thread().id() != me {
                let _ = handle.join();
            }
        }
    }
}

impl Drop for WorkerPool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: &PoolShared) {
    let mut misses: u32 = 0;
    loop {
        match shared.injector.steal() {
            Steal::Success(task) => {
                misses = 0;
                task();
            }
            Steal::Empty | Steal::Retry => {
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                misses += 1;
                if misses < SPIN_BUDGET {
                    if misses % 64 == 0 {
                        std::thread::yield_now();
                    } else {
                        std::hint::spin_loop();
                    }
                } else {
                    shared.parked.fetch_add(1, Ordering::Relaxed);
                    let guard = shared.gate.lock().unwrap();
                    if shared.injector.is_empty() && !shared.shutdown.load(Ordering::SeqCst) {
                        let _ = shared
                            .cv
                            .wait_timeout(guard, std::time::Duration::from_millis(1));
                    }
                    shared.parked.fetch_sub(1, Ordering::Relaxed);
                    misses = SPIN_BUDGET / 2;
                }
            }
        }
    }
}
