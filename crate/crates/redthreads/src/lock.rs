//! Runtime locks for shared-binding access from replica threads.
//!
//! Replicas of a sphere may mutate a shared binding; these locks provide the
//! mutual exclusion for that pattern. Ownership is tracked per OS thread so
//! misuse (unlocking from a non-owner, destroying a held lock) is reported
//! instead of silently corrupting state.

use std::sync::{Arc, Condvar, Mutex};
use std::thread::ThreadId;
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LockError {
    #[error("lock destroyed while held")]
    DestroyWhileHeld,
    #[error("unset called by a thread that does not own the lock")]
    UnsetNotOwner,
}

struct LockInner {
    owner: Mutex<Option<ThreadId>>,
    cv: Condvar,
}

/// A runtime lock shareable among the replicas of a sphere.
///
/// Non-reentrant: a thread that sets a lock it already owns deadlocks, as
/// with a plain pthread mutex.
#[derive(Clone)]
pub struct RtLock {
    inner: Arc<LockInner>,
}

impl RtLock {
    /// Initializes a lock in the unlocked state.
    pub fn new() -> RtLock {
        RtLock {
            inner: Arc::new(LockInner {
                owner: Mutex::new(None),
                cv: Condvar::new(),
            }),
        }
    }

    /// Blocks the calling thread until the lock is available, then takes
    /// ownership.
    pub fn set(&self) {
        let me = std::thread::current().id();
        let mut owner = self.inner.owner.lock().unwrap();
        while owner.is_some() {
            owner = self.inner.cv.wait(owner).unwrap();
        }
        *owner = Some(me);
    }

    /// Releases the lock. Errors if the calling thread is not the owner.
    pub fn unset(&self) -> Result<(), LockError> {
        let me = std::thread::current().id();
        let mut owner = self.inner.owner.lock().unwrap();
        match *owner {
            Some(t) if t == me => {
                *owner = None;
                drop(owner);
                self.inner.cv.notify_one();
                Ok(())
            }
            _ => Err(LockError::UnsetNotOwner),
        }
    }

    /// Undefines the lock. Errors if any thread currently holds it.
    pub fn destroy(self) -> Result<(), LockError> {
        let owner = self.inner.owner.lock().unwrap();
        if owner.is_some() {
            return Err(LockError::DestroyWhileHeld);
        }
        Ok(())
    }
}

impl Default for RtLock {
    fn default() -> Self {
        RtLock::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unset_by_non_owner_is_rejected() {
        let lock = RtLock::new();
        lock.set();
        let other = lock.clone();
        let res = std::thread::spawn(move || other.unset()).join().unwrap();
        assert_eq!(res, Err(LockError::UnsetNotOwner));
        lock.unset().unwrap();
    }

    #[test]
    fn destroy_while_held_is_rejected() {
        let lock = RtLock::new();
        lock.set();
        assert_eq!(lock.clone().destroy(), Err(LockError::DestroyWhileHeld));
        lock.unset().unwrap();
        assert_eq!(lock.destroy(), Ok(()));
    }

    #[test]
    fn provides_mutual_exclusion() {
        let lock = RtLock::new();
        let value = Arc::new(std::sync::atomic::AtomicU64::new(0));
        let mut handles = Vec::new();
        for _ in 0..2 {
            let lock = lock.clone();
            let value = Arc::clone(&value);
            handles.push(std::thread::spawn(move || {
                for _ in 0..1000 {
                    lock.set();
                    // Deliberately non-atomic read-modify-write: only the
                    // lock makes this correct.
                    let v = value.load(std::sync::atomic::Ordering::Relaxed);
                    std::hint::black_box(v);
                    value.store(v + 1, std::sync::atomic::Ordering::Relaxed);
                    lock.unset().unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(value.load(std::sync::atomic::Ordering::Relaxed), 2000);
    }
}
