//! Internal control variables.
//!
//! Runtime-owned state read at sphere entry to choose between serial and
//! redundant dispatch. Reads and writes are indivisible; a sphere snapshots
//! the current strength once at entry.

use crate::sphere::Strength;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};

#[derive(Debug)]
pub(crate) struct Icv {
    current: AtomicU8,
    dynamic: AtomicBool,
    max: Strength,
}

impl Icv {
    pub(crate) fn new(max: Strength, dynamic: bool, initial: Strength) -> Icv {
        Icv {
            current: AtomicU8::new(initial.min(max) as u8),
            dynamic: AtomicBool::new(dynamic),
            max,
        }
    }

    pub(crate) fn current(&self) -> Strength {
        Strength::from_u8(self.current.load(Ordering::SeqCst))
    }

    /// Stores `min(s, max)`.
    pub(crate) fn set_current(&self, s: Strength) {
        self.current.store(s.min(self.max) as u8, Ordering::SeqCst);
    }

    pub(crate) fn max(&self) -> Strength {
        self.max
    }

    pub(crate) fn dynamic_enabled(&self) -> bool {
        self.dynamic.load(Ordering::SeqCst)
    }

    pub(crate) fn set_dynamic(&self, flag: bool) {
        self.dynamic.store(flag, Ordering::SeqCst);
    }
}
