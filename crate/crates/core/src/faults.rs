//! Named crash points for recovery testing.
//!
//! Production code calls [`Faults::hit`] at points where a process could die.
//! A test arms a point with a countdown; when it reaches zero the call returns
//! [`InjectedCrash`] and the caller abandons the operation exactly as a killed
//! process would, leaving whatever bytes were already on disk. The owning
//! object must then be dropped and reopened from disk.

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("injected crash at {0}")]
pub struct InjectedCrash(pub String);

#[derive(Default, Debug)]
pub struct Faults {
    armed: Mutex<BTreeMap<String, u64>>,
    hits: Mutex<BTreeMap<String, u64>>,
}

pub type SharedFaults = Arc<Faults>;

impl Faults {
    pub fn new() -> SharedFaults {
        Arc::new(Faults::default())
    }

    /// Crash on the `nth` (0-based) future hit of `point`.
    pub fn arm(&self, point: &str, nth: u64) {
        self.armed.lock().insert(point.to_string(), nth);
    }

    pub fn disarm_all(&self) {
        self.armed.lock().clear();
    }

    pub fn hit(&self, point: &str) -> Result<(), InjectedCrash> {
        *self.hits.lock().entry(point.to_string()).or_default() += 1;
        let mut armed = self.armed.lock();
        if let Some(n) = armed.get_mut(point) {
            if *n == 0 {
                armed.remove(point);
                return Err(InjectedCrash(point.to_string()));
            }
            *n -= 1;
        }
        Ok(())
    }

    /// How often each point was reached; lets tests pick kill points that exist.
    pub fn hit_counts(&self) -> BTreeMap<String, u64> {
        self.hits.lock().clone()
    }
}
