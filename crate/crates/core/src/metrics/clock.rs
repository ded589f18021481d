use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Time source for lifecycle timestamps, shared between the engine loop and
/// submitting threads.
pub trait Clock: Send + Sync + Debug {
    /// Time since the clock's origin.
    fn now(&self) -> Duration;

    fn is_virtual(&self) -> bool {
        false
    }

    /// Moves a virtual clock forward; wall clocks ignore this.
    fn advance(&self, _by: Duration) {}

    /// Moves a virtual clock forward to at least `t`; wall clocks ignore this.
    fn advance_to(&self, _t: Duration) {}
}

#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Deterministic clock advanced explicitly by the engine's cost model.
#[derive(Debug, Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn is_virtual(&self) -> bool {
        true
    }

    fn advance(&self, by: Duration) {
        self.nanos.fetch_add(by.as_nanos() as u64, Ordering::SeqCst);
    }

    fn advance_to(&self, t: Duration) {
        self.nanos.fetch_max(t.as_nanos() as u64, Ordering::SeqCst);
    }
}

/// Step duration charged to a virtual clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCost {
    pub step_ns: u64,
    pub token_ns: u64,
    /// Per scored (query, key) pair per layer.
    pub attended_pair_ns: u64,
}

impl Default for VirtualCost {
    fn default() -> Self {
        Self {
            step_ns: 20_000,
            token_ns: 2_000,
            attended_pair_ns: 2,
        }
    }
}

impl VirtualCost {
    pub fn step_duration(&self, tokens: u64, attended_pairs: u64) -> Duration {
        Duration::from_nanos(self.step_ns + self.token_ns * tokens + self.attended_pair_ns * attended_pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_only_moves_forward() {
        let c = VirtualClock::new();
        c.advance(Duration::from_micros(5));
        c.advance_to(Duration::from_micros(3));
        assert_eq!(c.now(), Duration::from_micros(5));
        c.advance_to(Duration::from_micros(9));
        assert_eq!(c.now(), Duration::from_micros(9));
    }

    #[test]
    fn wall_clock_is_monotone() {
        let c = WallClock::new();
        let a = c.now();
        assert!(c.now() >= a);
    }
}
