use std::time::{Duration, Instant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Work split over orbitals with no cross-orbital coupling.
    Parallel,
    /// Barriers: density, potentials, Gram matrices, orthonormalization.
    Sync,
}

/// Splits elapsed wall time into parallel and synchronization phases.
///
/// Each call to [`PhaseClock::lap`] charges the time since the previous lap
/// to one phase, so the two totals always add up to the elapsed time.
#[derive(Debug, Clone)]
pub struct PhaseClock {
    last: Instant,
    parallel: Duration,
    sync: Duration,
}

impl Default for PhaseClock {
    fn default() -> Self {
        Self::new()
    }
}

impl PhaseClock {
    pub fn new() -> Self {
        PhaseClock { last: Instant::now(), parallel: Duration::ZERO, sync: Duration::ZERO }
    }

    pub fn lap(&mut self, phase: Phase) {
        let now = Instant::now();
        let dt = now - self.last;
        self.last = now;
        match phase {
            Phase::Parallel => self.parallel += dt,
            Phase::Sync => self.sync += dt,
        }
    }

    /// Drops the time since the previous lap from both phases.
    pub fn skip(&mut self) {
        self.last = Instant::now();
    }

    pub fn parallel_ms(&self) -> f64 {
        self.parallel.as_secs_f64() * 1e3
    }

    pub fn total_ms(&self) -> f64 {
        (self.parallel + self.sync).as_secs_f64() * 1e3
    }

    /// `(total, parallel)` in milliseconds.
    pub fn snapshot(&self) -> (f64, f64) {
        (self.total_ms(), self.parallel_ms())
    }
}
