use std::hint;
use std::thread;
use std::time::{Duration, Instant};

const SPIN_LIMIT: u32 = 6;
const YIELD_WINDOW: Duration = Duration::from_millis(20);
const SLEEP: Duration = Duration::from_micros(50);

/// Spin briefly, then yield, then sleep once a wait has lasted long enough
/// that the peer is clearly not about to answer.
///
/// On a single-core machine spinning only delays the peer, so the spin phase
/// is skipped there.
#[derive(Debug)]
pub struct Backoff {
    step: u32,
    started: Option<Instant>,
    spin: bool,
}

impl Backoff {
    pub fn new() -> Self {
        Backoff { step: 0, started: None, spin: multi_core() }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.started = None;
    }

    pub fn snooze(&mut self) {
        if self.spin && self.step < SPIN_LIMIT {
            for _ in 0..(1u32 << self.step) {
                hint::spin_loop();
            }
        } else {
            let started = *self.started.get_or_insert_with(Instant::now);
            if started.elapsed() < YIELD_WINDOW {
                thread::yield_now();
            } else {
                thread::sleep(SLEEP);
            }
        }
        self.step = self.step.saturating_add(1);
    }

    /// Wall time spent in the current wait, zero until the spin phase ends.
    pub fn waited(&self) -> Duration {
        self.started.map(|s| s.elapsed()).unwrap_or_default()
    }
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff::new()
    }
}

fn multi_core() -> bool {
    thread::available_parallelism().map(|n| n.get() > 1).unwrap_or(false)
}
