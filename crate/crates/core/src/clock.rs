//! Process-wide monotonic clock expressed as microseconds since the pipeline epoch.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

static EPOCH: OnceLock<Instant> = OnceLock::new();

/// Pins the pipeline epoch. Called implicitly by the first [`now_us`]; calling it
/// early (at process start) makes timestamps line up with process lifetime.
pub fn init_epoch() -> Instant {
    *EPOCH.get_or_init(Instant::now)
}

/// Microseconds elapsed since the pipeline epoch. Monotonic non-decreasing.
pub fn now_us() -> u64 {
    let epoch = init_epoch();
    Instant::now().saturating_duration_since(epoch).as_micros() as u64
}

/// Sleeps until `now_us() >= deadline_us`.
///
/// Coarse sleep followed by a short spin so that pacing loops keep sub-millisecond jitter.
pub fn sleep_until_us(deadline_us: u64) {
    loop {
        let now = now_us();
        if now >= deadline_us {
            return;
        }
        let remaining = deadline_us - now;
        if remaining > 1_500 {
            std::thread::sleep(Duration::from_micros(remaining - 1_000));
        } else {
            std::thread::yield_now();
        }
    }
}

/// How sources release data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pacing {
    /// Release each batch once its capture interval has elapsed, measured from `start_us`.
    Live { start_us: u64 },
    /// Release immediately.
    Fast,
}

impl Pacing {
    pub fn live_from_now() -> Self {
        Pacing::Live { start_us: now_us() }
    }

    /// Waits until `offset_us` after the start in live mode; returns the capture timestamp to stamp.
    pub fn wait_for(&self, offset_us: u64) -> u64 {
        match *self {
            Pacing::Live { start_us } => {
                let deadline = start_us + offset_us;
                sleep_until_us(deadline);
                deadline
            }
            Pacing::Fast => now_us(),
        }
    }
}
