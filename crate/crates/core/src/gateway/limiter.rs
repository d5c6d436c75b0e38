use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Time source for the client. Tests use [`ManualClock`] so that backoff
/// and rate limiting run in virtual time.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: AtomicU64::new(start_ms),
        }
    }

    pub fn advance(&self, d: Duration) {
        self.now.fetch_add(d.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

pub const WINDOW_MS: u64 = 60_000;

/// Sliding-window limiter: at most `per_minute` permits in any 60 s window.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: usize,
    issued: Mutex<VecDeque<u64>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32) -> Self {
        Self {
            per_minute: per_minute.max(1) as usize,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks (on `clock`) until a permit is available and takes it.
    /// The lock is held while waiting so permits are granted in order.
    pub fn acquire(&self, clock: &dyn Clock) -> u64 {
        let mut issued = self.issued.lock().unwrap();
        loop {
            let now = clock.now_ms();
            while issued.front().is_some_and(|t| now >= t + WINDOW_MS) {
                issued.pop_front();
            }
            if issued.len() < self.per_minute {
                issued.push_back(now);
                return now;
            }
            let oldest = *issued.front().unwrap();
            clock.sleep(Duration::from_millis(oldest + WINDOW_MS - now));
        }
    }
}
