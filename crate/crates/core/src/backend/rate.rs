// SPDX-License-Identifier: Apache-2.0

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Time source for rate limiting and retry backoff.
pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

/// Clock that only moves when someone sleeps on it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    fn sleep(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

/// Sliding one-minute window: at most `per_minute` acquisitions in any 60 s.
pub struct RateLimiter {
    per_minute: u32,
    window: Duration,
    issued: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        RateLimiter {
            per_minute: per_minute.max(1),
            window: Duration::from_secs(60),
            issued: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks (on the clock) until a slot is free, then takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut q = self.issued.lock().expect("rate limiter poisoned");
                let now = self.clock.now();
                while q.front().is_some_and(|&t| t + self.window <= now) {
                    q.pop_front();
                }
                if q.len() < self.per_minute as usize {
                    q.push_back(now);
                    return;
                }
                *q.front().unwrap() + self.window - now
            };
            self.clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_exceeds_limit_in_any_minute() {
        let clock = VirtualClock::new();
        let limiter = RateLimiter::new(10, clock.clone());
        let mut stamps = Vec::new();
        for _ in 0..95 {
            limiter.acquire();
            stamps.push(clock.now());
        }
        for (i, &t) in stamps.iter().enumerate() {
            let in_window = stamps[i..].iter().filter(|&&s| s < t + Duration::from_secs(60)).count();
            assert!(in_window <= 10, "{in_window} requests within a minute of {t:?}");
        }
        // 95 requests at 10/min need at least 9 full minutes
        assert!(clock.now() >= Duration::from_secs(9 * 60));
        assert!(clock.now() < Duration::from_secs(10 * 60));
    }

    #[test]
    fn under_limit_does_not_wait() {
        let clock = VirtualClock::new();
        let limiter = RateLimiter::new(60, clock.clone());
        for _ in 0..60 {
            limiter.acquire();
        }
        assert_eq!(clock.now(), Duration::ZERO);
    }
}
