//! Wall and virtual clocks, plus the per-provider request-rate limiter.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use async_trait::async_trait;

#[async_trait]
pub trait Clock: Send + Sync {
    /// Milliseconds since the clock's origin.
    fn now_ms(&self) -> u64;

    async fn sleep_until(&self, deadline_ms: u64);

    async fn sleep(&self, duration: Duration) {
        let deadline = self.now_ms().saturating_add(duration.as_millis() as u64);
        self.sleep_until(deadline).await;
    }
}

/// Unix-epoch milliseconds, sleeping on the tokio timer.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

#[async_trait]
impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }

    async fn sleep_until(&self, deadline_ms: u64) {
        let now = self.now_ms();
        if deadline_ms > now {
            tokio::time::sleep(Duration::from_millis(deadline_ms - now)).await;
        }
    }
}

/// Simulated time. Sleeping moves the clock forward to the deadline (never
/// backwards) and yields so other tasks can run. Starts at zero.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(ms: u64) -> Self {
        VirtualClock { now: AtomicU64::new(ms) }
    }
}

#[async_trait]
impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    async fn sleep_until(&self, deadline_ms: u64) {
        self.now.fetch_max(deadline_ms, Ordering::SeqCst);
        tokio::task::yield_now().await;
    }
}

/// Spaces request starts at least `60_000 / rpm` milliseconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval_ms: Option<f64>,
    next_slot: Mutex<f64>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: Option<f64>) -> Self {
        RateLimiter {
            interval_ms: requests_per_minute.map(|rpm| 60_000.0 / rpm),
            next_slot: Mutex::new(f64::NEG_INFINITY),
        }
    }

    pub async fn acquire(&self, clock: &dyn Clock) {
        let Some(interval) = self.interval_ms else {
            return;
        };
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter lock");
            let slot = next.max(clock.now_ms() as f64);
            *next = slot + interval;
            slot
        };
        clock.sleep_until(slot.ceil() as u64).await;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn block_on<F: std::future::Future>(f: F) -> F::Output {
        tokio::runtime::Builder::new_current_thread()
            .enable_all()
            .build()
            .unwrap()
            .block_on(f)
    }

    #[test]
    fn virtual_clock_only_moves_forward() {
        block_on(async {
            let clock = VirtualClock::new();
            clock.sleep(Duration::from_secs(5)).await;
            clock.sleep_until(1000).await;
            assert_eq!(clock.now_ms(), 5000);
        });
    }

    #[test]
    fn limiter_spaces_requests() {
        block_on(async {
            let clock = Arc::new(VirtualClock::new());
            let limiter = RateLimiter::new(Some(60.0));
            let mut starts = Vec::new();
            for _ in 0..5 {
                limiter.acquire(clock.as_ref()).await;
                starts.push(clock.now_ms());
            }
            assert_eq!(starts, vec![0, 1000, 2000, 3000, 4000]);
        });
    }

    #[test]
    fn unlimited_limiter_never_waits() {
        block_on(async {
            let clock = VirtualClock::new();
            let limiter = RateLimiter::new(None);
            for _ in 0..100 {
                limiter.acquire(&clock).await;
            }
            assert_eq!(clock.now_ms(), 0);
        });
    }
}
