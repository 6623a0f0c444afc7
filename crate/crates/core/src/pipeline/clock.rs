use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

/// Monotonic microsecond clock used for rate control.
pub trait Clock {
    fn now_us(&self) -> u64;
    /// Blocks (or, for simulated clocks, jumps) until `t_us`.
    fn sleep_until_us(&self, t_us: u64);
}

/// Wall clock measured from construction.
#[derive(Debug)]
pub struct SystemClock {
    start: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn sleep_until_us(&self, t_us: u64) {
        let now = self.now_us();
        if t_us > now {
            std::thread::sleep(Duration::from_micros(t_us - now));
        }
    }
}

/// Manually driven clock; sleeping advances time instantly.
#[derive(Debug, Default)]
pub struct SimulatedClock {
    now: AtomicU64,
}

impl SimulatedClock {
    pub fn new(start_us: u64) -> Self {
        SimulatedClock {
            now: AtomicU64::new(start_us),
        }
    }

    pub fn advance(&self, d_us: u64) {
        self.now.fetch_add(d_us, Ordering::SeqCst);
    }

    pub fn set(&self, t_us: u64) {
        self.now.fetch_max(t_us, Ordering::SeqCst);
    }
}

impl Clock for SimulatedClock {
    fn now_us(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until_us(&self, t_us: u64) {
        self.set(t_us);
    }
}

impl<C: Clock + ?Sized> Clock for &C {
    fn now_us(&self) -> u64 {
        (**self).now_us()
    }

    fn sleep_until_us(&self, t_us: u64) {
        (**self).sleep_until_us(t_us)
    }
}
